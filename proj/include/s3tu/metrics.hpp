#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "s3tu/ops.hpp"

namespace s3tu {

inline constexpr double kThreshold = 0.5;
inline constexpr double kProbClamp = 1e-7;

struct Confusion {
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::size_t total() const { return tp + fp + tn + fn; }
};

namespace detail {

inline void check_pair(const Tensor& p, const Tensor& g, const char* op) {
    if (p.shape() != g.shape())
        throw ShapeError(std::string(op) + ": prediction " + to_string(p.shape()) + " vs ground truth " +
                         to_string(g.shape()));
}

/// num/den with the empty-set convention: 0/0 is a perfect score.
inline double ratio(double num, double den) { return den == 0.0 ? 1.0 : num / den; }

}  // namespace detail

/// Counts after thresholding p at 0.5 (p >= 0.5 is foreground) and g at 0.5.
inline Confusion confusion(const Tensor& p, const Tensor& g) {
    detail::check_pair(p, g, "confusion");
    Confusion c;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const bool a = p[i] >= kThreshold, b = g[i] >= kThreshold;
        if (a && b) ++c.tp;
        else if (a) ++c.fp;
        else if (b) ++c.fn;
        else ++c.tn;
    }
    return c;
}

inline double dsc(const Confusion& c) {
    return detail::ratio(2.0 * static_cast<double>(c.tp), static_cast<double>(2 * c.tp + c.fp + c.fn));
}
// An empty reference set scores 1 only if the prediction is empty too.
inline double sensitivity(const Confusion& c) {
    if (c.tp + c.fn == 0) return c.fp == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}
inline double precision(const Confusion& c) {
    if (c.tp + c.fp == 0) return c.fn == 0 ? 1.0 : 0.0;
    return static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fp);
}
inline double accuracy(const Confusion& c) {
    return detail::ratio(static_cast<double>(c.tp + c.tn), static_cast<double>(c.total()));
}
inline double miou(const Confusion& c) {
    const double fg = detail::ratio(static_cast<double>(c.tp), static_cast<double>(c.tp + c.fp + c.fn));
    const double bg = detail::ratio(static_cast<double>(c.tn), static_cast<double>(c.tn + c.fp + c.fn));
    return 0.5 * (fg + bg);
}

/// Soft form: 2 sum(p g) / (sum p^2 + sum g^2). Hard form thresholds p first.
inline double dsc(const Tensor& p, const Tensor& g, bool soft = false) {
    detail::check_pair(p, g, "dsc");
    if (!soft) return dsc(confusion(p, g));
    double pg = 0.0, pp = 0.0, gg = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        pg += p[i] * g[i];
        pp += p[i] * p[i];
        gg += g[i] * g[i];
    }
    return detail::ratio(2.0 * pg, pp + gg);
}

inline double sensitivity(const Tensor& p, const Tensor& g) { return sensitivity(confusion(p, g)); }
inline double precision(const Tensor& p, const Tensor& g) { return precision(confusion(p, g)); }
inline double accuracy(const Tensor& p, const Tensor& g) { return accuracy(confusion(p, g)); }
inline double miou(const Tensor& p, const Tensor& g) { return miou(confusion(p, g)); }

struct SampleMetrics {
    double dsc = 0, acc = 0, miou = 0, precision = 0, sensitivity = 0;
};

inline SampleMetrics sample_metrics(const Tensor& p, const Tensor& g) {
    const Confusion c = confusion(p, g);
    return {dsc(c), accuracy(c), miou(c), precision(c), sensitivity(c)};
}

/// Per-sample hard metrics averaged over samples.
struct MetricReport {
    double dsc = 0, acc = 0, miou = 0, precision = 0, sensitivity = 0;
    std::size_t n_samples = 0;
    std::vector<SampleMetrics> per_sample;

    void add(const SampleMetrics& m) {
        per_sample.push_back(m);
        n_samples = per_sample.size();
        dsc = acc = miou = precision = sensitivity = 0.0;
        for (const auto& s : per_sample) {
            dsc += s.dsc;
            acc += s.acc;
            miou += s.miou;
            precision += s.precision;
            sensitivity += s.sensitivity;
        }
        const double n = static_cast<double>(n_samples);
        dsc /= n;
        acc /= n;
        miou /= n;
        precision /= n;
        sensitivity /= n;
    }

    /// p, g: [N, ...]; one sample per leading index.
    static MetricReport from_batch(const Tensor& p, const Tensor& g) {
        detail::check_pair(p, g, "metric report");
        MetricReport r;
        if (p.rank() == 0 || p.dim(0) == 0) return r;
        const std::size_t n = p.dim(0), per = p.numel() / n;
        Shape one(p.shape().begin() + 1, p.shape().end());
        for (std::size_t b = 0; b < n; ++b) {
            Tensor ps(one, std::vector<double>(p.data().begin() + b * per, p.data().begin() + (b + 1) * per));
            Tensor gs(one, std::vector<double>(g.data().begin() + b * per, g.data().begin() + (b + 1) * per));
            r.add(sample_metrics(ps, gs));
        }
        return r;
    }
};

inline void to_json(nlohmann::json& j, const SampleMetrics& m) {
    j = {{"dsc", m.dsc}, {"acc", m.acc}, {"miou", m.miou}, {"precision", m.precision}, {"sensitivity", m.sensitivity}};
}

inline void from_json(const nlohmann::json& j, SampleMetrics& m) {
    m.dsc = j.at("dsc").get<double>();
    m.acc = j.at("acc").get<double>();
    m.miou = j.at("miou").get<double>();
    m.precision = j.at("precision").get<double>();
    m.sensitivity = j.at("sensitivity").get<double>();
}

inline void to_json(nlohmann::json& j, const MetricReport& r) {
    j = {{"dsc", r.dsc},       {"acc", r.acc},
         {"miou", r.miou},     {"precision", r.precision},
         {"sensitivity", r.sensitivity}, {"n_samples", r.n_samples},
         {"per_sample", r.per_sample}};
}

inline void from_json(const nlohmann::json& j, MetricReport& r) {
    r.dsc = j.at("dsc").get<double>();
    r.acc = j.at("acc").get<double>();
    r.miou = j.at("miou").get<double>();
    r.precision = j.at("precision").get<double>();
    r.sensitivity = j.at("sensitivity").get<double>();
    r.n_samples = j.at("n_samples").get<std::size_t>();
    if (j.contains("per_sample")) r.per_sample = j.at("per_sample").get<std::vector<SampleMetrics>>();
}

struct LossWeights {
    double bce = 0.5;
    double dice = 0.5;
};

/// w_bce * BCE(p, g) + w_dice * (1 - softDSC(p, g)). p: [N, ...] probabilities, clamped to
/// [1e-7, 1 - 1e-7]; BCE is the mean over all elements, the Dice term the mean over samples.
inline Var bce_dice_loss(const Var& p, const Tensor& g, LossWeights w = {}) {
    const Shape& s = p.shape();
    if (s != g.shape())
        throw ShapeError("bce_dice_loss: prediction " + to_string(s) + " vs ground truth " + to_string(g.shape()));
    if (s.empty() || s[0] == 0) throw ShapeError("bce_dice_loss: empty batch");
    Tape& tape = p.tape();
    Var pc = clamp(p, kProbClamp, 1.0 - kProbClamp);
    Var gv = tape.constant(g);
    Tensor one_minus(g.shape());
    for (std::size_t i = 0; i < g.numel(); ++i) one_minus[i] = 1.0 - g[i];
    Var gn = tape.constant(std::move(one_minus));
    Var log_p = log(pc);
    Var log_q = log(add_scalar(scale(pc, -1.0), 1.0));
    Var bce = scale(mean_all(add(mul(gv, log_p), mul(gn, log_q))), -1.0);

    const std::size_t n = s[0], per = g.numel() / n;
    Var pf = reshape(pc, {n, per});
    Tensor gg(Shape{n});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < per; ++i) gg[b] += g[b * per + i] * g[b * per + i];
    Var inter = sum(mul(pf, reshape(gv, {n, per})), {1});
    Var denom = add(sum(square(pf), {1}), tape.constant(std::move(gg)));
    Var soft = div(scale(inter, 2.0), denom);
    Var dice = add_scalar(scale(mean_all(soft), -1.0), 1.0);
    return add(scale(bce, w.bce), scale(dice, w.dice));
}

/// Area under the ROC curve by the trapezoidal rule over all distinct score thresholds.
/// Returns 0.5 when either class is absent.
inline double roc_auc(const Tensor& p, const Tensor& g) {
    detail::check_pair(p, g, "roc_auc");
    std::vector<std::pair<double, bool>> items;
    items.reserve(p.numel());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const bool y = g[i] >= kThreshold;
        pos += y;
        items.emplace_back(p[i], y);
    }
    const std::size_t neg = items.size() - pos;
    if (pos == 0 || neg == 0) return 0.5;
    std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
    double auc = 0.0, tpr_prev = 0.0, fpr_prev = 0.0;
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < items.size();) {
        std::size_t j = i;
        while (j < items.size() && items[j].first == items[i].first) {
            items[j].second ? ++tp : ++fp;
            ++j;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        auc += (fpr - fpr_prev) * (tpr + tpr_prev) * 0.5;
        tpr_prev = tpr;
        fpr_prev = fpr;
        i = j;
    }
    return auc;
}

}  // namespace s3tu
