#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "json.hpp"
#include "s3tu/data.hpp"
#include "s3tu/metrics.hpp"
#include "s3tu/model.hpp"

namespace s3tu {

struct TrainConfig {
    double lr = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 300;
    std::size_t warmup_epochs = 1;
    double lr_floor = 1e-2;  // final lr as a fraction of the peak
    std::uint64_t seed = 0;
    LossWeights loss{};
    std::size_t eval_batch = 16;

    void validate() const {
        std::vector<std::string> bad;
        if (!(lr >= 0.0) || !std::isfinite(lr)) bad.emplace_back("lr must be finite and non-negative");
        if (batch_size < 2) bad.emplace_back("batch_size must be at least 2 (batch norm needs two samples)");
        if (epochs == 0) bad.emplace_back("epochs must be positive");
        if (!(lr_floor >= 0.0 && lr_floor <= 1.0)) bad.emplace_back("lr_floor must lie in [0, 1]");
        if (eval_batch == 0) bad.emplace_back("eval_batch must be positive");
        if (bad.empty()) return;
        std::string msg = "invalid train config:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw std::invalid_argument(msg);
    }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"lr", c.lr},
         {"batch_size", c.batch_size},
         {"epochs", c.epochs},
         {"warmup_epochs", c.warmup_epochs},
         {"lr_floor", c.lr_floor},
         {"seed", c.seed},
         {"loss_weights", {{"bce", c.loss.bce}, {"dice", c.loss.dice}}},
         {"eval_batch", c.eval_batch}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.lr_floor = j.value("lr_floor", c.lr_floor);
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss_weights")) {
        c.loss.bce = j.at("loss_weights").value("bce", c.loss.bce);
        c.loss.dice = j.at("loss_weights").value("dice", c.loss.dice);
    }
    c.eval_batch = j.value("eval_batch", c.eval_batch);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamHyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// One bias-corrected Adam update of p in place; t is the 1-based step count.
inline void adam_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::size_t t, double lr,
                        const AdamHyper& h = {}) {
    if (g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape())
        throw ShapeError("adam: parameter " + to_string(p.shape()) + ", gradient " + to_string(g.shape()) +
                         " and moments must agree");
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < p.numel(); ++i) {
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
        const double mh = m[i] / c1, vh = v[i] / c2;
        p[i] -= lr * mh / (std::sqrt(vh) + h.eps);
    }
}

struct AdamState {
    std::size_t step = 0;
    std::map<std::string, Tensor> m, v;
};

/// Updates every trainable entry that has a gradient, then applies the entry floors.
inline void adam_step(ParamStore& params, const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
                      const AdamHyper& h = {}) {
    ++state.step;
    for (auto& e : params.entries()) {
        if (!e.trainable) continue;
        auto it = grads.find(e.name);
        if (it == grads.end()) continue;
        auto [mi, fresh_m] = state.m.try_emplace(e.name, e.value.shape());
        auto [vi, fresh_v] = state.v.try_emplace(e.name, e.value.shape());
        adam_update(e.value, it->second, mi->second, vi->second, state.step, lr, h);
        if (std::isfinite(e.min_value))
            for (auto& x : e.value.data()) x = std::max(x, e.min_value);
    }
}

// ---------------------------------------------------------------------------
// Schedule: linear warm-up from 0, then cosine decay to lr * lr_floor at the last step.

inline double lr_at(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr, double floor) {
    if (step < warmup_steps) return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps == 0 || step + 1 >= total_steps) return total_steps > warmup_steps + 1 ? lr * floor : lr;
    const double span = static_cast<double>(total_steps - 1 - warmup_steps);
    const double progress = static_cast<double>(step - warmup_steps) / span;
    return lr * (floor + (1.0 - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
}

inline std::size_t steps_per_epoch(std::size_t n_samples, std::size_t batch_size) {
    return n_samples / batch_size + (n_samples % batch_size >= 2 ? 1 : 0);
}

// ---------------------------------------------------------------------------
// Training log

struct TrainLogRecord {
    std::size_t epoch = 0;
    std::size_t step = 0;  // global steps completed at the end of the epoch
    double loss = 0.0;     // mean batch loss over the epoch
    double lr = 0.0;       // lr of the epoch's last step
    double train_dsc = 0.0;
    std::optional<MetricReport> val;

    bool operator==(const TrainLogRecord& o) const {
        auto same = [](const std::optional<MetricReport>& a, const std::optional<MetricReport>& b) {
            if (a.has_value() != b.has_value()) return false;
            if (!a) return true;
            return nlohmann::json(*a) == nlohmann::json(*b);
        };
        return epoch == o.epoch && step == o.step && loss == o.loss && lr == o.lr && train_dsc == o.train_dsc &&
               same(val, o.val);
    }
};

/// Everything deterministic about a run. Wall-clock timings are kept separately.
struct TrainLog {
    std::vector<TrainLogRecord> epochs;
    std::vector<double> step_losses;
    std::size_t best_epoch = 0;
    double best_dsc = -1.0;

    bool operator==(const TrainLog& o) const = default;
};

inline void to_json(nlohmann::json& j, const TrainLogRecord& r) {
    j = {{"epoch", r.epoch}, {"step", r.step}, {"loss", r.loss}, {"lr", r.lr}, {"train_dsc", r.train_dsc}};
    j["val"] = r.val ? nlohmann::json(*r.val) : nlohmann::json(nullptr);
}

inline void to_json(nlohmann::json& j, const TrainLog& log) {
    j = {{"epochs", log.epochs}, {"step_losses", log.step_losses}, {"best_epoch", log.best_epoch},
         {"best_dsc", log.best_dsc}};
}

struct TrainResult {
    Model best;   // parameters of the epoch with the highest validation DSC
    Model last;   // parameters after the final step
    TrainLog log;
    std::vector<double> epoch_seconds;
};

using EpochCallback = std::function<void(const TrainLogRecord&, double seconds)>;

// ---------------------------------------------------------------------------

/// Eval-mode probabilities for every sample, batched.
inline Tensor predict_all(const Model& model, const std::vector<SamplePair>& data, std::size_t batch) {
    if (data.empty()) throw std::invalid_argument("predict: empty dataset");
    std::vector<Tensor> parts;
    for (std::size_t start = 0; start < data.size(); start += batch) {
        std::vector<std::size_t> idx;
        for (std::size_t i = start; i < std::min(data.size(), start + batch); ++i) idx.push_back(i);
        parts.push_back(model.predict(stack_samples(data, idx, false)));
    }
    Shape shape = parts[0].shape();
    shape[0] = data.size();
    Tensor out(shape);
    std::size_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.data().begin(), p.data().end(), out.data().begin() + offset);
        offset += p.numel();
    }
    return out;
}

inline MetricReport evaluate(const Model& model, const std::vector<SamplePair>& data, std::size_t batch = 16) {
    if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<std::size_t> all(data.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return MetricReport::from_batch(predict_all(model, data, batch), stack_samples(data, all, true));
}

inline void check_sizes(const ModelConfig& cfg, const std::vector<SamplePair>& data, const char* what) {
    for (const auto& s : data)
        if (s.image.shape() != Shape{cfg.in_channels, cfg.input_h, cfg.input_w})
            throw ShapeError(std::string(what) + " sample " + s.id + " has shape " + to_string(s.image.shape()) +
                             ", model expects " +
                             to_string(Shape{cfg.in_channels, cfg.input_h, cfg.input_w}));
}

/// Keeps large tensor buffers in the heap between steps instead of unmapping them; every
/// step allocates the same sizes, so fresh pages would otherwise be faulted in each time.
inline void tune_allocator() {
#if defined(__GLIBC__)
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
}

inline TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, const std::vector<SamplePair>& data,
                         const std::vector<SamplePair>& val, const EpochCallback& on_epoch = {}) {
    model_cfg.validate();
    cfg.validate();
    tune_allocator();
    if (data.size() < 2) throw std::invalid_argument("train: need at least 2 training samples");
    check_sizes(model_cfg, data, "training");
    check_sizes(model_cfg, val, "validation");

    Model model = Model::build(model_cfg, cfg.seed);
    TrainResult result{model, model, {}, {}};
    AdamState adam;
    const std::size_t per_epoch = steps_per_epoch(data.size(), cfg.batch_size);
    const std::size_t total = per_epoch * cfg.epochs;
    const std::size_t warmup = per_epoch * cfg.warmup_epochs;
    std::size_t step = 0;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto started = std::chrono::steady_clock::now();
        std::vector<std::size_t> order(data.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffler(derive_seed(cfg.seed, 0x73687566ULL, epoch));
        shuffler.shuffle(order);

        double loss_sum = 0.0, dsc_sum = 0.0, lr = 0.0;
        std::size_t batches = 0, seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                         order.begin() + static_cast<long>(std::min(order.size(), start + cfg.batch_size)));
            if (idx.size() < 2) continue;
            const Tensor images = stack_samples(data, idx, false);
            const Tensor masks = stack_samples(data, idx, true);
            lr = lr_at(step, total, warmup, cfg.lr, cfg.lr_floor);

            Tape tape;
            Rng drop_rng(derive_seed(cfg.seed, 0x64726f70ULL, step));
            Context ctx(tape, model.params(), true, &drop_rng);
            Var probs = model.forward(ctx, tape.constant(images));
            Var loss = bce_dice_loss(probs, masks, cfg.loss);
            const double value = loss.value()[0];
            if (!std::isfinite(value)) {
                std::ostringstream msg;
                msg << "non-finite loss at epoch " << epoch << ", step " << step << " (lr " << lr << "); recent losses:";
                const std::size_t from = result.log.step_losses.size() > 5 ? result.log.step_losses.size() - 5 : 0;
                for (std::size_t i = from; i < result.log.step_losses.size(); ++i) msg << ' ' << result.log.step_losses[i];
                throw NumericalError(msg.str());
            }
            tape.backward(loss);
            adam_step(model.params(), ctx.gradients(), adam, lr);
            for (const auto& e : model.params().entries())
                if (!e.value.all_finite())
                    throw NumericalError("parameter " + e.name + " became non-finite at step " + std::to_string(step) +
                                         " (lr " + std::to_string(lr) + ")");

            const MetricReport batch_report = MetricReport::from_batch(probs.value(), masks);
            dsc_sum += batch_report.dsc * static_cast<double>(idx.size());
            seen += idx.size();
            loss_sum += value;
            result.log.step_losses.push_back(value);
            ++batches;
            ++step;
        }

        TrainLogRecord rec;
        rec.epoch = epoch;
        rec.step = step;
        rec.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        rec.lr = lr;
        rec.train_dsc = seen ? dsc_sum / static_cast<double>(seen) : 0.0;
        if (!val.empty()) {
            rec.val = evaluate(model, val, cfg.eval_batch);
            if (rec.val->dsc > result.log.best_dsc) {
                result.log.best_dsc = rec.val->dsc;
                result.log.best_epoch = epoch;
                result.best = model;
            }
        } else {
            result.log.best_epoch = epoch;
            result.best = model;
        }
        result.log.epochs.push_back(rec);
        const double seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        result.epoch_seconds.push_back(seconds);
        if (on_epoch) on_epoch(rec, seconds);
    }
    result.last = std::move(model);
    return result;
}

/// Splits off the last round(fraction * n) samples as a validation set.
inline std::pair<std::vector<SamplePair>, std::vector<SamplePair>> split_validation(std::vector<SamplePair> data,
                                                                                     double fraction) {
    if (!(fraction >= 0.0 && fraction < 1.0)) throw std::invalid_argument("validation fraction must lie in [0, 1)");
    const auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
    std::vector<SamplePair> val(std::make_move_iterator(data.end() - static_cast<long>(n_val)),
                                std::make_move_iterator(data.end()));
    data.resize(data.size() - n_val);
    return {std::move(data), std::move(val)};
}

}  // namespace s3tu
