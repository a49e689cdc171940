#pragma once

// Naive reference implementations used as test oracles. Written directly from the
// defining formulas with plain loops; they share nothing with the library kernels
// beyond the Tensor container.

#include <cmath>
#include <numbers>
#include <vector>

#include "s3tu/s3tu.hpp"

namespace oracle {

using s3tu::Rng;
using s3tu::Shape;
using s3tu::Tensor;

inline Tensor random(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(shape);
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// a: [M, K], b: [K, N]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor y(Shape{m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a.at({i, p}) * b.at({p, j});
            y.at({i, j}) = s;
        }
    return y;
}

struct ConvSpec {
    std::size_t stride = 1, pad = 0, dil = 1, groups = 1;
};

inline std::size_t conv_out(std::size_t in, std::size_t k, const ConvSpec& s) {
    return (in + 2 * s.pad - s.dil * (k - 1) - 1) / s.stride + 1;
}

// x: [N, C, H, W], w: [O, C/groups, KH, KW], bias [O] or empty.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& s) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::size_t og = o / s.groups;
    const std::size_t oh = conv_out(h, kh, s), ow = conv_out(wd, kw, s);
    Tensor y(Shape{n, o, oh, ow});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc) {
            const std::size_t g = oc / og;
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j) {
                    double acc = bias ? (*bias)[oc] : 0.0;
                    for (std::size_t ci = 0; ci < cg; ++ci)
                        for (std::size_t a = 0; a < kh; ++a)
                            for (std::size_t bb = 0; bb < kw; ++bb) {
                                const long ii = static_cast<long>(i * s.stride + a * s.dil) - static_cast<long>(s.pad);
                                const long jj = static_cast<long>(j * s.stride + bb * s.dil) - static_cast<long>(s.pad);
                                if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(wd)) continue;
                                acc += w.at({oc, ci, a, bb}) *
                                       x.at({b, g * cg + ci, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)});
                            }
                    y.at({b, oc, i, j}) = acc;
                }
        }
    (void)c;
    return y;
}

// Adjoint of conv2d: gradients for sum(y * r).
inline void conv2d_grads(const Tensor& x, const Tensor& w, const Tensor& r, const ConvSpec& s, Tensor& gx, Tensor& gw) {
    const std::size_t n = x.dim(0), h = x.dim(2), wd = x.dim(3);
    const std::size_t o = w.dim(0), cg = w.dim(1), kh = w.dim(2), kw = w.dim(3);
    const std::size_t og = o / s.groups;
    const std::size_t oh = r.dim(2), ow = r.dim(3);
    gx = Tensor(x.shape());
    gw = Tensor(w.shape());
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t oc = 0; oc < o; ++oc)
            for (std::size_t i = 0; i < oh; ++i)
                for (std::size_t j = 0; j < ow; ++j)
                    for (std::size_t ci = 0; ci < cg; ++ci)
                        for (std::size_t a = 0; a < kh; ++a)
                            for (std::size_t bb = 0; bb < kw; ++bb) {
                                const long ii = static_cast<long>(i * s.stride + a * s.dil) - static_cast<long>(s.pad);
                                const long jj = static_cast<long>(j * s.stride + bb * s.dil) - static_cast<long>(s.pad);
                                if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(wd)) continue;
                                const std::size_t c = (oc / og) * cg + ci;
                                const double g = r.at({b, oc, i, j});
                                gx.at({b, c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)}) += g * w.at({oc, ci, a, bb});
                                gw.at({oc, ci, a, bb}) += g * x.at({b, c, static_cast<std::size_t>(ii), static_cast<std::size_t>(jj)});
                            }
}

// x: [N, Cin, H, W], w: [Cin, Cout, 2, 2] -> [N, Cout, 2H, 2W]
inline Tensor conv_transpose2x2(const Tensor& x, const Tensor& w, const Tensor& bias) {
    const std::size_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3), cout = w.dim(1);
    Tensor y(Shape{n, cout, 2 * h, 2 * wd});
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t i = 0; i < 2 * h; ++i)
                for (std::size_t j = 0; j < 2 * wd; ++j) {
                    double acc = bias[o];
                    for (std::size_t c = 0; c < cin; ++c) acc += x.at({b, c, i / 2, j / 2}) * w.at({c, o, i % 2, j % 2});
                    y.at({b, o, i, j}) = acc;
                }
    return y;
}

struct BatchNormResult {
    Tensor y, running_mean, running_var;
};

inline BatchNormResult batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& rm,
                                       const Tensor& rv, double eps, double momentum) {
    const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const double count = static_cast<double>(n * h * w);
    BatchNormResult out{Tensor(x.shape()), rm, rv};
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mu = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) mu += x.at({b, ch, i, j});
        mu /= count;
        double var = 0.0;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) var += (x.at({b, ch, i, j}) - mu) * (x.at({b, ch, i, j}) - mu);
        const double unbiased = var / (count - 1.0);
        var /= count;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    out.y.at({b, ch, i, j}) = gamma[ch] * (x.at({b, ch, i, j}) - mu) / std::sqrt(var + eps) + beta[ch];
        out.running_mean[ch] = (1.0 - momentum) * rm[ch] + momentum * mu;
        out.running_var[ch] = (1.0 - momentum) * rv[ch] + momentum * unbiased;
    }
    return out;
}

inline Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta, const Tensor& rm,
                             const Tensor& rv, double eps) {
    Tensor y(x.shape());
    for (std::size_t b = 0; b < x.dim(0); ++b)
        for (std::size_t ch = 0; ch < x.dim(1); ++ch)
            for (std::size_t i = 0; i < x.dim(2); ++i)
                for (std::size_t j = 0; j < x.dim(3); ++j)
                    y.at({b, ch, i, j}) = gamma[ch] * (x.at({b, ch, i, j}) - rm[ch]) / std::sqrt(rv[ch] + eps) + beta[ch];
    return y;
}

// Layer norm over the last axis of a [R, D] tensor.
inline Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const std::size_t r = x.dim(0), d = x.dim(1);
    Tensor y(x.shape());
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0, var = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += x.at({i, j});
        mu /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) var += (x.at({i, j}) - mu) * (x.at({i, j}) - mu);
        var /= static_cast<double>(d);
        for (std::size_t j = 0; j < d; ++j) y.at({i, j}) = gain[j] * (x.at({i, j}) - mu) / std::sqrt(var + eps) + bias[j];
    }
    return y;
}

// Association: q[i][j] = exp(x_i.s_j / sqrt(C)) / sum over allowed j'. x: [n, C], s: [m, C].
inline Tensor association(const Tensor& x, const Tensor& s, const Tensor* allowed) {
    const std::size_t n = x.dim(0), m = s.dim(0), c = x.dim(1);
    Tensor q(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> logit(m, -INFINITY);
        double mx = -INFINITY;
        for (std::size_t j = 0; j < m; ++j) {
            if (allowed && allowed->at({i, j}) == 0.0) continue;
            double d = 0.0;
            for (std::size_t k = 0; k < c; ++k) d += x.at({i, k}) * s.at({j, k});
            logit[j] = d / std::sqrt(static_cast<double>(c));
            mx = std::max(mx, logit[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j)
            if (std::isfinite(logit[j])) z += std::exp(logit[j] - mx);
        for (std::size_t j = 0; j < m; ++j) q.at({i, j}) = std::isfinite(logit[j]) ? std::exp(logit[j] - mx) / z : 0.0;
    }
    return q;
}

// Super-token update: s_j = sum_i q_ij x_i / sum_i q_ij.
inline Tensor supertoken_update(const Tensor& q, const Tensor& x) {
    const std::size_t n = q.dim(0), m = q.dim(1), c = x.dim(1);
    Tensor s(Shape{m, c});
    for (std::size_t j = 0; j < m; ++j) {
        double mass = 0.0;
        for (std::size_t i = 0; i < n; ++i) mass += q.at({i, j});
        for (std::size_t k = 0; k < c; ++k) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) acc += q.at({i, j}) * x.at({i, k});
            s.at({j, k}) = acc / mass;
        }
    }
    return s;
}

inline double gelu(double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); }

// Split attention for one sample. parts: k tensors [n, C]; w1 [C, C/2], b1, w2 [C/2, kC], b2.
inline Tensor split_attention(const std::vector<Tensor>& parts, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                              const Tensor& b2) {
    const std::size_t k = parts.size(), n = parts[0].dim(0), c = parts[0].dim(1), hid = w1.dim(1);
    std::vector<double> a(c, 0.0);
    for (const auto& p : parts)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) a[ch] += p.at({i, ch});
    for (auto& v : a) v /= static_cast<double>(k * n);
    std::vector<double> z(hid);
    for (std::size_t j = 0; j < hid; ++j) {
        double s = b1[j];
        for (std::size_t ch = 0; ch < c; ++ch) s += a[ch] * w1.at({ch, j});
        z[j] = gelu(s);
    }
    std::vector<double> ahat(k * c);
    for (std::size_t j = 0; j < k * c; ++j) {
        double s = b2[j];
        for (std::size_t h = 0; h < hid; ++h) s += z[h] * w2.at({h, j});
        ahat[j] = s;
    }
    Tensor out(Shape{n, c});
    for (std::size_t ch = 0; ch < c; ++ch) {
        double mx = -INFINITY, zsum = 0.0;
        for (std::size_t b = 0; b < k; ++b) mx = std::max(mx, ahat[b * c + ch]);
        for (std::size_t b = 0; b < k; ++b) zsum += std::exp(ahat[b * c + ch] - mx);
        for (std::size_t b = 0; b < k; ++b) {
            const double wgt = std::exp(ahat[b * c + ch] - mx) / zsum;
            for (std::size_t i = 0; i < n; ++i) out.at({i, ch}) += wgt * parts[b].at({i, ch});
        }
    }
    return out;
}

// Slice-overwrite spatial shift on [N, H, W, C]. For each quarter: copy the tensor, then
// overwrite the destination slice with the source slice along the given axis.
// axis 1 = H, axis 2 = W; forward = true means dst[:-1] = src[1:].
inline Tensor shift(const Tensor& x, bool ss2) {
    const std::size_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    struct Q { std::size_t axis; bool forward; };
    const Q ss1_q[4] = {{2, true}, {2, false}, {1, true}, {1, false}};
    const Q ss2_q[4] = {{1, true}, {1, false}, {2, true}, {2, false}};
    Tensor y = x;
    for (std::size_t q = 0; q < 4; ++q) {
        const Q spec = ss2 ? ss2_q[q] : ss1_q[q];
        const std::size_t c0 = q * c / 4, c1 = (q + 1) * c / 4;
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j)
                    for (std::size_t ch = c0; ch < c1; ++ch) {
                        std::size_t si = i, sj = j;
                        if (spec.axis == 2) {
                            if (spec.forward && j + 1 < w) sj = j + 1;
                            if (!spec.forward && j > 0) sj = j - 1;
                        } else {
                            if (spec.forward && i + 1 < h) si = i + 1;
                            if (!spec.forward && i > 0) si = i - 1;
                        }
                        y.at({b, i, j, ch}) = x.at({b, si, sj, ch});
                    }
    }
    return y;
}

struct Counts {
    double tp = 0, fp = 0, fn = 0, tn = 0;
};

inline Counts counts(const Tensor& p, const Tensor& g) {
    Counts c;
    for (std::size_t i = 0; i < p.numel(); ++i) {
        const bool a = p[i] >= 0.5, b = g[i] >= 0.5;
        c.tp += a && b;
        c.fp += a && !b;
        c.fn += !a && b;
        c.tn += !a && !b;
    }
    return c;
}

}  // namespace oracle
