#pragma once

#include <cmath>
#include <memory>
#include <vector>

#include "s3tu/ops.hpp"

namespace s3tu {

inline constexpr double kNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

/// Layer normalization over the last axis. gain and bias have the size of that axis.
inline Var layernorm(const Var& x, const Var& gain, const Var& bias, double eps = kNormEps) {
    const Shape& s = x.shape();
    const std::size_t d = s.back();
    if (gain.value().numel() != d || bias.value().numel() != d)
        throw ShapeError("layernorm: gain/bias " + to_string(gain.shape()) + "/" + to_string(bias.shape()) +
                         " do not match normalized extent " + std::to_string(d));
    const std::size_t rows = x.value().numel() / d;
    Tensor y(s);
    auto xhat = std::make_shared<std::vector<double>>(x.value().numel());
    auto inv_std = std::make_shared<std::vector<double>>(rows);
    auto xs = x.value().data();
    auto gs = gain.value().data();
    auto bs = bias.value().data();
    auto ys = y.data();
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xs.data() + r * d;
        double mu = 0.0;
        for (std::size_t i = 0; i < d; ++i) mu += xr[i];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) var += (xr[i] - mu) * (xr[i] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        for (std::size_t i = 0; i < d; ++i) {
            const double xh = (xr[i] - mu) * is;
            (*xhat)[r * d + i] = xh;
            ys[r * d + i] = xh * gs[i] + bs[i];
        }
    }
    const std::size_t xid = x.id(), gid = gain.id(), bid = bias.id();
    return x.tape().record(std::move(y), {x, gain, bias}, [=](Tape& t, const Tensor& g) {
        auto gy = g.data();
        auto gn = t.value(gid).data();
        Tensor gx(t.value(xid).shape());
        Tensor ggain(t.value(gid).shape());
        Tensor gbias(t.value(bid).shape());
        auto gxs = gx.data();
        for (std::size_t r = 0; r < rows; ++r) {
            double mean_gxh = 0.0;
            double mean_gxh_xh = 0.0;
            for (std::size_t i = 0; i < d; ++i) {
                const double gxh = gy[r * d + i] * gn[i];
                const double xh = (*xhat)[r * d + i];
                mean_gxh += gxh;
                mean_gxh_xh += gxh * xh;
                ggain[i] += gy[r * d + i] * xh;
                gbias[i] += gy[r * d + i];
            }
            mean_gxh /= static_cast<double>(d);
            mean_gxh_xh /= static_cast<double>(d);
            for (std::size_t i = 0; i < d; ++i) {
                const double gxh = gy[r * d + i] * gn[i];
                gxs[r * d + i] = (*inv_std)[r] * (gxh - mean_gxh - (*xhat)[r * d + i] * mean_gxh_xh);
            }
        }
        t.accumulate(xid, std::move(gx));
        t.accumulate(gid, std::move(ggain));
        t.accumulate(bid, std::move(gbias));
    });
}

/// Running statistics owned by the model; updated in place by training-mode forward passes.
struct BatchNormStats {
    Tensor& mean;
    Tensor& var;
};

/// Batch normalization over (N, H, W) per channel of an NCHW tensor.
/// Training mode normalizes with batch statistics (biased variance) and folds them into
/// the running stats with momentum 0.1 (unbiased variance); eval mode uses the running stats.
inline Var batchnorm2d(const Var& x, const Var& gamma, const Var& beta, BatchNormStats running, bool training,
                       double eps = kNormEps, double momentum = kBatchNormMomentum) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("batchnorm2d: expected NCHW, got " + to_string(s));
    const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
    for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma.value(), &beta.value(), &running.mean, &running.var})
        if (p->numel() != c)
            throw ShapeError("batchnorm2d: parameter " + to_string(p->shape()) + " does not match " +
                             std::to_string(c) + " channels");
    if (training && n < 2)
        throw ShapeError("batchnorm2d: training mode needs a batch of at least 2, got " + std::to_string(n));
    const std::size_t count = n * plane;
    auto xs = x.value().data();
    auto gs = gamma.value().data();
    auto bs = beta.value().data();
    std::vector<double> mu(c), inv_std(c);
    if (training) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double m = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xs.data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) m += p[i];
            }
            m /= static_cast<double>(count);
            double v = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const double* p = xs.data() + (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
            }
            v /= static_cast<double>(count);
            mu[ch] = m;
            inv_std[ch] = 1.0 / std::sqrt(v + eps);
            const double unbiased = v * static_cast<double>(count) / static_cast<double>(count - 1);
            running.mean[ch] = (1.0 - momentum) * running.mean[ch] + momentum * m;
            running.var[ch] = (1.0 - momentum) * running.var[ch] + momentum * unbiased;
        }
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = running.mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(running.var[ch] + eps);
        }
    }
    Tensor y(s);
    auto ys = y.data();
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = xs.data() + (b * c + ch) * plane;
            double* q = ys.data() + (b * c + ch) * plane;
            const double a = gs[ch] * inv_std[ch];
            const double off = bs[ch] - mu[ch] * a;
            for (std::size_t i = 0; i < plane; ++i) q[i] = p[i] * a + off;
        }
    const std::size_t xid = x.id(), gid = gamma.id(), bid = beta.id();
    return x.tape().record(std::move(y), {x, gamma, beta}, [=](Tape& t, const Tensor& g) {
        auto gy = g.data();
        auto xv = t.value(xid).data();
        auto gm = t.value(gid).data();
        Tensor gx(t.value(xid).shape());
        Tensor ggamma(Shape{c});
        Tensor gbeta(Shape{c});
        auto gxs = gx.data();
        for (std::size_t ch = 0; ch < c; ++ch) {
            double sum_g = 0.0;
            double sum_g_xh = 0.0;
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t base = (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double xh = (xv[base + i] - mu[ch]) * inv_std[ch];
                    sum_g += gy[base + i];
                    sum_g_xh += gy[base + i] * xh;
                }
            }
            ggamma[ch] = sum_g_xh;
            gbeta[ch] = sum_g;
            const double a = gm[ch] * inv_std[ch];
            const double mean_g = sum_g / static_cast<double>(count);
            const double mean_g_xh = sum_g_xh / static_cast<double>(count);
            for (std::size_t b = 0; b < n; ++b) {
                const std::size_t base = (b * c + ch) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    if (training) {
                        const double xh = (xv[base + i] - mu[ch]) * inv_std[ch];
                        gxs[base + i] = a * (gy[base + i] - mean_g - xh * mean_g_xh);
                    } else {
                        gxs[base + i] = a * gy[base + i];
                    }
                }
            }
        }
        t.accumulate(xid, std::move(gx));
        t.accumulate(gid, std::move(ggamma));
        t.accumulate(bid, std::move(gbeta));
    });
}

}  // namespace s3tu
