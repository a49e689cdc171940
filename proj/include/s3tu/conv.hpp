#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "s3tu/ops.hpp"

namespace s3tu {

struct Conv2dOptions {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t dilation = 1;
    std::size_t groups = 1;
};

namespace detail {

struct ConvGeometry {
    std::size_t n, c, h, w;      // input
    std::size_t o, kh, kw;       // weight
    std::size_t oh, ow;          // output
    std::size_t groups, cg, og;  // per-group channels
    std::size_t stride, pad, dil;

    std::size_t patch() const { return cg * kh * kw; }
    std::size_t out_plane() const { return oh * ow; }
};

inline ConvGeometry conv_geometry(const Shape& x, const Shape& w, const Conv2dOptions& opt) {
    if (x.size() != 4 || w.size() != 4)
        throw ShapeError("conv2d: expected NCHW input and OIHW weight, got " + to_string(x) + " and " + to_string(w));
    if (opt.stride == 0 || opt.dilation == 0 || opt.groups == 0) throw ShapeError("conv2d: zero stride/dilation/groups");
    ConvGeometry g{};
    g.n = x[0];
    g.c = x[1];
    g.h = x[2];
    g.w = x[3];
    g.o = w[0];
    g.kh = w[2];
    g.kw = w[3];
    g.groups = opt.groups;
    g.stride = opt.stride;
    g.pad = opt.pad;
    g.dil = opt.dilation;
    if (g.c % g.groups != 0 || g.o % g.groups != 0)
        throw ShapeError("conv2d: channels " + std::to_string(g.c) + "->" + std::to_string(g.o) +
                         " not divisible by groups " + std::to_string(g.groups));
    g.cg = g.c / g.groups;
    g.og = g.o / g.groups;
    if (w[1] != g.cg)
        throw ShapeError("conv2d: weight " + to_string(w) + " expects " + std::to_string(w[1]) +
                         " channels per group, input " + to_string(x) + " provides " + std::to_string(g.cg));
    const std::size_t eff_h = g.dil * (g.kh - 1) + 1;
    const std::size_t eff_w = g.dil * (g.kw - 1) + 1;
    if (g.h + 2 * g.pad < eff_h || g.w + 2 * g.pad < eff_w)
        throw ShapeError("conv2d: kernel " + to_string(w) + " (dilation " + std::to_string(g.dil) +
                         ") does not fit padded input " + to_string(x));
    g.oh = (g.h + 2 * g.pad - eff_h) / g.stride + 1;
    g.ow = (g.w + 2 * g.pad - eff_w) / g.stride + 1;
    return g;
}

/// Unfolds one group of one sample into a [cg*kh*kw, oh*ow] row-major matrix.
inline void im2col(const double* x, const ConvGeometry& g, double* cols) {
    const std::size_t plane = g.out_plane();
    for (std::size_t c = 0; c < g.cg; ++c) {
        const double* xc = x + c * g.h * g.w;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                double* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const long ih = static_cast<long>(oi * g.stride + ki * g.dil) - static_cast<long>(g.pad);
                    double* dst = row + oi * g.ow;
                    if (ih < 0 || ih >= static_cast<long>(g.h)) {
                        std::fill_n(dst, g.ow, 0.0);
                        continue;
                    }
                    const double* src = xc + static_cast<std::size_t>(ih) * g.w;
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const long iw = static_cast<long>(oj * g.stride + kj * g.dil) - static_cast<long>(g.pad);
                        dst[oj] = (iw < 0 || iw >= static_cast<long>(g.w)) ? 0.0 : src[iw];
                    }
                }
            }
        }
    }
}

inline void col2im_add(const double* cols, const ConvGeometry& g, double* x) {
    const std::size_t plane = g.out_plane();
    for (std::size_t c = 0; c < g.cg; ++c) {
        double* xc = x + c * g.h * g.w;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
                const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * plane;
                for (std::size_t oi = 0; oi < g.oh; ++oi) {
                    const long ih = static_cast<long>(oi * g.stride + ki * g.dil) - static_cast<long>(g.pad);
                    if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
                    double* dst = xc + static_cast<std::size_t>(ih) * g.w;
                    const double* src = row + oi * g.ow;
                    for (std::size_t oj = 0; oj < g.ow; ++oj) {
                        const long iw = static_cast<long>(oj * g.stride + kj * g.dil) - static_cast<long>(g.pad);
                        if (iw >= 0 && iw < static_cast<long>(g.w)) dst[iw] += src[oj];
                    }
                }
            }
        }
    }
}

inline bool is_pointwise(const ConvGeometry& g) {
    return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

inline bool is_depthwise(const ConvGeometry& g) { return g.groups == g.c && g.cg == 1 && g.og == 1; }

// Output columns [lo, hi) whose tap kj lands inside the input row.
inline void tap_range(const ConvGeometry& g, std::size_t kj, std::size_t& lo, std::size_t& hi) {
    const long off = static_cast<long>(kj * g.dil) - static_cast<long>(g.pad);
    const long s = static_cast<long>(g.stride);
    long first = off >= 0 ? 0 : (-off + s - 1) / s;
    long last = (static_cast<long>(g.w) - 1 - off) >= 0 ? (static_cast<long>(g.w) - 1 - off) / s + 1 : 0;
    first = std::min<long>(first, static_cast<long>(g.ow));
    last = std::clamp<long>(last, first, static_cast<long>(g.ow));
    lo = static_cast<std::size_t>(first);
    hi = static_cast<std::size_t>(last);
}

// Direct loops for one depthwise channel plane.
inline void depthwise_forward(const double* x, const double* w, const ConvGeometry& g, double* y) {
    std::fill_n(y, g.oh * g.ow, 0.0);
    for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t lo, hi;
        tap_range(g, kj, lo, hi);
        const long off = static_cast<long>(kj * g.dil) - static_cast<long>(g.pad);
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
            double* yr = y + oi * g.ow;
            for (std::size_t ki = 0; ki < g.kh; ++ki) {
                const long ih = static_cast<long>(oi * g.stride + ki * g.dil) - static_cast<long>(g.pad);
                if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
                const double wk = w[ki * g.kw + kj];
                const double* xr = x + static_cast<std::size_t>(ih) * g.w + off;
                if (g.stride == 1)
                    for (std::size_t oj = lo; oj < hi; ++oj) yr[oj] += wk * xr[oj];
                else
                    for (std::size_t oj = lo; oj < hi; ++oj) yr[oj] += wk * xr[oj * g.stride];
            }
        }
    }
}

inline void depthwise_backward(const double* x, const double* w, const double* gy, const ConvGeometry& g,
                               double* gx, double* gw) {
    for (std::size_t kj = 0; kj < g.kw; ++kj) {
        std::size_t lo, hi;
        tap_range(g, kj, lo, hi);
        const long off = static_cast<long>(kj * g.dil) - static_cast<long>(g.pad);
        for (std::size_t oi = 0; oi < g.oh; ++oi) {
            const double* gr = gy + oi * g.ow;
            for (std::size_t ki = 0; ki < g.kh; ++ki) {
                const long ih = static_cast<long>(oi * g.stride + ki * g.dil) - static_cast<long>(g.pad);
                if (ih < 0 || ih >= static_cast<long>(g.h)) continue;
                const std::size_t row = static_cast<std::size_t>(ih) * g.w;
                if (gx) {
                    const double wk = w[ki * g.kw + kj];
                    double* xr = gx + row + off;
                    if (g.stride == 1)
                        for (std::size_t oj = lo; oj < hi; ++oj) xr[oj] += gr[oj] * wk;
                    else
                        for (std::size_t oj = lo; oj < hi; ++oj) xr[oj * g.stride] += gr[oj] * wk;
                }
                if (gw) {
                    const double* xr = x + row + off;
                    double acc = 0.0;
                    if (g.stride == 1)
                        for (std::size_t oj = lo; oj < hi; ++oj) acc += gr[oj] * xr[oj];
                    else
                        for (std::size_t oj = lo; oj < hi; ++oj) acc += gr[oj] * xr[oj * g.stride];
                    gw[ki * g.kw + kj] += acc;
                }
            }
        }
    }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding. x: NCHW, w: [O, C/groups, KH, KW], bias: [O].
inline Var conv2d(const Var& x, const Var& w, std::optional<Var> bias = std::nullopt, Conv2dOptions opt = {}) {
    detail::check_same_tape(x, w, "conv2d");
    const auto g = detail::conv_geometry(x.shape(), w.shape(), opt);
    if (bias && (bias->value().rank() != 1 || bias->dim(0) != g.o))
        throw ShapeError("conv2d: bias " + to_string(bias->shape()) + " does not match " + std::to_string(g.o) +
                         " output channels");
    Tensor y(Shape{g.n, g.o, g.oh, g.ow});
    const double* px = x.value().data().data();
    const double* pw = w.value().data().data();
    double* py = y.data().data();
    const std::size_t plane = g.out_plane();
    const bool pointwise = detail::is_pointwise(g);
    const bool depthwise = detail::is_depthwise(g);
    Buffer cols(pointwise || depthwise ? 0 : g.patch() * plane);
    for (std::size_t n = 0; n < g.n; ++n) {
        for (std::size_t gr = 0; gr < g.groups; ++gr) {
            const double* xg = px + (n * g.c + gr * g.cg) * g.h * g.w;
            double* yg = py + (n * g.o + gr * g.og) * plane;
            const double* wg = pw + gr * g.og * g.patch();
            if (depthwise) {
                detail::depthwise_forward(xg, wg, g, yg);
                continue;
            }
            const double* src = xg;
            if (!pointwise) {
                detail::im2col(xg, g, cols.data());
                src = cols.data();
            }
            detail::MutMap(yg, g.og, plane).noalias() =
                detail::ConstMap(wg, g.og, g.patch()) * detail::ConstMap(src, g.patch(), plane);
        }
    }
    if (bias) {
        auto b = bias->value().data();
        for (std::size_t n = 0; n < g.n; ++n)
            for (std::size_t o = 0; o < g.o; ++o) {
                double* row = py + (n * g.o + o) * plane;
                for (std::size_t i = 0; i < plane; ++i) row[i] += b[o];
            }
    }
    const std::size_t xid = x.id();
    const std::size_t wid = w.id();
    const std::optional<std::size_t> bid = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return x.tape().record(std::move(y), inputs, [=](Tape& t, const Tensor& gy_t) {
        const double* px2 = t.value(xid).data().data();
        const double* pw2 = t.value(wid).data().data();
        const double* pgy = gy_t.data().data();
        const bool need_x = t.requires_grad(xid);
        const bool need_w = t.requires_grad(wid);
        Tensor gx = need_x ? Tensor(t.value(xid).shape()) : Tensor{};
        Tensor gw = need_w ? Tensor(t.value(wid).shape()) : Tensor{};
        Buffer work(pointwise || depthwise ? 0 : g.patch() * plane);
        Buffer gcols(need_x && !pointwise && !depthwise ? g.patch() * plane : 0);
        for (std::size_t n = 0; n < g.n; ++n) {
            for (std::size_t gr = 0; gr < g.groups; ++gr) {
                const double* xg = px2 + (n * g.c + gr * g.cg) * g.h * g.w;
                const double* gyg = pgy + (n * g.o + gr * g.og) * plane;
                const double* wg = pw2 + gr * g.og * g.patch();
                double* gxg = need_x ? gx.data().data() + (n * g.c + gr * g.cg) * g.h * g.w : nullptr;
                double* gwg = need_w ? gw.data().data() + gr * g.og * g.patch() : nullptr;
                if (depthwise) {
                    detail::depthwise_backward(xg, wg, gyg, g, gxg, gwg);
                    continue;
                }
                detail::ConstMap GY(gyg, g.og, plane);
                const double* src = xg;
                if (!pointwise && need_w) {
                    detail::im2col(xg, g, work.data());
                    src = work.data();
                }
                if (need_w) detail::MutMap(gwg, g.og, g.patch()).noalias() += GY * detail::ConstMap(src, g.patch(), plane).transpose();
                if (need_x) {
                    detail::ConstMap W(wg, g.og, g.patch());
                    if (pointwise) {
                        detail::MutMap(gxg, g.patch(), plane).noalias() += W.transpose() * GY;
                    } else {
                        detail::MutMap(gcols.data(), g.patch(), plane).noalias() = W.transpose() * GY;
                        detail::col2im_add(gcols.data(), g, gxg);
                    }
                }
            }
        }
        if (need_x) t.accumulate(xid, std::move(gx));
        if (need_w) t.accumulate(wid, std::move(gw));
        if (bid && t.requires_grad(*bid)) {
            Tensor gb(Shape{g.o});
            for (std::size_t n = 0; n < g.n; ++n)
                for (std::size_t o = 0; o < g.o; ++o) {
                    const double* row = pgy + (n * g.o + o) * plane;
                    double acc = 0.0;
                    for (std::size_t i = 0; i < plane; ++i) acc += row[i];
                    gb[o] += acc;
                }
            t.accumulate(*bid, std::move(gb));
        }
    });
}

/// 2x2 transposed convolution with stride 2. x: [N, Cin, H, W], w: [Cin, Cout, 2, 2], bias: [Cout].
/// Output is [N, Cout, 2H, 2W].
inline Var conv_transpose2x2(const Var& x, const Var& w, std::optional<Var> bias = std::nullopt) {
    detail::check_same_tape(x, w, "conv_transpose2x2");
    const Shape& xs = x.shape();
    const Shape& ws = w.shape();
    if (xs.size() != 4 || ws.size() != 4 || ws[0] != xs[1] || ws[2] != 2 || ws[3] != 2)
        throw ShapeError("conv_transpose2x2: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
    const std::size_t n = xs[0], cin = xs[1], h = xs[2], wd = xs[3], cout = ws[1];
    if (bias && (bias->value().rank() != 1 || bias->dim(0) != cout))
        throw ShapeError("conv_transpose2x2: bias " + to_string(bias->shape()) + " does not match " +
                         std::to_string(cout) + " output channels");
    const std::size_t plane = h * wd;
    const std::size_t rows = cout * 4;
    Tensor y(Shape{n, cout, 2 * h, 2 * wd});
    Buffer tmp(rows * plane);
    const double* px = x.value().data().data();
    const double* pw = w.value().data().data();
    double* py = y.data().data();
    for (std::size_t s = 0; s < n; ++s) {
        detail::MutMap(tmp.data(), rows, plane).noalias() =
            detail::ConstMap(pw, cin, rows).transpose() * detail::ConstMap(px + s * cin * plane, cin, plane);
        for (std::size_t o = 0; o < cout; ++o) {
            const double b = bias ? bias->value()[o] : 0.0;
            double* yo = py + (s * cout + o) * 4 * plane;
            for (std::size_t a = 0; a < 2; ++a)
                for (std::size_t c = 0; c < 2; ++c) {
                    const double* src = tmp.data() + (o * 4 + a * 2 + c) * plane;
                    for (std::size_t i = 0; i < h; ++i)
                        for (std::size_t j = 0; j < wd; ++j)
                            yo[(2 * i + a) * 2 * wd + 2 * j + c] = src[i * wd + j] + b;
                }
        }
    }
    const std::size_t xid = x.id();
    const std::size_t wid = w.id();
    const std::optional<std::size_t> bid = bias ? std::optional<std::size_t>(bias->id()) : std::nullopt;
    std::vector<Var> inputs{x, w};
    if (bias) inputs.push_back(*bias);
    return x.tape().record(std::move(y), inputs, [=](Tape& t, const Tensor& gy) {
        const bool need_x = t.requires_grad(xid);
        const bool need_w = t.requires_grad(wid);
        Tensor gx = need_x ? Tensor(t.value(xid).shape()) : Tensor{};
        Tensor gw = need_w ? Tensor(t.value(wid).shape()) : Tensor{};
        Tensor gb(Shape{cout});
        Buffer gtmp(rows * plane);
        const double* px2 = t.value(xid).data().data();
        const double* pw2 = t.value(wid).data().data();
        const double* pg = gy.data().data();
        for (std::size_t s = 0; s < n; ++s) {
            for (std::size_t o = 0; o < cout; ++o) {
                const double* go = pg + (s * cout + o) * 4 * plane;
                for (std::size_t a = 0; a < 2; ++a)
                    for (std::size_t c = 0; c < 2; ++c) {
                        double* dst = gtmp.data() + (o * 4 + a * 2 + c) * plane;
                        for (std::size_t i = 0; i < h; ++i)
                            for (std::size_t j = 0; j < wd; ++j) {
                                const double v = go[(2 * i + a) * 2 * wd + 2 * j + c];
                                dst[i * wd + j] = v;
                                gb[o] += v;
                            }
                    }
            }
            detail::ConstMap G(gtmp.data(), rows, plane);
            if (need_x)
                detail::MutMap(gx.data().data() + s * cin * plane, cin, plane).noalias() =
                    detail::ConstMap(pw2, cin, rows) * G;
            if (need_w)
                detail::MutMap(gw.data().data(), cin, rows).noalias() +=
                    detail::ConstMap(px2 + s * cin * plane, cin, plane) * G.transpose();
        }
        if (need_x) t.accumulate(xid, std::move(gx));
        if (need_w) t.accumulate(wid, std::move(gw));
        if (bid) t.accumulate(*bid, std::move(gb));
    });
}

/// 2x2 max pooling, stride 2. Ties resolve to the first element in row-major order.
inline Var maxpool2x2(const Var& x) {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0)
        throw ShapeError("maxpool2x2: needs NCHW with even H and W, got " + to_string(s));
    const std::size_t planes = s[0] * s[1], h = s[2], w = s[3], oh = h / 2, ow = w / 2;
    Tensor y(Shape{s[0], s[1], oh, ow});
    auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.numel());
    auto xs = x.value().data();
    auto ys = y.data();
    for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < oh; ++i) {
            for (std::size_t j = 0; j < ow; ++j) {
                std::size_t best = p * h * w + 2 * i * w + 2 * j;
                for (std::size_t a = 0; a < 2; ++a)
                    for (std::size_t b = 0; b < 2; ++b) {
                        const std::size_t at = p * h * w + (2 * i + a) * w + 2 * j + b;
                        if (xs[at] > xs[best]) best = at;
                    }
                const std::size_t o = (p * oh + i) * ow + j;
                ys[o] = xs[best];
                (*argmax)[o] = static_cast<std::uint32_t>(best);
            }
        }
    }
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, argmax](Tape& t, const Tensor& g) {
        Tensor gx(t.value(xid).shape());
        auto gs = g.data();
        auto out = gx.data();
        for (std::size_t o = 0; o < gs.size(); ++o) out[(*argmax)[o]] += gs[o];
        t.accumulate(xid, std::move(gx));
    });
}

}  // namespace s3tu
