#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "s3tu/autodiff.hpp"

// Differentiable element-wise, reduction, layout and linear-algebra ops.
// Every op takes Vars on one tape and records its output plus a gradient rule.

namespace s3tu {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank, 1);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (da != db && da != 1 && db != 1)
            throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " + to_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

/// Strides of `in` laid against the (higher or equal rank) `out` shape; 0 on broadcast axes.
inline Shape broadcast_strides(const Shape& in, const Shape& out) {
    Shape strides(out.size(), 0);
    const auto own = row_major_strides(in);
    const std::size_t offset = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i)
        strides[i + offset] = in[i] == 1 ? 0 : own[i];
    return strides;
}

/// Calls f(o, ia, ib) for every linear output index o with matching operand offsets.
template <typename F>
void for_each_broadcast(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    const std::size_t rank = out.size();
    const std::size_t total = numel(out);
    if (rank == 0) {
        f(std::size_t{0}, std::size_t{0}, std::size_t{0});
        return;
    }
    const std::size_t inner = out[rank - 1];
    const std::size_t step_a = sa[rank - 1];
    const std::size_t step_b = sb[rank - 1];
    std::vector<std::size_t> idx(rank, 0);
    std::size_t ia = 0;
    std::size_t ib = 0;
    for (std::size_t o = 0; o < total; o += inner) {
        for (std::size_t j = 0; j < inner; ++j) f(o + j, ia + j * step_a, ib + j * step_b);
        for (std::size_t ax = rank - 1; ax-- > 0;) {
            ++idx[ax];
            ia += sa[ax];
            ib += sb[ax];
            if (idx[ax] < out[ax]) break;
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

inline void check_same_tape(const Var& a, const Var& b, const char* op) {
    if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

/// Gradient of a unary op given x, y and dy/dx evaluated element-wise.
template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
    const Tensor& xv = x.value();
    Tensor y(xv.shape());
    auto xs = xv.data();
    auto ys = y.data();
    for (std::size_t i = 0; i < xs.size(); ++i) ys[i] = fwd(xs[i]);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, deriv](Tape& t, const Tensor& g) {
        const Tensor& xin = t.value(xid);
        Tensor gx(xin.shape());
        auto gs = g.data();
        auto xs2 = xin.data();
        auto out = gx.data();
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = gs[i] * deriv(xs2[i]);
        t.accumulate(xid, std::move(gx));
    });
}

inline void split_axis(const Shape& shape, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
    len = shape[axis];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Element-wise binary ops with broadcasting.

enum class BinaryKind { Add, Sub, Mul, Div };

namespace detail {

template <BinaryKind K>
inline double apply(double a, double b) {
    if constexpr (K == BinaryKind::Add) return a + b;
    if constexpr (K == BinaryKind::Sub) return a - b;
    if constexpr (K == BinaryKind::Mul) return a * b;
    if constexpr (K == BinaryKind::Div) return a / b;
}

template <BinaryKind K>
inline void binary_forward(const Tensor& av, const Tensor& bv, Tensor& out) {
    auto o = out.data();
    const double* as = av.data().data();
    const double* bs = bv.data().data();
    if (av.shape() == bv.shape()) {
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = apply<K>(as[i], bs[i]);
        return;
    }
    const Shape sa = broadcast_strides(av.shape(), out.shape());
    const Shape sb = broadcast_strides(bv.shape(), out.shape());
    for_each_broadcast(out.shape(), sa, sb,
                       [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = apply<K>(as[ia], bs[ib]); });
}

template <BinaryKind K>
inline void binary_backward(const Tensor& g, const Tensor& av, const Tensor& bv, double* pa, double* pb) {
    const double* gs = g.data().data();
    const double* as = av.data().data();
    const double* bs = bv.data().data();
    auto body = [&](std::size_t i, std::size_t ia, std::size_t ib) {
        const double gi = gs[i];
        if constexpr (K == BinaryKind::Add) {
            if (pa) pa[ia] += gi;
            if (pb) pb[ib] += gi;
        } else if constexpr (K == BinaryKind::Sub) {
            if (pa) pa[ia] += gi;
            if (pb) pb[ib] -= gi;
        } else if constexpr (K == BinaryKind::Mul) {
            if (pa) pa[ia] += gi * bs[ib];
            if (pb) pb[ib] += gi * as[ia];
        } else {
            if (pa) pa[ia] += gi / bs[ib];
            if (pb) pb[ib] -= gi * as[ia] / (bs[ib] * bs[ib]);
        }
    };
    if (av.shape() == bv.shape() && av.shape() == g.shape()) {
        for (std::size_t i = 0; i < g.numel(); ++i) body(i, i, i);
        return;
    }
    for_each_broadcast(g.shape(), broadcast_strides(av.shape(), g.shape()), broadcast_strides(bv.shape(), g.shape()),
                       body);
}

template <BinaryKind K>
inline Var binary_op(const Var& a, const Var& b, const char* name) {
    check_same_tape(a, b, name);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(broadcast_shape(av.shape(), bv.shape(), name));
    binary_forward<K>(av, bv, out);
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    return a.tape().record(std::move(out), {a, b}, [aid, bid](Tape& t, const Tensor& g) {
        const Tensor& av2 = t.value(aid);
        const Tensor& bv2 = t.value(bid);
        const bool need_a = t.requires_grad(aid);
        const bool need_b = t.requires_grad(bid);
        Tensor ga = need_a ? Tensor(av2.shape()) : Tensor{};
        Tensor gb = need_b ? Tensor(bv2.shape()) : Tensor{};
        binary_backward<K>(g, av2, bv2, need_a ? ga.data().data() : nullptr, need_b ? gb.data().data() : nullptr);
        if (need_a) t.accumulate(aid, std::move(ga));
        if (need_b) t.accumulate(bid, std::move(gb));
    });
}

}  // namespace detail

inline Var binary(const Var& a, const Var& b, BinaryKind kind) {
    switch (kind) {
        case BinaryKind::Add: return detail::binary_op<BinaryKind::Add>(a, b, "add");
        case BinaryKind::Sub: return detail::binary_op<BinaryKind::Sub>(a, b, "sub");
        case BinaryKind::Mul: return detail::binary_op<BinaryKind::Mul>(a, b, "mul");
        case BinaryKind::Div: return detail::binary_op<BinaryKind::Div>(a, b, "div");
    }
    throw std::invalid_argument("binary: unknown kind");
}

inline Var add(const Var& a, const Var& b) { return binary(a, b, BinaryKind::Add); }
inline Var sub(const Var& a, const Var& b) { return binary(a, b, BinaryKind::Sub); }
inline Var mul(const Var& a, const Var& b) { return binary(a, b, BinaryKind::Mul); }
inline Var div(const Var& a, const Var& b) { return binary(a, b, BinaryKind::Div); }

/// x * c for a plain constant c.
inline Var scale(const Var& x, double c) {
    return detail::unary(x, [c](double v) { return v * c; }, [c](double) { return c; });
}

inline Var add_scalar(const Var& x, double c) {
    return detail::unary(x, [c](double v) { return v + c; }, [](double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// Activations and pointwise functions.

inline Var relu(const Var& x) {
    return detail::unary(x, [](double v) { return v > 0.0 ? v : 0.0; },
                         [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

/// Exact (erf) GELU.
inline Var gelu(const Var& x) {
    return detail::unary(
        x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
        [](double v) {
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
            return cdf + v * pdf;
        });
}

inline double sigmoid_scalar(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline Var sigmoid(const Var& x) {
    return detail::unary(x, sigmoid_scalar, [](double v) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 - s);
    });
}

inline Var exp(const Var& x) {
    return detail::unary(x, [](double v) { return std::exp(v); }, [](double v) { return std::exp(v); });
}

inline Var log(const Var& x) {
    return detail::unary(x, [](double v) { return std::log(v); }, [](double v) { return 1.0 / v; });
}

inline Var square(const Var& x) {
    return detail::unary(x, [](double v) { return v * v; }, [](double v) { return 2.0 * v; });
}

/// Clamp to [lo, hi]; gradient passes only where the input was inside the range.
inline Var clamp(const Var& x, double lo, double hi) {
    return detail::unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
                         [lo, hi](double v) { return (v >= lo && v <= hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------------------
// Layout ops.

inline Var reshape(const Var& x, Shape shape) {
    Tensor y = x.value().reshaped(std::move(shape));
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid](Tape& t, const Tensor& g) {
        t.accumulate(xid, g.reshaped(t.value(xid).shape()));
    });
}

namespace detail {

inline Tensor permute_tensor(const Tensor& x, const std::vector<std::size_t>& perm) {
    const Shape& in = x.shape();
    const std::size_t rank = in.size();
    if (perm.size() != rank) throw ShapeError("permute: permutation rank mismatch for " + to_string(in));
    std::vector<bool> seen(rank, false);
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        if (perm[i] >= rank || seen[perm[i]]) throw ShapeError("permute: invalid permutation");
        seen[perm[i]] = true;
        out[i] = in[perm[i]];
    }
    const Shape in_strides = row_major_strides(in);
    Shape src_strides(rank);
    for (std::size_t i = 0; i < rank; ++i) src_strides[i] = in_strides[perm[i]];
    Tensor y(out);
    auto ys = y.data();
    auto xs = x.data();
    const Shape zero(rank, 0);
    for_each_broadcast(out, src_strides, zero,
                       [&](std::size_t o, std::size_t src, std::size_t) { ys[o] = xs[src]; });
    return y;
}

}  // namespace detail

inline Var permute(const Var& x, std::vector<std::size_t> perm) {
    Tensor y = detail::permute_tensor(x.value(), perm);
    std::vector<std::size_t> inverse(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, inverse](Tape& t, const Tensor& g) {
        t.accumulate(xid, detail::permute_tensor(g, inverse));
    });
}

inline Var transpose(const Var& x, std::size_t a, std::size_t b) {
    std::vector<std::size_t> perm(x.value().rank());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    std::swap(perm.at(a), perm.at(b));
    return permute(x, std::move(perm));
}

/// Elements [begin, end) along axis.
inline Var slice(const Var& x, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& in = x.shape();
    if (axis >= in.size() || begin >= end || end > in[axis])
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") on axis " +
                         std::to_string(axis) + " of " + to_string(in));
    std::size_t outer, len, inner;
    detail::split_axis(in, axis, outer, len, inner);
    Shape out_shape = in;
    out_shape[axis] = end - begin;
    Tensor y(out_shape);
    const std::size_t span = (end - begin) * inner;
    auto xs = x.value().data();
    auto ys = y.data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xs.begin() + (o * len + begin) * inner, span, ys.begin() + o * span);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, outer, len, inner, begin, span](Tape& t, const Tensor& g) {
        Tensor gx(t.value(xid).shape());
        auto gs = g.data();
        auto out = gx.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(gs.begin() + o * span, span, out.begin() + (o * len + begin) * inner);
        t.accumulate(xid, std::move(gx));
    });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& first = parts[0].shape();
    if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    std::vector<std::size_t> lens;
    for (const auto& p : parts) {
        detail::check_same_tape(parts[0], p, "concat");
        const Shape& s = p.shape();
        bool ok = s.size() == first.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == first[i];
        if (!ok) throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(first));
        lens.push_back(s[axis]);
        out_shape[axis] += s[axis];
    }
    std::size_t outer, total_len, inner;
    detail::split_axis(out_shape, axis, outer, total_len, inner);
    Tensor y(out_shape);
    auto ys = y.data();
    std::size_t at = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        auto xs = parts[k].value().data();
        const std::size_t span = lens[k] * inner;
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(xs.begin() + o * span, span, ys.begin() + (o * total_len + at) * inner);
        at += lens[k];
    }
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id());
    return parts[0].tape().record(std::move(y), parts,
                                  [ids, lens, outer, total_len, inner](Tape& t, const Tensor& g) {
                                      auto gs = g.data();
                                      std::size_t at2 = 0;
                                      for (std::size_t k = 0; k < ids.size(); ++k) {
                                          const std::size_t span = lens[k] * inner;
                                          if (t.requires_grad(ids[k])) {
                                              Tensor gx(t.value(ids[k]).shape());
                                              auto out = gx.data();
                                              for (std::size_t o = 0; o < outer; ++o)
                                                  std::copy_n(gs.begin() + (o * total_len + at2) * inner, span,
                                                              out.begin() + o * span);
                                              t.accumulate(ids[k], std::move(gx));
                                          }
                                          at2 += lens[k];
                                      }
                                  });
}

/// Zero padding of the last two axes.
inline Var pad2d(const Var& x, std::size_t top, std::size_t bottom, std::size_t left, std::size_t right) {
    const Shape& in = x.shape();
    if (in.size() < 2) throw ShapeError("pad2d: needs rank >= 2, got " + to_string(in));
    const std::size_t h = in[in.size() - 2];
    const std::size_t w = in[in.size() - 1];
    const std::size_t planes = x.value().numel() / (h * w);
    Shape out_shape = in;
    const std::size_t oh = h + top + bottom;
    const std::size_t ow = w + left + right;
    out_shape[in.size() - 2] = oh;
    out_shape[in.size() - 1] = ow;
    Tensor y(out_shape);
    auto xs = x.value().data();
    auto ys = y.data();
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t r = 0; r < h; ++r)
            std::copy_n(xs.begin() + (p * h + r) * w, w, ys.begin() + (p * oh + r + top) * ow + left);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, planes, h, w, oh, ow, top, left](Tape& t, const Tensor& g) {
        Tensor gx(t.value(xid).shape());
        auto gs = g.data();
        auto out = gx.data();
        for (std::size_t p = 0; p < planes; ++p)
            for (std::size_t r = 0; r < h; ++r)
                std::copy_n(gs.begin() + (p * oh + r + top) * ow + left, w, out.begin() + (p * h + r) * w);
        t.accumulate(xid, std::move(gx));
    });
}

/// out.data[i] = x.data[index[i]]; the backward pass scatter-adds.
inline Var gather(const Var& x, std::shared_ptr<const std::vector<std::size_t>> index, Shape out_shape) {
    if (numel(out_shape) != index->size()) throw ShapeError("gather: index count does not match output shape");
    auto xs = x.value().data();
    Tensor y(std::move(out_shape));
    auto ys = y.data();
    for (std::size_t i = 0; i < ys.size(); ++i) {
        const std::size_t src = (*index)[i];
        if (src >= xs.size()) throw ShapeError("gather: index out of range");
        ys[i] = xs[src];
    }
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, index](Tape& t, const Tensor& g) {
        Tensor gx(t.value(xid).shape());
        auto gs = g.data();
        auto out = gx.data();
        for (std::size_t i = 0; i < gs.size(); ++i) out[(*index)[i]] += gs[i];
        t.accumulate(xid, std::move(gx));
    });
}

// ---------------------------------------------------------------------------
// Reductions.

/// Sum over the listed axes. With keepdim the reduced axes stay as size 1.
inline Var sum(const Var& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
    const Shape& in = x.shape();
    Shape kept = in;
    for (auto a : axes) {
        if (a >= in.size()) throw ShapeError("sum: axis " + std::to_string(a) + " out of range for " + to_string(in));
        kept[a] = 1;
    }
    Shape out_shape;
    if (keepdim) {
        out_shape = kept;
    } else {
        for (std::size_t i = 0; i < in.size(); ++i)
            if (std::find(axes.begin(), axes.end(), i) == axes.end()) out_shape.push_back(in[i]);
        if (out_shape.empty()) out_shape = {1};
    }
    Tensor y(kept);
    const Shape so = detail::broadcast_strides(kept, in);
    const Shape si = row_major_strides(in);
    auto xs = x.value().data();
    auto ys = y.data();
    detail::for_each_broadcast(in, si, so, [&](std::size_t, std::size_t ix, std::size_t io) { ys[io] += xs[ix]; });
    y = std::move(y).reshaped(out_shape);
    const std::size_t xid = x.id();
    return x.tape().record(std::move(y), {x}, [xid, kept, so, si](Tape& t, const Tensor& g) {
        const Shape& in2 = t.value(xid).shape();
        Tensor gx(in2);
        auto gs = g.data();
        auto out = gx.data();
        detail::for_each_broadcast(in2, si, so, [&](std::size_t, std::size_t ix, std::size_t io) { out[ix] = gs[io]; });
        t.accumulate(xid, std::move(gx));
    });
}

inline Var mean(const Var& x, const std::vector<std::size_t>& axes, bool keepdim = false) {
    std::size_t count = 1;
    for (auto a : axes) count *= x.shape().at(a);
    return scale(sum(x, axes, keepdim), 1.0 / static_cast<double>(count));
}

inline Var sum_all(const Var& x) {
    std::vector<std::size_t> axes(x.value().rank());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
    return sum(x, axes, false);
}

inline Var mean_all(const Var& x) { return scale(sum_all(x), 1.0 / static_cast<double>(x.value().numel())); }

// ---------------------------------------------------------------------------
// Batched matrix product.

/// a: [..., M, K] times b: [..., K, N] with identical leading dims, or b: [K, N] shared by every batch.
inline Var matmul(const Var& a, const Var& b) {
    detail::check_same_tape(a, b, "matmul");
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) throw ShapeError("matmul: operands need rank >= 2");
    const std::size_t m = sa[sa.size() - 2];
    const std::size_t k = sa[sa.size() - 1];
    const std::size_t kb = sb[sb.size() - 2];
    const std::size_t n = sb[sb.size() - 1];
    const bool shared_b = sb.size() == 2;
    const Shape batch_a(sa.begin(), sa.end() - 2);
    const Shape batch_b(sb.begin(), sb.end() - 2);
    if (k != kb || (!shared_b && batch_a != batch_b))
        throw ShapeError("matmul: " + to_string(sa) + " x " + to_string(sb));
    const std::size_t batch = numel(batch_a);
    Shape out_shape = batch_a;
    out_shape.push_back(m);
    out_shape.push_back(n);
    Tensor y(out_shape);
    const double* pa = a.value().data().data();
    const double* pb = b.value().data().data();
    double* py = y.data().data();
    for (std::size_t i = 0; i < batch; ++i) {
        detail::ConstMap A(pa + i * m * k, m, k);
        detail::ConstMap B(pb + (shared_b ? 0 : i * k * n), k, n);
        detail::MutMap(py + i * m * n, m, n).noalias() = A * B;
    }
    const std::size_t aid = a.id();
    const std::size_t bid = b.id();
    return a.tape().record(std::move(y), {a, b}, [=](Tape& t, const Tensor& g) {
        const double* pa2 = t.value(aid).data().data();
        const double* pb2 = t.value(bid).data().data();
        const double* pg = g.data().data();
        if (t.requires_grad(aid)) {
            Tensor ga(t.value(aid).shape());
            for (std::size_t i = 0; i < batch; ++i) {
                detail::ConstMap G(pg + i * m * n, m, n);
                detail::ConstMap B(pb2 + (shared_b ? 0 : i * k * n), k, n);
                detail::MutMap(ga.data().data() + i * m * k, m, k).noalias() = G * B.transpose();
            }
            t.accumulate(aid, std::move(ga));
        }
        if (t.requires_grad(bid)) {
            Tensor gb(t.value(bid).shape());
            for (std::size_t i = 0; i < batch; ++i) {
                detail::ConstMap G(pg + i * m * n, m, n);
                detail::ConstMap A(pa2 + i * m * k, m, k);
                detail::MutMap GB(gb.data().data() + (shared_b ? 0 : i * k * n), k, n);
                GB.noalias() += A.transpose() * G;
            }
            t.accumulate(bid, std::move(gb));
        }
    });
}

// ---------------------------------------------------------------------------
// Softmax.

namespace detail {

inline Var softmax_impl(const Var& x, std::size_t axis, const Tensor* mask) {
    const Shape& in = x.shape();
    if (axis >= in.size()) throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + to_string(in));
    if (mask && mask->shape() != in) throw ShapeError("softmax: mask shape " + to_string(mask->shape()) +
                                                      " differs from input " + to_string(in));
    std::size_t outer, len, inner;
    split_axis(in, axis, outer, len, inner);
    Tensor y(in);
    auto xs = x.value().data();
    auto ys = y.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * len * inner + i;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t at = base + j * inner;
                if (!mask || (*mask)[at] != 0.0) mx = std::max(mx, xs[at]);
            }
            if (!std::isfinite(mx)) continue;  // fully masked: all zeros
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
                const std::size_t at = base + j * inner;
                const double e = (!mask || (*mask)[at] != 0.0) ? std::exp(xs[at] - mx) : 0.0;
                ys[at] = e;
                z += e;
            }
            for (std::size_t j = 0; j < len; ++j) ys[base + j * inner] /= z;
        }
    }
    const std::size_t xid = x.id();
    const std::size_t yid = x.tape().size();
    return x.tape().record(std::move(y), {x}, [xid, yid, outer, len, inner](Tape& t, const Tensor& g) {
        const Tensor& yv = t.value(yid);
        Tensor gx(yv.shape());
        auto ys2 = yv.data();
        auto gs = g.data();
        auto out = gx.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t i = 0; i < inner; ++i) {
                const std::size_t base = o * len * inner + i;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += gs[base + j * inner] * ys2[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    const std::size_t at = base + j * inner;
                    out[at] = ys2[at] * (gs[at] - dot);
                }
            }
        }
        t.accumulate(xid, std::move(gx));
    });
}

}  // namespace detail

/// Max-subtracted softmax along axis.
inline Var softmax(const Var& x, std::size_t axis) { return detail::softmax_impl(x, axis, nullptr); }

/// Softmax restricted to positions where mask != 0; masked positions output exactly 0
/// (equivalent to a -inf logit).
inline Var masked_softmax(const Var& x, std::size_t axis, const Tensor& mask) {
    return detail::softmax_impl(x, axis, &mask);
}

}  // namespace s3tu
