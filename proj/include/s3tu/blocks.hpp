#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "s3tu/layers.hpp"

// Structured convolution vocabulary: DropBlock, large-kernel attention, the scalable
// ReLU, and the two composite blocks built from them (DWF-Conv and D2BR-Conv).

namespace s3tu {

// ---------------------------------------------------------------------------
// DropBlock

struct DropBlockParams {
    std::size_t block_size = 7;
    double drop_prob = 0.1;
};

/// Per-position Bernoulli rate for block seeds so that the expected dropped fraction is
/// drop_prob when seeds are restricted to positions where a whole block fits.
inline double dropblock_seed_rate(const DropBlockParams& p, std::size_t h, std::size_t w) {
    const double bs = static_cast<double>(p.block_size);
    const double valid = static_cast<double>((h - p.block_size + 1) * (w - p.block_size + 1));
    return p.drop_prob / (bs * bs) * static_cast<double>(h * w) / valid;
}

inline void check_dropblock(const DropBlockParams& p, std::size_t h, std::size_t w) {
    if (p.block_size == 0 || p.block_size % 2 == 0)
        throw std::invalid_argument("dropblock: block_size must be a positive odd number, got " +
                                    std::to_string(p.block_size));
    if (!(p.drop_prob >= 0.0 && p.drop_prob < 1.0))
        throw std::invalid_argument("dropblock: drop_prob must lie in [0, 1)");
    if (p.block_size > std::min(h, w))
        throw ShapeError("dropblock: block_size " + std::to_string(p.block_size) + " exceeds feature map " +
                         std::to_string(h) + "x" + std::to_string(w));
}

/// Keep-mask (1 kept, 0 dropped) for an NCHW shape. Seeds mark the top-left corner of a
/// block_size x block_size square and are drawn independently per (n, c) plane from the
/// positions where the square fits entirely.
inline Tensor dropblock_mask(const Shape& shape, const DropBlockParams& p, Rng& rng) {
    const std::size_t planes = shape[0] * shape[1], h = shape[2], w = shape[3];
    check_dropblock(p, h, w);
    const double gamma = dropblock_seed_rate(p, h, w);
    Tensor mask(shape, 1.0);
    auto m = mask.data();
    const std::size_t bs = p.block_size;
    for (std::size_t pl = 0; pl < planes; ++pl) {
        double* plane = m.data() + pl * h * w;
        for (std::size_t i = 0; i + bs <= h; ++i)
            for (std::size_t j = 0; j + bs <= w; ++j) {
                if (!rng.bernoulli(gamma)) continue;
                for (std::size_t a = 0; a < bs; ++a) std::fill_n(plane + (i + a) * w + j, bs, 0.0);
            }
    }
    return mask;
}

/// Identity in eval mode or with drop_prob 0; otherwise zeroes sampled squares and rescales
/// survivors by (element count / kept count) over the whole tensor.
inline Var dropblock(const Var& x, const DropBlockParams& p, bool training, Rng* rng) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("dropblock: expected NCHW, got " + to_string(s));
    check_dropblock(p, s[2], s[3]);
    if (!training || p.drop_prob == 0.0) return x;
    if (!rng) throw std::invalid_argument("dropblock: training mode needs a generator");
    Tensor mask = dropblock_mask(s, p, *rng);
    double kept = 0.0;
    for (double v : mask.data()) kept += v;
    const double factor = kept > 0.0 ? static_cast<double>(mask.numel()) / kept : 0.0;
    for (auto& v : mask.data()) v *= factor;
    return mul(x, x.tape().constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Scalable ReLU: out[n,c,h,w] = scale[c] * max(0, x[n,c,h,w]).

inline constexpr double kReluScaleFloor = 1e-3;

inline Var scalable_relu(const Var& x, const Var& scale) {
    const Shape& s = x.shape();
    if (s.size() != 4 || scale.value().numel() != s[1])
        throw ShapeError("scalable_relu: scale " + to_string(scale.shape()) + " does not match input " + to_string(s));
    return mul(relu(x), reshape(scale, {1, s[1], 1, 1}));
}

// ---------------------------------------------------------------------------
// Large kernel attention: attn = PW1x1(DW7x7 dilation 3 (DW5x5(x))); out = x * attn.

struct LkaLayer {
    std::string name;
    std::size_t channels = 0;

    ConvLayer depthwise() const { return {name + ".dw", channels, channels, 5, {1, 2, 1, channels}, true}; }
    ConvLayer dilated() const { return {name + ".dwd", channels, channels, 7, {1, 9, 3, channels}, true}; }
    ConvLayer pointwise() const { return conv1x1(name + ".pw", channels, channels); }

    void declare(ParamStore& store, Rng& rng) const {
        depthwise().declare(store, rng);
        dilated().declare(store, rng);
        pointwise().declare(store, rng);
    }

    Var operator()(Context& ctx, const Var& x) const {
        Var attn = pointwise()(ctx, dilated()(ctx, depthwise()(ctx, x)));
        return mul(x, attn);
    }

    std::size_t param_count() const {
        return depthwise().param_count() + dilated().param_count() + pointwise().param_count();
    }
};

// ---------------------------------------------------------------------------
// DWF-Conv: [conv3x3 -> BN -> scalable ReLU -> LKA] x 2.

struct DwfConv {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t lka_repeats = 1;

    ConvLayer conv(int k) const { return conv3x3(name + ".conv" + std::to_string(k), k == 1 ? in : out, out); }
    BatchNormLayer bn(int k) const { return {name + ".bn" + std::to_string(k), out}; }
    std::string scale_name(int k) const { return name + ".relu" + std::to_string(k) + ".scale"; }
    LkaLayer lka(int k, std::size_t r) const {
        std::string n = name + ".lka" + std::to_string(k);
        if (r > 0) n += "_" + std::to_string(r + 1);
        return {n, out};
    }

    void declare(ParamStore& store, Rng& rng) const {
        for (int k = 1; k <= 2; ++k) {
            conv(k).declare(store, rng);
            bn(k).declare(store, rng);
            store.declare(scale_name(k), Tensor::ones({out}), true, kReluScaleFloor);
            for (std::size_t r = 0; r < lka_repeats; ++r) lka(k, r).declare(store, rng);
        }
    }

    Var operator()(Context& ctx, Var x) const {
        if (x.shape().size() != 4 || x.dim(1) != in)
            throw ShapeError("DWF-Conv " + name + ": expected " + std::to_string(in) + " input channels, got " +
                             to_string(x.shape()));
        for (int k = 1; k <= 2; ++k) {
            x = conv(k)(ctx, x);
            x = bn(k)(ctx, x);
            x = scalable_relu(x, ctx.param(scale_name(k)));
            for (std::size_t r = 0; r < lka_repeats; ++r) x = lka(k, r)(ctx, x);
        }
        return x;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (int k = 1; k <= 2; ++k) n += conv(k).param_count() + bn(k).param_count() + out + lka_repeats * lka(k, 0).param_count();
        return n;
    }
};

// ---------------------------------------------------------------------------
// D2BR-Conv: [conv3x3 -> DropBlock -> BN -> ReLU] x 2.

struct D2brConv {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;
    DropBlockParams drop{};

    ConvLayer conv(int k) const { return conv3x3(name + ".conv" + std::to_string(k), k == 1 ? in : out, out); }
    BatchNormLayer bn(int k) const { return {name + ".bn" + std::to_string(k), out}; }

    void declare(ParamStore& store, Rng& rng) const {
        for (int k = 1; k <= 2; ++k) {
            conv(k).declare(store, rng);
            bn(k).declare(store, rng);
        }
    }

    Var operator()(Context& ctx, Var x) const {
        if (x.shape().size() != 4 || x.dim(1) != in)
            throw ShapeError("D2BR-Conv " + name + ": expected " + std::to_string(in) + " input channels, got " +
                             to_string(x.shape()));
        for (int k = 1; k <= 2; ++k) {
            x = conv(k)(ctx, x);
            x = dropblock(x, drop, ctx.training(), ctx.rng());
            x = bn(k)(ctx, x);
            x = relu(x);
        }
        return x;
    }

    std::size_t param_count() const { return conv(1).param_count() + conv(2).param_count() + 4 * out; }
};

// ---------------------------------------------------------------------------
// Plain U-Net double convolution: [conv3x3 -> BN -> ReLU] x 2. Used when the structured
// blocks are switched off (ablation baseline).

struct DoubleConv {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;

    ConvLayer conv(int k) const { return conv3x3(name + ".conv" + std::to_string(k), k == 1 ? in : out, out); }
    BatchNormLayer bn(int k) const { return {name + ".bn" + std::to_string(k), out}; }

    void declare(ParamStore& store, Rng& rng) const {
        for (int k = 1; k <= 2; ++k) {
            conv(k).declare(store, rng);
            bn(k).declare(store, rng);
        }
    }

    Var operator()(Context& ctx, Var x) const {
        for (int k = 1; k <= 2; ++k) x = relu(bn(k)(ctx, conv(k)(ctx, x)));
        return x;
    }

    std::size_t param_count() const { return conv(1).param_count() + conv(2).param_count() + 4 * out; }
};

}  // namespace s3tu
