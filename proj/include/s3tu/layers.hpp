#pragma once

#include <optional>
#include <string>

#include "s3tu/conv.hpp"
#include "s3tu/norm.hpp"
#include "s3tu/params.hpp"

// Parameter-owning wrappers around the raw ops. Each layer knows its parameter names,
// declares them with their initial values, and applies itself inside a Context.

namespace s3tu {

struct ConvLayer {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t kernel = 3;
    Conv2dOptions opt{};
    bool bias = true;

    void declare(ParamStore& store, Rng& rng) const {
        const std::size_t cg = in / opt.groups;
        store.declare(name + ".w", kaiming_uniform({out, cg, kernel, kernel}, cg * kernel * kernel, rng));
        if (bias) store.declare(name + ".b", Tensor::zeros({out}));
    }

    Var operator()(Context& ctx, const Var& x) const {
        std::optional<Var> b;
        if (bias) b = ctx.param(name + ".b");
        return conv2d(x, ctx.param(name + ".w"), b, opt);
    }

    std::size_t param_count() const { return out * (in / opt.groups) * kernel * kernel + (bias ? out : 0); }
};

/// 3x3, stride 1, zero pad 1: spatial size preserved. No bias (always followed by a norm).
inline ConvLayer conv3x3(std::string name, std::size_t in, std::size_t out) {
    return ConvLayer{std::move(name), in, out, 3, Conv2dOptions{1, 1, 1, 1}, false};
}

inline ConvLayer conv1x1(std::string name, std::size_t in, std::size_t out) {
    return ConvLayer{std::move(name), in, out, 1, Conv2dOptions{}, true};
}

struct BatchNormLayer {
    std::string name;
    std::size_t channels = 0;

    void declare(ParamStore& store, Rng&) const {
        store.declare(name + ".gamma", Tensor::ones({channels}));
        store.declare(name + ".beta", Tensor::zeros({channels}));
        store.declare(name + ".running_mean", Tensor::zeros({channels}), false);
        store.declare(name + ".running_var", Tensor::ones({channels}), false);
    }

    Var operator()(Context& ctx, const Var& x) const {
        return batchnorm2d(x, ctx.param(name + ".gamma"), ctx.param(name + ".beta"), ctx.running_stats(name),
                           ctx.training());
    }

    std::size_t param_count() const { return 2 * channels; }
};

/// Affine map over the last axis. Weight stored as [in, out].
struct LinearLayer {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;

    void declare(ParamStore& store, Rng& rng) const {
        store.declare(name + ".w", kaiming_uniform({in, out}, in, rng));
        store.declare(name + ".b", Tensor::zeros({out}));
    }

    Var operator()(Context& ctx, const Var& x) const {
        const Shape& s = x.shape();
        if (s.back() != in)
            throw ShapeError("linear " + name + ": expected last axis " + std::to_string(in) + ", got " + to_string(s));
        const std::size_t rows = x.value().numel() / in;
        Var flat = reshape(x, {rows, in});
        Var y = add(matmul(flat, ctx.param(name + ".w")), ctx.param(name + ".b"));
        Shape out_shape = s;
        out_shape.back() = out;
        return reshape(y, out_shape);
    }

    std::size_t param_count() const { return in * out + out; }
};

struct LayerNormLayer {
    std::string name;
    std::size_t dim = 0;

    void declare(ParamStore& store, Rng&) const {
        store.declare(name + ".gain", Tensor::ones({dim}));
        store.declare(name + ".bias", Tensor::zeros({dim}));
    }

    Var operator()(Context& ctx, const Var& x) const {
        return layernorm(x, ctx.param(name + ".gain"), ctx.param(name + ".bias"));
    }

    std::size_t param_count() const { return 2 * dim; }
};

/// 2x2 stride-2 transposed convolution. Weight [in, out, 2, 2], fan-in taken as in*4.
struct UpConvLayer {
    std::string name;
    std::size_t in = 0;
    std::size_t out = 0;

    void declare(ParamStore& store, Rng& rng) const {
        store.declare(name + ".w", kaiming_uniform({in, out, 2, 2}, in * 4, rng));
        store.declare(name + ".b", Tensor::zeros({out}));
    }

    Var operator()(Context& ctx, const Var& x) const {
        return conv_transpose2x2(x, ctx.param(name + ".w"), ctx.param(name + ".b"));
    }

    std::size_t param_count() const { return in * out * 4 + out; }
};

}  // namespace s3tu
