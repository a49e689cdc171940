#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "s3tu/metrics.hpp"
#include "s3tu/model.hpp"

// Central finite-difference checks of the analytic gradients. Every case reduces its output
// to a scalar with a fixed random weighting, L = sum(out * R), and compares dL/dx from the
// tape with (L(x + h) - L(x - h)) / 2h for each checked coordinate.

namespace s3tu {

struct GradCase {
    std::string name;
    std::vector<std::string> names;  // one per checked tensor
    std::vector<Tensor> values;
    std::function<Var(Tape&, const std::vector<Var>&)> forward;
    std::size_t max_coords = 0;      // per tensor; 0 checks every element
    double step = 1e-5;
};

struct GradCaseSpec {
    std::string name;
    std::string group;
    std::function<GradCase()> make;
};

struct GradResult {
    std::string name;
    double max_rel_error = 0.0;
    std::string worst;  // "<tensor>[<flat index>]"
    std::size_t coords = 0;
    double seconds = 0.0;
    bool passed = false;
};

inline constexpr double kGradTolerance = 1e-4;
/// Denominator floor for the relative error, so coordinates whose true gradient is ~0 are
/// judged by absolute error instead of by round-off in the difference quotient.
inline constexpr double kGradFloor = 1e-3;

inline double grad_rel_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), kGradFloor});
}

inline GradResult run_gradcheck(const GradCase& c) {
    const auto started = std::chrono::steady_clock::now();
    GradResult r;
    r.name = c.name;
    std::uint64_t h = 1469598103934665603ULL;
    for (char ch : c.name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
    Rng rng(h);

    Tensor weights;
    auto loss_of = [&](Tape& tape, const std::vector<Var>& leaves) {
        Var out = c.forward(tape, leaves);
        if (weights.empty()) {
            weights = Tensor(out.shape());
            for (auto& w : weights.data()) w = rng.uniform(-1.0, 1.0);
        }
        return sum_all(mul(out, tape.constant(weights)));
    };

    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& v : c.values) leaves.push_back(tape.leaf(v, true));
        Var loss = loss_of(tape, leaves);
        tape.backward(loss);
        for (const auto& l : leaves) analytic.push_back(tape.grad(l));
    }

    auto evaluate = [&](const std::vector<Tensor>& values) {
        Tape tape;
        std::vector<Var> leaves;
        for (const auto& v : values) leaves.push_back(tape.constant(v));
        return loss_of(tape, leaves).value()[0];
    };

    std::vector<Tensor> values = c.values;
    for (std::size_t t = 0; t < values.size(); ++t) {
        const std::size_t n = values[t].numel();
        std::vector<std::size_t> coords(n);
        for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        if (c.max_coords && n > c.max_coords) {
            rng.shuffle(coords);
            coords.resize(c.max_coords);
        }
        for (std::size_t i : coords) {
            const double orig = values[t][i];
            values[t][i] = orig + c.step;
            const double up = evaluate(values);
            values[t][i] = orig - c.step;
            const double down = evaluate(values);
            values[t][i] = orig;
            const double numeric = (up - down) / (2.0 * c.step);
            const double err = grad_rel_error(analytic[t][i], numeric);
            if (!(err <= r.max_rel_error)) {  // also catches NaN
                r.max_rel_error = std::isfinite(err) ? err : std::numeric_limits<double>::infinity();
                r.worst = c.names[t] + "[" + std::to_string(i) + "]";
            }
            ++r.coords;
        }
    }
    r.passed = r.max_rel_error < kGradTolerance;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    return r;
}

namespace gradcases {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// A case over a parameterized block: checks the given inputs plus every trainable entry of
/// the store. The forward pass binds the perturbed parameters into a fresh Context; in
/// training mode the DropBlock generator is re-seeded identically on every evaluation.
inline GradCase block_case(std::string name, std::shared_ptr<ParamStore> store, std::vector<Tensor> inputs,
                           bool training,
                           std::function<Var(Context&, const std::vector<Var>&)> fn, std::size_t max_coords = 0) {
    GradCase c;
    c.name = std::move(name);
    c.max_coords = max_coords;
    const std::size_t n_inputs = inputs.size();
    for (std::size_t i = 0; i < n_inputs; ++i) {
        c.names.push_back("input" + std::to_string(i));
        c.values.push_back(std::move(inputs[i]));
    }
    std::vector<std::string> params;
    for (const auto& e : store->entries())
        if (e.trainable) {
            params.push_back(e.name);
            c.names.push_back(e.name);
            c.values.push_back(e.value);
        }
    c.forward = [store, params, n_inputs, training, fn](Tape& tape, const std::vector<Var>& leaves) {
        Rng drop_rng(12345);
        Context ctx(tape, *store, training, &drop_rng);
        for (std::size_t i = 0; i < params.size(); ++i) ctx.bind(params[i], leaves[n_inputs + i]);
        return fn(ctx, std::vector<Var>(leaves.begin(), leaves.begin() + static_cast<long>(n_inputs)));
    };
    return c;
}

/// Gives batch-norm buffers non-trivial values so eval-mode checks are not degenerate.
inline void randomize_buffers(ParamStore& store, Rng& rng) {
    for (auto& e : store.entries()) {
        if (e.trainable) continue;
        const bool var = e.name.ends_with("running_var");
        for (auto& v : e.value.data()) v = var ? rng.uniform(0.5, 1.5) : rng.uniform(-0.3, 0.3);
    }
}

/// Moves trainable norm/scale entries off their initial constants.
inline void perturb_params(ParamStore& store, Rng& rng) {
    for (auto& e : store.entries()) {
        if (!e.trainable) continue;
        for (auto& v : e.value.data()) v += rng.uniform(-0.2, 0.2);
    }
}

template <typename Block>
std::shared_ptr<ParamStore> declared(const Block& block, Rng& rng) {
    auto store = std::make_shared<ParamStore>();
    block.declare(*store, rng);
    perturb_params(*store, rng);
    randomize_buffers(*store, rng);
    return store;
}

inline std::vector<GradCaseSpec> registry() {
    std::vector<GradCaseSpec> specs;
    auto add = [&](std::string name, std::string group, std::function<GradCase()> make) {
        specs.push_back({std::move(name), std::move(group), std::move(make)});
    };

    add("matmul", "ops", [] {
        Rng rng(1);
        GradCase c;
        c.name = "matmul";
        c.names = {"a", "b"};
        c.values = {random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return matmul(v[0], v[1]); };
        return c;
    });
    add("softmax", "ops", [] {
        Rng rng(2);
        GradCase c;
        c.name = "softmax";
        c.names = {"x"};
        c.values = {random_tensor({3, 5}, rng, -2, 2)};
        Tensor mask(Shape{3, 5}, 1.0);
        mask.at({0, 1}) = 0.0;
        mask.at({2, 4}) = 0.0;
        c.forward = [mask](Tape&, const std::vector<Var>& v) { return s3tu::add(softmax(v[0], 1), masked_softmax(v[0], 1, mask)); };
        return c;
    });
    add("conv2d", "conv", [] {
        Rng rng(3);
        GradCase c;
        c.name = "conv2d";
        c.names = {"x", "w", "b"};
        c.values = {random_tensor({2, 3, 6, 5}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], {1, 1, 1, 1}); };
        return c;
    });
    add("conv2d_grouped", "conv", [] {
        Rng rng(4);
        GradCase c;
        c.name = "conv2d_grouped";
        c.names = {"x", "w", "b"};
        c.values = {random_tensor({2, 4, 9, 8}, rng), random_tensor({6, 2, 3, 3}, rng), random_tensor({6}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], {2, 2, 2, 2}); };
        return c;
    });
    add("conv2d_depthwise", "conv", [] {
        Rng rng(5);
        GradCase c;
        c.name = "conv2d_depthwise";
        c.names = {"x", "w", "b"};
        c.values = {random_tensor({2, 3, 7, 7}, rng), random_tensor({3, 1, 5, 5}, rng), random_tensor({3}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return conv2d(v[0], v[1], v[2], {1, 4, 2, 3}); };
        return c;
    });
    add("conv_transpose", "conv", [] {
        Rng rng(6);
        GradCase c;
        c.name = "conv_transpose";
        c.names = {"x", "w", "b"};
        c.values = {random_tensor({2, 3, 3, 4}, rng), random_tensor({3, 2, 2, 2}, rng), random_tensor({2}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return conv_transpose2x2(v[0], v[1], v[2]); };
        return c;
    });
    add("maxpool", "conv", [] {
        Rng rng(7);
        GradCase c;
        c.name = "maxpool";
        c.names = {"x"};
        c.values = {random_tensor({2, 2, 4, 6}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return maxpool2x2(v[0]); };
        return c;
    });
    add("batchnorm", "norm", [] {
        Rng rng(8);
        BatchNormLayer bn{"bn", 3};
        auto store = declared(bn, rng);
        return block_case("batchnorm", store, {random_tensor({4, 3, 3, 3}, rng)}, true,
                          [bn](Context& ctx, const std::vector<Var>& x) { return bn(ctx, x[0]); });
    });
    add("batchnorm_eval", "norm", [] {
        Rng rng(9);
        BatchNormLayer bn{"bn", 3};
        auto store = declared(bn, rng);
        return block_case("batchnorm_eval", store, {random_tensor({2, 3, 3, 3}, rng)}, false,
                          [bn](Context& ctx, const std::vector<Var>& x) { return bn(ctx, x[0]); });
    });
    add("layernorm", "norm", [] {
        Rng rng(10);
        LayerNormLayer ln{"ln", 6};
        auto store = declared(ln, rng);
        return block_case("layernorm", store, {random_tensor({2, 4, 6}, rng)}, true,
                          [ln](Context& ctx, const std::vector<Var>& x) { return ln(ctx, x[0]); });
    });
    add("scalable_relu", "dwf", [] {
        Rng rng(11);
        GradCase c;
        c.name = "scalable_relu";
        c.names = {"x", "scale"};
        c.values = {random_tensor({2, 3, 4, 4}, rng), random_tensor({3}, rng, 0.5, 1.5)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return scalable_relu(v[0], v[1]); };
        return c;
    });
    add("lka", "dwf", [] {
        Rng rng(12);
        LkaLayer lka{"lka", 3};
        auto store = declared(lka, rng);
        return block_case("lka", store, {random_tensor({2, 3, 6, 6}, rng)}, true,
                          [lka](Context& ctx, const std::vector<Var>& x) { return lka(ctx, x[0]); });
    });
    add("dwf", "dwf", [] {
        Rng rng(13);
        DwfConv block{"dwf", 2, 4, 1};
        auto store = declared(block, rng);
        return block_case("dwf", store, {random_tensor({2, 2, 5, 5}, rng)}, true,
                          [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x[0]); }, 24);
    });
    add("d2br_eval", "d2br", [] {
        Rng rng(14);
        D2brConv block{"d2br", 2, 4, {3, 0.1}};
        auto store = declared(block, rng);
        return block_case("d2br_eval", store, {random_tensor({2, 2, 6, 6}, rng)}, false,
                          [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x[0]); }, 24);
    });
    add("d2br_train", "d2br", [] {
        Rng rng(15);
        D2brConv block{"d2br", 2, 4, {3, 0.1}};
        auto store = declared(block, rng);
        return block_case("d2br_train", store, {random_tensor({2, 2, 6, 6}, rng)}, true,
                          [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x[0]); }, 24);
    });
    for (std::size_t iters : {0, 1, 2}) {
        const std::string name = "rm_svit_iter" + std::to_string(iters);
        add(name, "rm_svit", [name, iters] {
            Rng rng(16 + iters);
            RmSvitConfig cfg;
            cfg.grid_h = cfg.grid_w = 3;
            cfg.n_iter = iters;
            cfg.heads = 2;
            RmSvit block{"rmsvit", 4, cfg};
            auto store = declared(block, rng);
            return block_case(name, store, {random_tensor({2, 4, 12, 9}, rng)}, true,
                              [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x[0]); }, 48);
        });
    }
    add("ss1", "s2_link", [] {
        Rng rng(20);
        GradCase c;
        c.name = "ss1";
        c.names = {"x"};
        c.values = {random_tensor({2, 3, 4, 8}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return spatial_shift_ss1(v[0]); };
        return c;
    });
    add("ss2", "s2_link", [] {
        Rng rng(21);
        GradCase c;
        c.name = "ss2";
        c.names = {"x"};
        c.values = {random_tensor({2, 3, 4, 8}, rng)};
        c.forward = [](Tape&, const std::vector<Var>& v) { return spatial_shift_ss2(v[0]); };
        return c;
    });
    add("split_attention", "s2_link", [] {
        Rng rng(22);
        SplitAttention block{"split", 4, 3};
        auto store = declared(block, rng);
        return block_case("split_attention", store,
                          {random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 4}, rng)},
                          true, [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x); });
    });
    add("s2_mlp_link", "s2_link", [] {
        Rng rng(23);
        S2MlpLink block{"link", 4};
        auto store = declared(block, rng);
        return block_case("s2_mlp_link", store, {random_tensor({2, 4, 3, 4}, rng)}, true,
                          [block](Context& ctx, const std::vector<Var>& x) { return block(ctx, x[0]); });
    });
    add("bce_dice_loss", "loss", [] {
        Rng rng(24);
        Tensor g(Shape{3, 1, 4, 4});
        for (auto& v : g.data()) v = rng.bernoulli(0.4) ? 1.0 : 0.0;
        GradCase c;
        c.name = "bce_dice_loss";
        c.names = {"p"};
        c.values = {random_tensor({3, 1, 4, 4}, rng, 0.05, 0.95)};
        c.forward = [g](Tape&, const std::vector<Var>& v) { return bce_dice_loss(v[0], g); };
        return c;
    });
    add("model_tiny", "model", [] {
        ModelConfig cfg;
        cfg.base_channels = 2;
        cfg.input_h = cfg.input_w = 32;
        cfg.rm_svit.grid_h = cfg.rm_svit.grid_w = 2;
        cfg.rm_svit.heads = 4;
        cfg.dropblock.block_size = 3;
        auto model = std::make_shared<Model>(Model::build(cfg, 7));
        Rng rng(25);
        perturb_params(model->params(), rng);
        Tensor x = random_tensor({2, 1, 32, 32}, rng, 0.0, 1.0);
        auto store = std::shared_ptr<ParamStore>(model, &model->params());
        return block_case("model_tiny", store, {x}, true,
                          [model](Context& ctx, const std::vector<Var>& in) { return model->forward(ctx, in[0]); }, 4);
    });
    return specs;
}

}  // namespace gradcases

inline bool scope_matches(const GradCaseSpec& spec, const std::string& scope) {
    return scope.empty() || scope == "all" || scope == spec.name || scope == spec.group;
}

/// Runs every registered case selected by scope ("all", a case name or a group name).
inline std::vector<GradResult> run_gradchecks(const std::string& scope = "all",
                                              const std::vector<GradCaseSpec>& specs = gradcases::registry()) {
    std::vector<GradResult> out;
    for (const auto& s : specs)
        if (scope_matches(s, scope)) out.push_back(run_gradcheck(s.make()));
    return out;
}

}  // namespace s3tu
