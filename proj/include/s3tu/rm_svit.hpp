#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "s3tu/layers.hpp"

// Residual multi-branch-attention superpixel transformer (RM-SViT).
//
// Tokens are the pixels of an N x C x H x W map. They are grouped into m super tokens
// initialised as grid-cell means; token/super-token association is a (optionally
// neighbourhood-masked) softmax over scaled dot products; super tokens are re-estimated as
// association-weighted token means. After the iterations the super tokens go through
// multi-head self-attention, a 1x1 conv projection, a residual add and LayerNorm, and are
// mapped back onto the token grid with the final association.

namespace s3tu {

struct RmSvitConfig {
    std::size_t grid_h = 8;
    std::size_t grid_w = 8;
    std::size_t n_iter = 1;
    std::size_t heads = 4;
    bool sparse = true;             // restrict association to the 3x3 neighbouring super tokens
    bool detach_iterations = false; // stop gradients between clustering iterations
};

/// Geometry of the super-token grid over an H x W map with h x w cells.
struct SuperTokenGrid {
    std::size_t height = 0, width = 0;  // H, W
    std::size_t cell_h = 0, cell_w = 0; // h, w
    std::size_t rows = 0, cols = 0;     // H/h, W/w

    std::size_t tokens() const { return height * width; }
    std::size_t supertokens() const { return rows * cols; }

    static SuperTokenGrid make(std::size_t height, std::size_t width, std::size_t cell_h, std::size_t cell_w) {
        if (cell_h == 0 || cell_w == 0 || height % cell_h != 0 || width % cell_w != 0)
            throw ShapeError("rm-svit: grid " + std::to_string(cell_h) + "x" + std::to_string(cell_w) +
                             " does not divide feature map " + std::to_string(height) + "x" + std::to_string(width));
        return {height, width, cell_h, cell_w, height / cell_h, width / cell_w};
    }
};

/// Clustering state after one association/update round.
struct SuperTokenState {
    Var supertokens;  // [N, m, C]
    Var association;  // [N, n, m]; rows sum to 1
    SuperTokenGrid grid;
    std::size_t iteration = 0;
};

/// [N, C, H, W] -> [N, H*W, C], row-major over (H, W).
inline Var tokens_from_map(const Var& f) {
    const Shape& s = f.shape();
    if (s.size() != 4) throw ShapeError("tokens_from_map: expected NCHW, got " + to_string(s));
    return reshape(permute(f, {0, 2, 3, 1}), {s[0], s[2] * s[3], s[1]});
}

/// [N, H*W, C] -> [N, C, H, W].
inline Var map_from_tokens(const Var& x, std::size_t height, std::size_t width) {
    const Shape& s = x.shape();
    return permute(reshape(x, {s[0], height, width, s[2]}), {0, 3, 1, 2});
}

/// Grid-cell means: [N, C, H, W] -> [N, m, C], super tokens in row-major cell order.
inline Var init_supertokens(const Var& f, const SuperTokenGrid& g) {
    const Shape& s = f.shape();
    if (s.size() != 4 || s[2] != g.height || s[3] != g.width)
        throw ShapeError("init_supertokens: map " + to_string(s) + " does not match grid");
    Var cells = reshape(f, {s[0], s[1], g.rows, g.cell_h, g.cols, g.cell_w});
    cells = permute(cells, {0, 2, 4, 1, 3, 5});
    return reshape(mean(cells, {4, 5}), {s[0], g.supertokens(), s[1]});
}

/// [n, m] mask: 1 where token i may associate with super token j. Sparse mode allows the
/// 3x3 block of cells around the token's own cell.
inline Tensor association_mask(const SuperTokenGrid& g, bool sparse) {
    Tensor mask(Shape{g.tokens(), g.supertokens()}, 1.0);
    if (!sparse) return mask;
    for (std::size_t r = 0; r < g.height; ++r)
        for (std::size_t c = 0; c < g.width; ++c) {
            const long cr = static_cast<long>(r / g.cell_h);
            const long cc = static_cast<long>(c / g.cell_w);
            for (std::size_t j = 0; j < g.supertokens(); ++j) {
                const long jr = static_cast<long>(j / g.cols);
                const long jc = static_cast<long>(j % g.cols);
                const bool near = std::labs(jr - cr) <= 1 && std::labs(jc - cc) <= 1;
                mask.at({r * g.width + c, j}) = near ? 1.0 : 0.0;
            }
        }
    return mask;
}

inline Tensor batched_mask(const Tensor& mask, std::size_t batch) {
    Tensor out(Shape{batch, mask.dim(0), mask.dim(1)});
    for (std::size_t b = 0; b < batch; ++b)
        std::copy(mask.data().begin(), mask.data().end(), out.data().begin() + b * mask.numel());
    return out;
}

/// Q[b,i,j] = softmax_j(X_i . S_j / sqrt(C)), restricted to mask (shape [N, n, m]) when given.
inline Var associate(const Var& tokens, const Var& supertokens, const Tensor* mask = nullptr) {
    const Shape& xs = tokens.shape();
    const Shape& ss = supertokens.shape();
    if (xs.size() != 3 || ss.size() != 3 || xs[0] != ss[0] || xs[2] != ss[2])
        throw ShapeError("associate: tokens " + to_string(xs) + " vs super tokens " + to_string(ss));
    Var logits = scale(matmul(tokens, transpose(supertokens, 1, 2)), 1.0 / std::sqrt(static_cast<double>(xs[2])));
    return mask ? masked_softmax(logits, 2, *mask) : softmax(logits, 2);
}

/// S = Q_hat^T X with Q_hat the column-normalised association. Columns without mass keep
/// the previous super token.
inline Var update_supertokens(const Var& assoc, const Var& tokens, const Var& previous) {
    const Shape& qs = assoc.shape();
    if (qs.size() != 3 || tokens.shape().size() != 3 || tokens.dim(1) != qs[1] || previous.dim(1) != qs[2])
        throw ShapeError("update_supertokens: association " + to_string(qs) + " vs tokens " + to_string(tokens.shape()));
    Tape& tape = assoc.tape();
    Var mass = sum(assoc, {1}, true);  // [N, 1, m]
    Tensor empty(mass.shape());
    bool any_empty = false;
    for (std::size_t i = 0; i < empty.numel(); ++i)
        if (mass.value()[i] == 0.0) {
            empty[i] = 1.0;
            any_empty = true;
        }
    if (!any_empty) {
        Var normalized = div(assoc, mass);
        return matmul(transpose(normalized, 1, 2), tokens);
    }
    Var normalized = div(assoc, add(mass, tape.constant(empty)));
    Var updated = matmul(transpose(normalized, 1, 2), tokens);
    Var keep = tape.constant(empty.reshaped({empty.dim(0), empty.dim(2), 1}));
    return add(updated, mul(keep, previous));
}

/// X_out = Q S, folded back to [N, C, H, W].
inline Var token_upsample(const Var& assoc, const Var& supertokens, std::size_t height, std::size_t width) {
    if (assoc.dim(1) != height * width)
        throw ShapeError("token_upsample: association " + to_string(assoc.shape()) + " does not cover " +
                         std::to_string(height) + "x" + std::to_string(width));
    return map_from_tokens(matmul(assoc, supertokens), height, width);
}

/// Multi-head self-attention over super tokens with a 1x1 conv projection, residual and
/// LayerNorm: LN(Conv1x1(Attn(S)) + S).
struct RmbaLayer {
    std::string name;
    std::size_t channels = 0;
    std::size_t heads = 4;

    LinearLayer query() const { return {name + ".q", channels, channels}; }
    LinearLayer key() const { return {name + ".k", channels, channels}; }
    LinearLayer value() const { return {name + ".v", channels, channels}; }
    ConvLayer proj() const { return conv1x1(name + ".proj", channels, channels); }
    LayerNormLayer norm() const { return {name + ".ln", channels}; }

    void declare(ParamStore& store, Rng& rng) const {
        check();
        query().declare(store, rng);
        key().declare(store, rng);
        value().declare(store, rng);
        proj().declare(store, rng);
        norm().declare(store, rng);
    }

    void check() const {
        if (heads == 0 || channels % heads != 0)
            throw std::invalid_argument("rmba: heads " + std::to_string(heads) + " must divide channels " +
                                        std::to_string(channels));
    }

    /// s: [N, m, C]; grid gives the super-token layout used by the projection conv.
    Var operator()(Context& ctx, const Var& s, std::size_t grid_rows, std::size_t grid_cols) const {
        check();
        const Shape& sh = s.shape();
        if (sh.size() != 3 || sh[2] != channels || sh[1] != grid_rows * grid_cols)
            throw ShapeError("rmba: super tokens " + to_string(sh) + " do not match " + std::to_string(channels) +
                             " channels on a " + std::to_string(grid_rows) + "x" + std::to_string(grid_cols) + " grid");
        const std::size_t n = sh[0], m = sh[1], dh = channels / heads;
        auto split = [&](const Var& t) { return permute(reshape(t, {n, m, heads, dh}), {0, 2, 1, 3}); };
        Var q = split(query()(ctx, s));
        Var k = split(key()(ctx, s));
        Var v = split(value()(ctx, s));
        Var scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(dh)));
        Var attn = matmul(softmax(scores, 3), v);  // [N, heads, m, dh]
        Var merged = reshape(permute(attn, {0, 2, 1, 3}), {n, m, channels});
        Var as_map = reshape(permute(merged, {0, 2, 1}), {n, channels, grid_rows, grid_cols});
        Var projected = permute(reshape(proj()(ctx, as_map), {n, channels, m}), {0, 2, 1});
        return norm()(ctx, add(projected, s));
    }

    std::size_t param_count() const {
        return 3 * query().param_count() + proj().param_count() + norm().param_count();
    }
};

struct RmSvit {
    std::string name;
    std::size_t channels = 0;
    RmSvitConfig cfg{};

    RmbaLayer rmba() const { return {name + ".rmba", channels, cfg.heads}; }

    void declare(ParamStore& store, Rng& rng) const { rmba().declare(store, rng); }

    /// Full pass. When trace is given, every clustering state (including the final
    /// association used for up-sampling) is appended to it.
    Var operator()(Context& ctx, const Var& f, std::vector<SuperTokenState>* trace = nullptr) const {
        const Shape& s = f.shape();
        if (s.size() != 4 || s[1] != channels)
            throw ShapeError("rm-svit " + name + ": expected " + std::to_string(channels) + " channels, got " +
                             to_string(s));
        const auto grid = SuperTokenGrid::make(s[2], s[3], cfg.grid_h, cfg.grid_w);
        Tensor mask = batched_mask(association_mask(grid, cfg.sparse), s[0]);
        const Tensor* mask_ptr = cfg.sparse ? &mask : nullptr;
        Var tokens = tokens_from_map(f);
        Var st = init_supertokens(f, grid);
        for (std::size_t it = 0; it < cfg.n_iter; ++it) {
            Var assoc = associate(tokens, st, mask_ptr);
            st = update_supertokens(assoc, tokens, st);
            if (trace) trace->push_back({st, assoc, grid, it + 1});
            if (cfg.detach_iterations) st = ctx.tape().detach(st);
        }
        Var assoc = associate(tokens, st, mask_ptr);
        if (trace) trace->push_back({st, assoc, grid, cfg.n_iter});
        Var refined = rmba()(ctx, st, grid.rows, grid.cols);
        return token_upsample(assoc, refined, s[2], s[3]);
    }

    std::size_t param_count() const { return rmba().param_count(); }
};

}  // namespace s3tu
