#pragma once

#include <memory>
#include <string>
#include <vector>

#include "s3tu/layers.hpp"

// S2-MLP Link: the skip-connection connector. A per-position MLP triples the channels,
// two of the three parts are spatially shifted in complementary directions, split
// attention fuses the three parts, and a second MLP restores the channel count.

namespace s3tu {

enum class ShiftSchedule { SS1, SS2 };

namespace detail {

/// Source index for every element of a channel-last [N, H, W, C] tensor under a shift
/// schedule. Channel quarters are [floor(qC/4), floor((q+1)C/4)). Each quarter copies its
/// neighbour one step along one axis; the line with no source keeps its own value.
inline std::vector<std::size_t> shift_sources(const Shape& s, ShiftSchedule schedule) {
    const std::size_t n = s[0], h = s[1], w = s[2], c = s[3];
    std::vector<std::size_t> src(n * h * w * c);
    // Per quarter: shift along width? and direction (+1: take from the next index).
    struct Move { bool along_w; int dir; };
    const Move ss1[4] = {{true, +1}, {true, -1}, {false, +1}, {false, -1}};
    const Move ss2[4] = {{false, +1}, {false, -1}, {true, +1}, {true, -1}};
    const Move* moves = schedule == ShiftSchedule::SS1 ? ss1 : ss2;
    std::vector<int> quarter(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
        int q = 0;
        while (q < 3 && ch >= (static_cast<std::size_t>(q) + 1) * c / 4) ++q;
        quarter[ch] = q;
    }
    for (std::size_t b = 0; b < n; ++b)
        for (std::size_t i = 0; i < h; ++i)
            for (std::size_t j = 0; j < w; ++j)
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const Move mv = moves[quarter[ch]];
                    std::size_t si = i, sj = j;
                    if (mv.along_w) {
                        if (mv.dir > 0 && j + 1 < w) sj = j + 1;
                        if (mv.dir < 0 && j >= 1) sj = j - 1;
                    } else {
                        if (mv.dir > 0 && i + 1 < h) si = i + 1;
                        if (mv.dir < 0 && i >= 1) si = i - 1;
                    }
                    src[((b * h + i) * w + j) * c + ch] = ((b * h + si) * w + sj) * c + ch;
                }
    return src;
}

inline Var spatial_shift(const Var& x, ShiftSchedule schedule) {
    const Shape& s = x.shape();
    if (s.size() != 4) throw ShapeError("spatial_shift: expected channel-last [N, H, W, C], got " + to_string(s));
    auto index = std::make_shared<const std::vector<std::size_t>>(shift_sources(s, schedule));
    return gather(x, std::move(index), s);
}

}  // namespace detail

/// SS1 on [N, H, W, C]: quarter 1 takes values from w+1, quarter 2 from w-1,
/// quarter 3 from h+1, quarter 4 from h-1.
inline Var spatial_shift_ss1(const Var& x) { return detail::spatial_shift(x, ShiftSchedule::SS1); }

/// SS2: the SS1 schedule with the H and W roles exchanged.
inline Var spatial_shift_ss2(const Var& x) { return detail::spatial_shift(x, ShiftSchedule::SS2); }

/// Split attention over k equally-shaped parts [N, n, C]:
/// a = mean over parts and positions; a_hat = MLP2(GELU(MLP1(a))) reshaped to [N, k, C];
/// weights = softmax over k; output = sum_k weights_k * part_k.
struct SplitAttention {
    std::string name;
    std::size_t channels = 0;
    std::size_t branches = 3;

    std::size_t hidden() const { return std::max<std::size_t>(1, channels / 2); }
    LinearLayer reduce() const { return {name + ".mlp_a1", channels, hidden()}; }
    LinearLayer expand() const { return {name + ".mlp_a2", hidden(), branches * channels}; }

    void declare(ParamStore& store, Rng& rng) const {
        reduce().declare(store, rng);
        expand().declare(store, rng);
    }

    /// Attention weights [N, k, C] for stacked parts [N, k, n, C].
    Var weights(Context& ctx, const Var& stacked) const {
        const std::size_t n = stacked.dim(0);
        Var pooled = mean(stacked, {1, 2});  // [N, C]
        Var logits = expand()(ctx, gelu(reduce()(ctx, pooled)));
        return softmax(reshape(logits, {n, branches, channels}), 1);
    }

    Var operator()(Context& ctx, const std::vector<Var>& parts) const {
        if (parts.size() != branches)
            throw ShapeError("split_attention: expected " + std::to_string(branches) + " parts, got " +
                             std::to_string(parts.size()));
        const Shape& s = parts[0].shape();
        if (s.size() != 3 || s[2] != channels)
            throw ShapeError("split_attention: part shape " + to_string(s) + " incompatible with " +
                             std::to_string(channels) + " channels");
        std::vector<Var> expanded;
        for (const auto& p : parts) {
            if (p.shape() != s)
                throw ShapeError("split_attention: part shapes differ: " + to_string(p.shape()) + " vs " + to_string(s));
            expanded.push_back(reshape(p, {s[0], 1, s[1], s[2]}));
        }
        Var stacked = concat(expanded, 1);  // [N, k, n, C]
        Var w = reshape(weights(ctx, stacked), {s[0], branches, 1, channels});
        return sum(mul(stacked, w), {1});
    }

    std::size_t param_count() const { return reduce().param_count() + expand().param_count(); }
};

struct S2MlpLink {
    std::string name;
    std::size_t channels = 0;

    LinearLayer mlp1() const { return {name + ".mlp1", channels, 3 * channels}; }
    SplitAttention attention() const { return {name + ".split", channels, 3}; }
    LinearLayer mlp2() const { return {name + ".mlp2", channels, channels}; }

    void declare(ParamStore& store, Rng& rng) const {
        mlp1().declare(store, rng);
        attention().declare(store, rng);
        mlp2().declare(store, rng);
    }

    Var operator()(Context& ctx, const Var& x) const {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != channels)
            throw ShapeError("s2-mlp link " + name + ": expected " + std::to_string(channels) + " channels, got " +
                             to_string(s));
        const std::size_t n = s[0], h = s[2], w = s[3], c = channels;
        Var expanded = mlp1()(ctx, permute(x, {0, 2, 3, 1}));  // [N, H, W, 3C]
        Var f1 = spatial_shift_ss1(slice(expanded, 3, 0, c));
        Var f2 = spatial_shift_ss2(slice(expanded, 3, c, 2 * c));
        Var f3 = slice(expanded, 3, 2 * c, 3 * c);
        const Shape flat{n, h * w, c};
        Var fused = attention()(ctx, {reshape(f1, flat), reshape(f2, flat), reshape(f3, flat)});
        Var restored = mlp2()(ctx, fused);
        return permute(reshape(restored, {n, h, w, c}), {0, 3, 1, 2});
    }

    std::size_t param_count() const {
        return mlp1().param_count() + attention().param_count() + mlp2().param_count();
    }
};

}  // namespace s3tu
