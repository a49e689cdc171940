#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace s3tu;

namespace {

std::size_t declared_count(const ParamStore& store) { return store.trainable_count(); }

// True when the zero entries of a plane are exactly a union of fully-inside bs x bs squares.
bool zeros_are_squares(const double* plane, std::size_t h, std::size_t w, std::size_t bs) {
    std::vector<bool> covered(h * w, false);
    for (std::size_t i = 0; i + bs <= h; ++i)
        for (std::size_t j = 0; j + bs <= w; ++j) {
            bool all_zero = true;
            for (std::size_t a = 0; a < bs && all_zero; ++a)
                for (std::size_t b = 0; b < bs && all_zero; ++b) all_zero = plane[(i + a) * w + j + b] == 0.0;
            if (!all_zero) continue;
            for (std::size_t a = 0; a < bs; ++a)
                for (std::size_t b = 0; b < bs; ++b) covered[(i + a) * w + j + b] = true;
        }
    for (std::size_t k = 0; k < h * w; ++k)
        if (plane[k] == 0.0 && !covered[k]) return false;
    return true;
}

}  // namespace

TEST(DropBlock, RealizedFractionAndSquareShape) {
    const DropBlockParams p{7, 0.1};
    Rng rng(2024);
    double dropped = 0.0;
    const std::size_t trials = 10000;
    for (std::size_t t = 0; t < trials; ++t) {
        const Tensor m = dropblock_mask({1, 1, 16, 16}, p, rng);
        for (double v : m.data()) dropped += v == 0.0;
        ASSERT_TRUE(zeros_are_squares(m.data().data(), 16, 16, 7));
    }
    const double fraction = dropped / static_cast<double>(trials * 256);
    EXPECT_GE(fraction, 0.08);
    EXPECT_LE(fraction, 0.12);
}

TEST(DropBlock, IdentityInEvalModeAndAtZeroRate) {
    Rng rng(1);
    const Tensor x = oracle::random({2, 3, 9, 9}, rng);
    Tape tape;
    Var v = tape.constant(x);
    EXPECT_EQ(dropblock(v, {3, 0.3}, false, &rng).value(), x);
    EXPECT_EQ(dropblock(v, {3, 0.0}, true, &rng).value(), x);
    EXPECT_THROW(dropblock(v, {3, 0.3}, true, nullptr), std::invalid_argument);
    EXPECT_THROW(dropblock(v, {4, 0.1}, false, &rng), std::invalid_argument);
    EXPECT_THROW(dropblock(v, {11, 0.1}, false, &rng), ShapeError);
    EXPECT_THROW(dropblock(v, {3, 1.0}, false, &rng), std::invalid_argument);
}

TEST(DropBlock, SurvivorsRescaledToPreserveSum) {
    Rng rng(5);
    Tape tape;
    const Tensor x = Tensor::ones({2, 2, 12, 12});
    const Tensor y = dropblock(tape.constant(x), {3, 0.2}, true, &rng).value();
    double total = 0.0, kept = 0.0;
    for (double v : y.data()) {
        total += v;
        kept += v != 0.0;
    }
    EXPECT_NEAR(total, static_cast<double>(x.numel()), 1e-9);
    EXPECT_LT(kept, static_cast<double>(x.numel()));
}

TEST(DropBlock, SeededMaskIsReproducible) {
    Rng a(9), b(9);
    EXPECT_EQ(dropblock_mask({2, 3, 16, 16}, {5, 0.1}, a), dropblock_mask({2, 3, 16, 16}, {5, 0.1}, b));
}

TEST(ScalableRelu, ScalesPositivePartPerChannel) {
    Tape tape;
    Tensor x(Shape{1, 2, 1, 2}, std::vector<double>{-1, 2, 3, -4});
    Tensor s(Shape{2}, std::vector<double>{0.5, 2.0});
    const Tensor y = scalable_relu(tape.constant(x), tape.constant(s)).value();
    EXPECT_EQ(y.data()[0], 0.0);
    EXPECT_EQ(y.data()[1], 1.0);
    EXPECT_EQ(y.data()[2], 6.0);
    EXPECT_EQ(y.data()[3], 0.0);
    EXPECT_THROW(scalable_relu(tape.constant(x), tape.constant(Tensor::ones({3}))), ShapeError);
}

TEST(Lka, MatchesConvCompositionOracle) {
    Rng rng(3);
    const std::size_t c = 3;
    LkaLayer lka{"lka", c};
    ParamStore store;
    lka.declare(store, rng);
    for (auto& e : store.entries())
        for (auto& v : e.value.data()) v = rng.uniform(-0.5, 0.5);
    const Tensor x = oracle::random({2, c, 10, 12}, rng);
    Tape tape;
    Context ctx(tape, store, false);
    const Tensor y = lka(ctx, tape.constant(x)).value();

    const Tensor b1 = store.at("lka.dw.b"), b2 = store.at("lka.dwd.b"), b3 = store.at("lka.pw.b");
    Tensor a = oracle::conv2d(x, store.at("lka.dw.w"), &b1, {1, 2, 1, c});
    a = oracle::conv2d(a, store.at("lka.dwd.w"), &b2, {1, 9, 3, c});
    a = oracle::conv2d(a, store.at("lka.pw.w"), &b3, {});
    for (std::size_t i = 0; i < a.numel(); ++i) a[i] *= x[i];
    EXPECT_LT(oracle::max_abs_diff(y, a), 1e-10);
    EXPECT_EQ(lka.param_count(), declared_count(store));
}

TEST(DwfConv, ShapeAndParamCensus) {
    Rng rng(4);
    DwfConv block{"dwf", 2, 4, 1};
    ParamStore store;
    block.declare(store, rng);
    EXPECT_EQ(block.param_count(), declared_count(store));
    EXPECT_EQ(store.entry("dwf.relu1.scale").min_value, kReluScaleFloor);
    Tape tape;
    Context ctx(tape, store, true);
    Var y = block(ctx, tape.constant(oracle::random({2, 2, 8, 8}, rng)));
    EXPECT_EQ(y.shape(), (Shape{2, 4, 8, 8}));
    EXPECT_THROW(block(ctx, tape.constant(Tensor::ones({2, 3, 8, 8}))), ShapeError);

    DwfConv twice{"dwf2", 2, 4, 2};
    ParamStore store2;
    twice.declare(store2, rng);
    EXPECT_EQ(twice.param_count(), declared_count(store2));
    EXPECT_GT(twice.param_count(), block.param_count());
}

TEST(D2brConv, EvalModeDeterministicTrainingModeStochastic) {
    Rng rng(6);
    D2brConv block{"d2br", 2, 3, {3, 0.3}};
    ParamStore store;
    block.declare(store, rng);
    EXPECT_EQ(block.param_count(), declared_count(store));
    const Tensor x = oracle::random({2, 2, 9, 9}, rng);
    auto run = [&](bool training, std::uint64_t seed) {
        ParamStore copy = store;
        Tape tape;
        Rng drop(seed);
        Context ctx(tape, copy, training, &drop);
        return block(ctx, tape.constant(x)).value();
    };
    EXPECT_EQ(run(false, 1), run(false, 2));
    EXPECT_EQ(run(true, 1), run(true, 1));
    EXPECT_NE(run(true, 1), run(true, 2));
}

TEST(D2brConv, TrainingUpdatesRunningStatistics) {
    Rng rng(7);
    D2brConv block{"d2br", 1, 2, {3, 0.1}};
    ParamStore store;
    block.declare(store, rng);
    const Tensor before = store.at("d2br.bn1.running_mean");
    Tape tape;
    Rng drop(1);
    Context ctx(tape, store, true, &drop);
    block(ctx, tape.constant(oracle::random({2, 1, 8, 8}, rng, 1.0, 2.0)));
    EXPECT_NE(store.at("d2br.bn1.running_mean"), before);
}
