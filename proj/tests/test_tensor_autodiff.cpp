#include <gtest/gtest.h>

#include <sstream>

#include "oracles.hpp"

using namespace s3tu;

namespace {

Tensor grad_of(Tape& tape, const Var& v) { return tape.grad(v); }

// Loss sum(y * r) so that d loss / d y = r.
Var weighted_sum(const Var& y, const Tensor& r) { return sum_all(mul(y, y.tape().constant(r))); }

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
    Tensor t(Shape{2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
    EXPECT_EQ(t.numel(), 6u);
    EXPECT_EQ(t.at({1, 2}), 6.0);
    EXPECT_THROW(t.at({2, 0}), std::out_of_range);
    EXPECT_THROW(t.at({0}), ShapeError);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
    EXPECT_THROW(Tensor(Shape{2, 0}), ShapeError);
    EXPECT_EQ(t.reshaped({3, 2}).at({2, 1}), 6.0);
    EXPECT_THROW(t.reshaped({4, 2}), ShapeError);
}

TEST(Tensor, SerializationRoundTrip) {
    Rng rng(1);
    const Tensor t = oracle::random({2, 3, 4}, rng);
    std::stringstream ss;
    io::write_tensor(ss, t);
    const std::string bytes = ss.str();
    std::stringstream in(bytes);
    EXPECT_EQ(io::read_tensor(in), t);
    std::stringstream truncated(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(io::read_tensor(truncated), FormatError);
    std::string bad = bytes;
    bad[0] = 'X';
    std::stringstream wrong(bad);
    EXPECT_THROW(io::read_tensor(wrong), FormatError);
}

TEST(Autodiff, ReusedInputAccumulates) {
    Tape tape;
    Var x = tape.leaf(Tensor(Shape{3}, std::vector<double>{1, -2, 3}), true);
    Var y = sum_all(mul(x, x));
    tape.backward(y);
    const Tensor g = grad_of(tape, x);
    EXPECT_EQ(g[0], 2.0);
    EXPECT_EQ(g[1], -4.0);
    EXPECT_EQ(g[2], 6.0);
}

TEST(Autodiff, BroadcastGradientsReduce) {
    Tape tape;
    Var a = tape.leaf(Tensor::ones({2, 3}), true);
    Var b = tape.leaf(Tensor(Shape{3}, std::vector<double>{1, 2, 3}), true);
    tape.backward(sum_all(mul(a, b)));
    const Tensor gb = tape.grad(b);
    EXPECT_EQ(gb[0], 2.0);
    EXPECT_EQ(gb[2], 2.0);
    EXPECT_EQ(tape.grad(a).at({1, 2}), 3.0);
    EXPECT_THROW(add(a, tape.leaf(Tensor::ones({2}))), ShapeError);
}

TEST(Autodiff, NonScalarLossRejected) {
    Tape tape;
    Var a = tape.leaf(Tensor::ones({2}), true);
    EXPECT_THROW(tape.backward(a), ShapeError);
}

TEST(Ops, SoftmaxProperties) {
    Rng rng(3);
    for (int t = 0; t < 20; ++t) {
        Tape tape;
        Tensor x = oracle::random({3, 5}, rng, -4, 4);
        Tensor shifted = x;
        for (auto& v : shifted.data()) v += 7.5;
        const Tensor a = softmax(tape.constant(x), 1).value();
        const Tensor b = softmax(tape.constant(shifted), 1).value();
        EXPECT_LT(oracle::max_abs_diff(a, b), 1e-12);
        for (std::size_t r = 0; r < 3; ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < 5; ++c) s += a.at({r, c});
            EXPECT_NEAR(s, 1.0, 1e-12);
        }
    }
    Tape tape;
    Tensor mask(Shape{1, 4}, std::vector<double>{1, 0, 1, 0});
    const Tensor m = masked_softmax(tape.constant(Tensor::ones({1, 4})), 1, mask).value();
    EXPECT_EQ(m[1], 0.0);
    EXPECT_DOUBLE_EQ(m[0], 0.5);
}

TEST(Ops, PermuteSliceConcatInverse) {
    Rng rng(4);
    Tape tape;
    Tensor x = oracle::random({2, 3, 4, 5}, rng);
    Var v = tape.constant(x);
    Var p = permute(permute(v, {0, 2, 3, 1}), {0, 3, 1, 2});
    EXPECT_EQ(p.value(), x);
    Var joined = concat({slice(v, 1, 0, 1), slice(v, 1, 1, 3)}, 1);
    EXPECT_EQ(joined.value(), x);
    EXPECT_EQ(permute(v, {0, 2, 3, 1}).value().at({1, 3, 4, 2}), x.at({1, 2, 3, 4}));
}

TEST(Ops, MatmulMatchesOracle) {
    Rng rng(5);
    for (int t = 0; t < 100; ++t) {
        const std::size_t m = 1 + rng.below(6), k = 1 + rng.below(6), n = 1 + rng.below(6);
        const Tensor a = oracle::random({m, k}, rng), b = oracle::random({k, n}, rng);
        Tape tape;
        EXPECT_LT(oracle::max_abs_diff(matmul(tape.constant(a), tape.constant(b)).value(), oracle::matmul(a, b)), 1e-12);
    }
}

TEST(Ops, BatchedMatmulAndGradients) {
    Rng rng(6);
    const Tensor a = oracle::random({3, 2, 4}, rng), b = oracle::random({3, 4, 5}, rng), r = oracle::random({3, 2, 5}, rng);
    Tape tape;
    Var va = tape.leaf(a, true), vb = tape.leaf(b, true);
    Var y = matmul(va, vb);
    tape.backward(weighted_sum(y, r));
    for (std::size_t i = 0; i < 3; ++i) {
        Tensor ai(Shape{2, 4}), bi(Shape{4, 5}), ri(Shape{2, 5});
        std::copy_n(a.data().begin() + i * 8, 8, ai.data().begin());
        std::copy_n(b.data().begin() + i * 20, 20, bi.data().begin());
        std::copy_n(r.data().begin() + i * 10, 10, ri.data().begin());
        Tensor yi = oracle::matmul(ai, bi);
        for (std::size_t j = 0; j < 10; ++j) EXPECT_NEAR(y.value()[i * 10 + j], yi[j], 1e-12);
        // dA = R B^T, dB = A^T R
        Tensor bt(Shape{5, 4}), at(Shape{4, 2});
        for (std::size_t p = 0; p < 4; ++p)
            for (std::size_t q = 0; q < 5; ++q) bt.at({q, p}) = bi.at({p, q});
        for (std::size_t p = 0; p < 2; ++p)
            for (std::size_t q = 0; q < 4; ++q) at.at({q, p}) = ai.at({p, q});
        const Tensor ga = oracle::matmul(ri, bt), gb = oracle::matmul(at, ri);
        for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(tape.grad(va)[i * 8 + j], ga[j], 1e-12);
        for (std::size_t j = 0; j < 20; ++j) EXPECT_NEAR(tape.grad(vb)[i * 20 + j], gb[j], 1e-12);
    }
}

TEST(Conv, MatchesOracleOnRandomConfigs) {
    Rng rng(7);
    for (int t = 0; t < 120; ++t) {
        oracle::ConvSpec s;
        s.groups = 1 + rng.below(3);
        const std::size_t cg = 1 + rng.below(3), og = 1 + rng.below(3);
        const std::size_t c = s.groups * cg, o = s.groups * og;
        const std::size_t k = 1 + rng.below(4);
        s.stride = 1 + rng.below(2);
        s.dil = 1 + rng.below(2);
        s.pad = rng.below(3);
        const std::size_t h = s.dil * (k - 1) + 1 + rng.below(5), w = s.dil * (k - 1) + 1 + rng.below(5);
        const std::size_t n = 1 + rng.below(2);
        const Tensor x = oracle::random({n, c, h, w}, rng), wt = oracle::random({o, cg, k, k}, rng);
        const Tensor b = oracle::random({o}, rng);
        Tape tape;
        Var vx = tape.leaf(x, true), vw = tape.leaf(wt, true), vb = tape.leaf(b, true);
        Var y = conv2d(vx, vw, vb, Conv2dOptions{s.stride, s.pad, s.dil, s.groups});
        const Tensor expect = oracle::conv2d(x, wt, &b, s);
        ASSERT_EQ(y.shape(), expect.shape());
        EXPECT_LT(oracle::max_abs_diff(y.value(), expect), 1e-10);
        const Tensor r = oracle::random(y.shape(), rng);
        tape.backward(weighted_sum(y, r));
        Tensor gx, gw;
        oracle::conv2d_grads(x, wt, r, s, gx, gw);
        EXPECT_LT(oracle::max_abs_diff(tape.grad(vx), gx), 1e-10);
        EXPECT_LT(oracle::max_abs_diff(tape.grad(vw), gw), 1e-10);
    }
}

TEST(Conv, DepthwiseDilatedMatchesOracle) {
    Rng rng(8);
    for (std::size_t k : {5u, 7u}) {
        const std::size_t dil = k == 7 ? 3 : 1, pad = k == 7 ? 9 : 2;
        const Tensor x = oracle::random({2, 3, 11, 9}, rng), wt = oracle::random({3, 1, k, k}, rng);
        Tape tape;
        Var vx = tape.leaf(x, true), vw = tape.leaf(wt, true);
        Var y = conv2d(vx, vw, std::nullopt, Conv2dOptions{1, pad, dil, 3});
        oracle::ConvSpec s{1, pad, dil, 3};
        EXPECT_EQ(y.shape(), x.shape());
        EXPECT_LT(oracle::max_abs_diff(y.value(), oracle::conv2d(x, wt, nullptr, s)), 1e-10);
        const Tensor r = oracle::random(y.shape(), rng);
        tape.backward(weighted_sum(y, r));
        Tensor gx, gw;
        oracle::conv2d_grads(x, wt, r, s, gx, gw);
        EXPECT_LT(oracle::max_abs_diff(tape.grad(vx), gx), 1e-10);
        EXPECT_LT(oracle::max_abs_diff(tape.grad(vw), gw), 1e-10);
    }
}

TEST(Conv, RejectsMismatchedShapes) {
    Tape tape;
    Var x = tape.constant(Tensor::ones({1, 3, 5, 5}));
    EXPECT_THROW(conv2d(x, tape.constant(Tensor::ones({2, 2, 3, 3}))), ShapeError);
    EXPECT_THROW(conv2d(x, tape.constant(Tensor::ones({2, 3, 7, 7}))), ShapeError);
}

TEST(Conv, TransposeMatchesOracle) {
    Rng rng(9);
    for (int t = 0; t < 20; ++t) {
        const Tensor x = oracle::random({2, 3, 3, 4}, rng), w = oracle::random({3, 2, 2, 2}, rng), b = oracle::random({2}, rng);
        Tape tape;
        const Tensor y = conv_transpose2x2(tape.constant(x), tape.constant(w), tape.constant(b)).value();
        EXPECT_LT(oracle::max_abs_diff(y, oracle::conv_transpose2x2(x, w, b)), 1e-12);
    }
}

TEST(Conv, MaxPoolPicksWindowMaximum) {
    Rng rng(10);
    const Tensor x = oracle::random({2, 2, 4, 6}, rng);
    Tape tape;
    Var vx = tape.leaf(x, true);
    Var y = maxpool2x2(vx);
    ASSERT_EQ(y.shape(), (Shape{2, 2, 2, 3}));
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t i = 0; i < 2; ++i)
                for (std::size_t j = 0; j < 3; ++j) {
                    double m = -INFINITY;
                    for (std::size_t a = 0; a < 2; ++a)
                        for (std::size_t d = 0; d < 2; ++d) m = std::max(m, x.at({b, c, 2 * i + a, 2 * j + d}));
                    EXPECT_EQ(y.value().at({b, c, i, j}), m);
                }
    tape.backward(sum_all(y));
    const Tensor gx = tape.grad(vx);
    double total = 0.0;
    for (double v : gx.data()) total += v;
    EXPECT_EQ(total, 24.0);
}

TEST(Norm, BatchNormMatchesOracle) {
    Rng rng(11);
    for (int t = 0; t < 100; ++t) {
        const std::size_t n = 2 + rng.below(3), c = 1 + rng.below(4), h = 1 + rng.below(4), w = 1 + rng.below(4);
        const Tensor x = oracle::random({n, c, h, w}, rng, -2, 3);
        const Tensor gamma = oracle::random({c}, rng, 0.5, 1.5), beta = oracle::random({c}, rng);
        Tensor rm = oracle::random({c}, rng), rv = oracle::random({c}, rng, 0.5, 2.0);
        const auto expect = oracle::batchnorm_train(x, gamma, beta, rm, rv, kNormEps, kBatchNormMomentum);
        const Tensor eval_expect = oracle::batchnorm_eval(x, gamma, beta, rm, rv, kNormEps);
        Tensor rm_eval = rm, rv_eval = rv;
        Tape tape;
        const Tensor y = batchnorm2d(tape.constant(x), tape.constant(gamma), tape.constant(beta), {rm, rv}, true).value();
        EXPECT_LT(oracle::max_abs_diff(y, expect.y), 1e-9);
        EXPECT_LT(oracle::max_abs_diff(rm, expect.running_mean), 1e-12);
        EXPECT_LT(oracle::max_abs_diff(rv, expect.running_var), 1e-12);
        const Tensor ye =
            batchnorm2d(tape.constant(x), tape.constant(gamma), tape.constant(beta), {rm_eval, rv_eval}, false).value();
        EXPECT_LT(oracle::max_abs_diff(ye, eval_expect), 1e-12);
    }
}

TEST(Norm, BatchNormTrainingNeedsTwoSamples) {
    Tape tape;
    Tensor rm = Tensor::zeros({1}), rv = Tensor::ones({1});
    Var x = tape.constant(Tensor::ones({1, 1, 2, 2}));
    EXPECT_THROW(batchnorm2d(x, tape.constant(Tensor::ones({1})), tape.constant(Tensor::zeros({1})), {rm, rv}, true),
                 ShapeError);
}

TEST(Norm, LayerNormMatchesOracle) {
    Rng rng(12);
    for (int t = 0; t < 50; ++t) {
        const std::size_t r = 1 + rng.below(5), d = 2 + rng.below(6);
        const Tensor x = oracle::random({r, d}, rng, -3, 3), g = oracle::random({d}, rng), b = oracle::random({d}, rng);
        Tape tape;
        const Tensor y = layernorm(tape.constant(x), tape.constant(g), tape.constant(b)).value();
        EXPECT_LT(oracle::max_abs_diff(y, oracle::layernorm(x, g, b, kNormEps)), 1e-12);
    }
}

TEST(Rng, DeterministicAndSeedSensitive) {
    Rng a(42), b(42), c(43);
    for (int i = 0; i < 10; ++i) {
        const auto x = a.next_u64();
        EXPECT_EQ(x, b.next_u64());
        EXPECT_NE(x, c.next_u64());
    }
    EXPECT_NE(derive_seed(1, 2, 3), derive_seed(1, 2, 4));
    EXPECT_EQ(derive_seed(1, 2, 3), derive_seed(1, 2, 3));
}
