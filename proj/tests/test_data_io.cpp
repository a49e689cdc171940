#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include "oracles.hpp"

using namespace s3tu;
namespace fs = std::filesystem;

namespace {

SynthConfig quick(std::size_t n = 4) {
    SynthConfig c;
    c.size = 64;
    c.n_samples = n;
    c.seed = 99;
    c.radius_min = 4;
    c.radius_max = 12;
    return c;
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::path(::testing::TempDir()) / ("s3tu_data_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

// Expected foreground area of one blob: the ellipse keeps area pi r^2 for any aspect, and
// a radial boundary 1 + sum a_k cos(..) multiplies it by 1 + sum a_k^2 / 2 on average.
// a_k ~ U(-I/K, I/K) gives E[a_k^2] = (I/K)^2 / 3; r ~ U(lo, hi) gives E[r^2] = (lo^2 + lo hi + hi^2) / 3.
double expected_blob_area(const SynthConfig& c) {
    const double k = SynthConfig::kHarmonics;
    const double er2 = (c.radius_min * c.radius_min + c.radius_min * c.radius_max + c.radius_max * c.radius_max) / 3.0;
    const double ea2 = (c.irregularity / k) * (c.irregularity / k) / 3.0;
    return std::numbers::pi * er2 * (1.0 + k * ea2 / 2.0);
}

double mean_fraction(const SynthConfig& c) {
    double fg = 0.0;
    for (const auto& s : generate_synthetic(c))
        for (double v : s.mask.data()) fg += v;
    return fg / static_cast<double>(c.n_samples * c.size * c.size);
}

}  // namespace

TEST(Synthetic, DeterministicAndIndexAddressable) {
    const auto a = generate_synthetic(quick()), b = generate_synthetic(quick());
    ASSERT_EQ(a.size(), 4u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].image, b[i].image);
        EXPECT_EQ(a[i].mask, b[i].mask);
        EXPECT_EQ(generate_sample(quick(), i).image, a[i].image);
    }
    SynthConfig other = quick();
    other.seed = 100;
    EXPECT_NE(generate_synthetic(other)[0].image, a[0].image);
}

TEST(Synthetic, ShapesRangesAndBinaryMasks) {
    for (const auto& s : generate_synthetic(quick(8))) {
        EXPECT_EQ(s.image.shape(), (Shape{1, 64, 64}));
        EXPECT_EQ(s.mask.shape(), s.image.shape());
        double fg = 0.0;
        for (double v : s.image.data()) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        for (double v : s.mask.data()) {
            EXPECT_TRUE(v == 0.0 || v == 1.0);
            fg += v;
        }
        EXPECT_GT(fg, 0.0);
        EXPECT_EQ(s.source.kind, SampleSource::Kind::Synthetic);
    }
}

TEST(Synthetic, NoiselessImageEqualsBlobIntensityOnMask) {
    SynthConfig c = quick(6);
    c.noise_sigma = 0.0;
    c.contrast_min = c.contrast_max = 1.0;
    c.background = 0.0;
    c.background_variation = 0.0;
    for (const auto& s : generate_synthetic(c))
        for (std::size_t i = 0; i < s.mask.numel(); ++i) EXPECT_EQ(s.image[i], s.mask[i]);
}

TEST(Synthetic, ForegroundFractionMatchesAnalyticArea) {
    SynthConfig c;
    c.size = 128;
    c.n_samples = 1000;
    c.seed = 7;
    c.count_min = c.count_max = 1;
    const double expect = expected_blob_area(c) / (128.0 * 128.0);
    const double got = mean_fraction(c);
    EXPECT_NEAR(got, expect, 0.2 * expect) << "realized " << got << " expected " << expect;
}

TEST(Synthetic, MultiBlobFractionWithinTwentyPercent) {
    SynthConfig c;
    c.size = 128;
    c.n_samples = 1000;
    c.seed = 8;
    c.radius_max = 12;
    // Mean blob count 2; overlaps only remove area, and are rare at this radius.
    const double expect = 2.0 * expected_blob_area(c) / (128.0 * 128.0);
    const double got = mean_fraction(c);
    EXPECT_NEAR(got, expect, 0.2 * expect) << "realized " << got << " expected " << expect;
}

TEST(Synthetic, InvalidRangesRejected) {
    SynthConfig c = quick();
    c.radius_max = 40;  // cannot fit a 64 pixel patch
    EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
    c = quick();
    c.count_min = 3;
    c.count_max = 2;
    EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
    c = quick();
    c.contrast_max = 1.5;
    EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
    c = quick();
    c.noise_sigma = -1;
    EXPECT_THROW(generate_synthetic(c), std::invalid_argument);
}

TEST(Synthetic, ConfigJsonRoundTrip) {
    SynthConfig c = quick();
    c.irregularity = 0.3;
    const nlohmann::json j = c;
    const auto back = j.get<SynthConfig>();
    EXPECT_EQ(nlohmann::json(back), j);
}

TEST(Pgm, HandAuthoredFixture) {
    std::string bytes = "P5\n2 2\n255\n";
    for (int v : {0, 128, 255, 64}) bytes.push_back(static_cast<char>(v));
    std::istringstream is(bytes, std::ios::binary);
    const Tensor t = io::read_pgm(is);
    EXPECT_EQ(t.shape(), (Shape{1, 2, 2}));
    EXPECT_EQ(t[0], 0.0);
    EXPECT_EQ(t[1], 128.0 / 255.0);
    EXPECT_EQ(t[2], 1.0);
    EXPECT_EQ(t[3], 64.0 / 255.0);
}

TEST(Pgm, CommentsInHeaderAreSkipped) {
    std::string bytes = "P5\n# made by hand\n1 1\n255\n";
    bytes.push_back(static_cast<char>(51));
    std::istringstream is(bytes, std::ios::binary);
    EXPECT_EQ(io::read_pgm(is)[0], 51.0 / 255.0);
}

TEST(Pgm, RoundTripWithinQuantizationBound) {
    Rng rng(1);
    const Tensor t = oracle::random({1, 13, 17}, rng, 0.0, 1.0);
    const fs::path dir = scratch("roundtrip");
    io::save_pgm(t, (dir / "a.pgm").string());
    const Tensor back = io::load_pgm((dir / "a.pgm").string());
    ASSERT_EQ(back.shape(), t.shape());
    for (std::size_t i = 0; i < t.numel(); ++i) EXPECT_LE(std::abs(back[i] - t[i]), 1.0 / 510.0 + 1e-15);
    // Binary masks survive exactly.
    Tensor mask(Shape{1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) mask[i] = static_cast<double>(i % 3 == 0);
    io::save_pgm(mask, (dir / "m.pgm").string());
    EXPECT_EQ(io::load_mask((dir / "m.pgm").string()), mask);
    EXPECT_EQ(io::load_pgm((dir / "m.pgm").string()), mask);
}

TEST(Pgm, ZeroTensorGivesZeroPayload) {
    std::ostringstream os(std::ios::binary);
    io::write_pgm(os, Tensor::zeros({1, 3, 5}));
    const std::string s = os.str();
    const std::string header = "P5\n5 3\n255\n";
    ASSERT_EQ(s.size(), header.size() + 15);
    EXPECT_EQ(s.substr(0, header.size()), header);
    for (std::size_t i = header.size(); i < s.size(); ++i) EXPECT_EQ(s[i], '\0');
}

TEST(Pgm, RoundsHalfUp) {
    std::ostringstream os(std::ios::binary);
    io::write_pgm(os, Tensor(Shape{1, 1, 2}, std::vector<double>{0.5 / 255.0, 1.49 / 255.0}));
    const std::string s = os.str();
    EXPECT_EQ(static_cast<unsigned char>(s[s.size() - 2]), 1);
    EXPECT_EQ(static_cast<unsigned char>(s[s.size() - 1]), 1);
}

TEST(Pgm, MalformedInputsRejected) {
    auto parse = [](const std::string& s) {
        std::istringstream is(s, std::ios::binary);
        return io::read_pgm(is);
    };
    EXPECT_THROW(parse("P2\n1 1\n255\n0"), FormatError);
    EXPECT_THROW(parse("P5\nx 1\n255\n0"), FormatError);
    EXPECT_THROW(parse("P5\n1 1\n65535\n00"), FormatError);
    EXPECT_THROW(parse("P5\n0 1\n255\n"), FormatError);
    EXPECT_THROW(parse("P5\n2 2\n255\nab"), FormatError);
    EXPECT_THROW(io::load_pgm("/nonexistent.pgm"), FormatError);
    EXPECT_THROW(io::write_pgm(std::cout, Tensor::zeros({2, 2, 2})), ShapeError);
}

TEST(Preprocess, IdentityCropAndPad) {
    Rng rng(2);
    const Tensor same = oracle::random({1, 128, 128}, rng);
    EXPECT_EQ(preprocess(same, 128, 128), same);

    const Tensor big = oracle::random({1, 130, 130}, rng);
    const Tensor crop = preprocess(big, 128, 128);
    ASSERT_EQ(crop.shape(), (Shape{1, 128, 128}));
    for (std::size_t i = 0; i < 128; ++i)
        for (std::size_t j = 0; j < 128; ++j) EXPECT_EQ(crop.at({0, i, j}), big.at({0, i + 1, j + 1}));

    const Tensor small = oracle::random({1, 100, 100}, rng, 0.5, 1.0);
    const Tensor pad = preprocess(small, 128, 128);
    for (std::size_t i = 0; i < 128; ++i)
        for (std::size_t j = 0; j < 128; ++j) {
            const bool inside = i >= 14 && i < 114 && j >= 14 && j < 114;
            EXPECT_EQ(pad.at({0, i, j}), inside ? small.at({0, i - 14, j - 14}) : 0.0);
        }
}

TEST(Preprocess, MixedCropAndPadKeepsValues) {
    Rng rng(3);
    const Tensor x = oracle::random({1, 20, 6}, rng, 0.5, 1.0);
    const Tensor y = preprocess(x, 8, 8);
    ASSERT_EQ(y.shape(), (Shape{1, 8, 8}));
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) {
            const bool inside = j >= 1 && j < 7;
            EXPECT_EQ(y.at({0, i, j}), inside ? x.at({0, i + 6, j - 1}) : 0.0);
        }
}

TEST(Manifest, WriteThenLoadRoundTrip) {
    const auto samples = generate_synthetic(quick(3));
    const fs::path dir = scratch("manifest");
    const std::string path = io::write_dataset(samples, dir.string());
    const auto back = io::load_manifest(path);
    ASSERT_EQ(back.size(), 3u);
    for (std::size_t i = 0; i < 3; ++i) {
        EXPECT_EQ(back[i].id, samples[i].id);
        EXPECT_EQ(back[i].mask, samples[i].mask);
        EXPECT_EQ(back[i].source.kind, SampleSource::Kind::File);
        for (std::size_t k = 0; k < samples[i].image.numel(); ++k)
            EXPECT_LE(std::abs(back[i].image[k] - samples[i].image[k]), 1.0 / 510.0 + 1e-15);
    }
}

TEST(Manifest, BadManifestsRejected) {
    const fs::path dir = scratch("bad_manifest");
    auto write = [&](const std::string& name, const std::string& text) {
        std::ofstream(dir / name) << text;
        return (dir / name).string();
    };
    EXPECT_THROW(io::load_manifest(write("a.json", "{not json")), FormatError);
    EXPECT_THROW(io::load_manifest(write("b.json", "{}")), FormatError);
    EXPECT_THROW(io::load_manifest(write("c.json", "[{\"id\": \"x\"}]")), FormatError);
    EXPECT_THROW(io::load_manifest(write("d.json", "[{\"id\": \"x\", \"image_path\": \"no.pgm\", \"mask_path\": \"no.pgm\"}]")),
                 FormatError);
}

TEST(StackSamples, BuildsBatchesAndChecksShapes) {
    auto samples = generate_synthetic(quick(3));
    const Tensor batch = stack_samples(samples, {2, 0}, false);
    EXPECT_EQ(batch.shape(), (Shape{2, 1, 64, 64}));
    EXPECT_TRUE(std::equal(samples[2].image.data().begin(), samples[2].image.data().end(), batch.data().begin()));
    EXPECT_THROW(stack_samples(samples, {}, false), ShapeError);
    samples[1].mask = Tensor::zeros({1, 32, 32});
    EXPECT_THROW(stack_samples(samples, {0, 1}, true), ShapeError);
}
