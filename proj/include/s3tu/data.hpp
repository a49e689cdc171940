#pragma once

#include <cctype>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"
#include "s3tu/rng.hpp"
#include "s3tu/tensor.hpp"

// Synthetic nodule-like patches, PGM image I/O, dataset manifests and preprocessing.

namespace s3tu {

struct SampleSource {
    enum class Kind { Synthetic, File } kind = Kind::Synthetic;
    std::uint64_t seed = 0;  // synthetic: per-sample seed
    std::string path;        // file: image path
};

/// One image/mask pair. Both are [1, H, W]; the image lies in [0, 1], the mask in {0, 1}.
struct SamplePair {
    std::string id;
    Tensor image;
    Tensor mask;
    SampleSource source;
};

struct SynthConfig {
    std::size_t size = 128;
    std::size_t n_samples = 100;
    std::uint64_t seed = 0;
    std::size_t count_min = 1, count_max = 3;       // blobs per sample
    double radius_min = 4.0, radius_max = 20.0;     // mean radius in pixels
    double contrast_min = 0.3, contrast_max = 0.6;  // blob intensity above background
    double noise_sigma = 0.05;
    double irregularity = 0.15;          // bound on the relative radial deviation (sum of harmonic amplitudes)
    double background = 0.2;            // mean background level
    double background_variation = 0.1;  // amplitude of the smooth background field

    static constexpr double kMaxAspect = 1.25;
    static constexpr int kHarmonics = 4;  // harmonics 2..5

    /// Largest distance from a blob centre to its boundary.
    double max_extent() const { return radius_max * kMaxAspect * (1.0 + irregularity); }

    void validate() const {
        std::vector<std::string> bad;
        if (size < 8) bad.emplace_back("size must be at least 8");
        if (count_min == 0 || count_min > count_max) bad.emplace_back("blob count range must satisfy 1 <= min <= max");
        if (!(radius_min > 0.0 && radius_min <= radius_max)) bad.emplace_back("radius range must satisfy 0 < min <= max");
        if (!(contrast_min >= 0.0 && contrast_min <= contrast_max && contrast_max <= 1.0))
            bad.emplace_back("contrast range must satisfy 0 <= min <= max <= 1");
        if (!(noise_sigma >= 0.0)) bad.emplace_back("noise_sigma must be non-negative");
        if (!(irregularity >= 0.0 && irregularity < 0.5)) bad.emplace_back("irregularity must lie in [0, 0.5)");
        if (!(background >= 0.0 && background <= 1.0)) bad.emplace_back("background must lie in [0, 1]");
        if (!(background_variation >= 0.0)) bad.emplace_back("background_variation must be non-negative");
        if (size >= 8 && !(2.0 * max_extent() + 2.0 <= static_cast<double>(size)))
            bad.push_back("blobs of radius " + std::to_string(radius_max) + " do not fit a " + std::to_string(size) +
                          " pixel patch");
        if (bad.empty()) return;
        std::string msg = "invalid synthetic config:";
        for (const auto& b : bad) msg += "\n  - " + b;
        throw std::invalid_argument(msg);
    }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
    j = {{"size", c.size},
         {"n_samples", c.n_samples},
         {"seed", c.seed},
         {"count_range", {c.count_min, c.count_max}},
         {"radius_range", {c.radius_min, c.radius_max}},
         {"contrast_range", {c.contrast_min, c.contrast_max}},
         {"noise_sigma", c.noise_sigma},
         {"irregularity", c.irregularity},
         {"background", c.background},
         {"background_variation", c.background_variation}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
    c.size = j.value("size", c.size);
    c.n_samples = j.value("n_samples", c.n_samples);
    c.seed = j.value("seed", c.seed);
    if (j.contains("count_range")) {
        c.count_min = j.at("count_range").at(0).get<std::size_t>();
        c.count_max = j.at("count_range").at(1).get<std::size_t>();
    }
    if (j.contains("radius_range")) {
        c.radius_min = j.at("radius_range").at(0).get<double>();
        c.radius_max = j.at("radius_range").at(1).get<double>();
    }
    if (j.contains("contrast_range")) {
        c.contrast_min = j.at("contrast_range").at(0).get<double>();
        c.contrast_max = j.at("contrast_range").at(1).get<double>();
    }
    c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
    c.irregularity = j.value("irregularity", c.irregularity);
    c.background = j.value("background", c.background);
    c.background_variation = j.value("background_variation", c.background_variation);
}

/// A star-convex blob: an ellipse whose radius is modulated by harmonics 2..5.
struct Blob {
    double cy = 0, cx = 0;
    double radius = 0, aspect = 1, angle = 0;
    double amp[SynthConfig::kHarmonics] = {};
    double phase[SynthConfig::kHarmonics] = {};
    double contrast = 0;

    bool contains(double y, double x) const {
        const double dy = y - cy, dx = x - cx;
        const double c = std::cos(angle), s = std::sin(angle);
        const double u = (c * dx + s * dy) / (radius * aspect);
        const double v = (-s * dx + c * dy) * aspect / radius;
        const double rho = std::hypot(u, v);
        const double theta = std::atan2(v, u);
        double bound = 1.0;
        for (int k = 0; k < SynthConfig::kHarmonics; ++k) bound += amp[k] * std::cos((k + 2) * theta + phase[k]);
        return rho <= bound;
    }
};

/// One sample; a pure function of (cfg, index).
inline SamplePair generate_sample(const SynthConfig& cfg, std::size_t index) {
    const std::uint64_t seed = derive_seed(cfg.seed, 0x73796e7468ULL, index);
    Rng rng(seed);
    const std::size_t n = cfg.size;
    const double extent_scale = SynthConfig::kMaxAspect * (1.0 + cfg.irregularity);

    const auto count = static_cast<std::size_t>(
        rng.integer(static_cast<long long>(cfg.count_min), static_cast<long long>(cfg.count_max)));
    std::vector<Blob> blobs(count);
    for (auto& b : blobs) {
        b.radius = rng.uniform(cfg.radius_min, cfg.radius_max);
        b.aspect = std::exp(rng.uniform(-std::log(SynthConfig::kMaxAspect), std::log(SynthConfig::kMaxAspect)));
        b.angle = rng.uniform(0.0, std::numbers::pi);
        for (int k = 0; k < SynthConfig::kHarmonics; ++k) {
            b.amp[k] = rng.uniform(-cfg.irregularity, cfg.irregularity) / SynthConfig::kHarmonics;
            b.phase[k] = rng.uniform(0.0, 2.0 * std::numbers::pi);
        }
        const double margin = b.radius * extent_scale + 0.5;
        b.cy = rng.uniform(margin, static_cast<double>(n) - 1.0 - margin);
        b.cx = rng.uniform(margin, static_cast<double>(n) - 1.0 - margin);
        b.contrast = rng.uniform(cfg.contrast_min, cfg.contrast_max);
    }

    const double fy = rng.uniform(0.5, 2.0) * std::numbers::pi / static_cast<double>(n);
    const double fx = rng.uniform(0.5, 2.0) * std::numbers::pi / static_cast<double>(n);
    const double py = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double px = rng.uniform(0.0, 2.0 * std::numbers::pi);

    SamplePair s;
    s.id = "synth_" + std::to_string(index);
    s.source = {SampleSource::Kind::Synthetic, seed, {}};
    s.image = Tensor(Shape{1, n, n});
    s.mask = Tensor(Shape{1, n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double blob = 0.0;
            bool inside = false;
            for (const auto& b : blobs)
                if (b.contains(static_cast<double>(i), static_cast<double>(j))) {
                    inside = true;
                    blob = std::max(blob, b.contrast);
                }
            const double bg = cfg.background + cfg.background_variation * std::sin(fy * static_cast<double>(i) + py) *
                                                   std::cos(fx * static_cast<double>(j) + px);
            const double noise = cfg.noise_sigma > 0.0 ? cfg.noise_sigma * rng.normal() : 0.0;
            s.image[i * n + j] = std::clamp(bg + blob + noise, 0.0, 1.0);
            s.mask[i * n + j] = inside ? 1.0 : 0.0;
        }
    return s;
}

inline std::vector<SamplePair> generate_synthetic(const SynthConfig& cfg) {
    cfg.validate();
    std::vector<SamplePair> out;
    out.reserve(cfg.n_samples);
    for (std::size_t i = 0; i < cfg.n_samples; ++i) out.push_back(generate_sample(cfg, i));
    return out;
}

// ---------------------------------------------------------------------------
// PGM (P5, maxval 255). Pixel v maps to v / 255.

namespace io {

inline Tensor read_pgm(std::istream& is, const std::string& what = "pgm") {
    auto skip = [&] {
        for (;;) {
            const int c = is.peek();
            if (c == '#') {
                std::string line;
                std::getline(is, line);
            } else if (c != EOF && std::isspace(c)) {
                is.get();
            } else {
                return;
            }
        }
    };
    auto number = [&](const char* field) {
        skip();
        std::size_t v = 0;
        bool any = false;
        while (is.peek() != EOF && std::isdigit(is.peek())) {
            v = v * 10 + static_cast<std::size_t>(is.get() - '0');
            any = true;
            if (v > (1u << 20)) throw FormatError(what + ": implausible " + field);
        }
        if (!any) throw FormatError(what + ": malformed header, expected " + field);
        return v;
    };
    char magic[2];
    if (!is.read(magic, 2) || magic[0] != 'P' || magic[1] != '5')
        throw FormatError(what + ": wrong magic, expected binary PGM (P5)");
    const std::size_t w = number("width");
    const std::size_t h = number("height");
    const std::size_t maxval = number("maxval");
    if (w == 0 || h == 0) throw FormatError(what + ": zero image dimension");
    if (maxval != 255) throw FormatError(what + ": maxval " + std::to_string(maxval) + " unsupported (expected 255)");
    if (!std::isspace(is.get())) throw FormatError(what + ": malformed header, missing separator before pixels");
    std::vector<unsigned char> bytes(w * h);
    if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
        throw FormatError(what + ": truncated pixel data");
    Tensor t(Shape{1, h, w});
    for (std::size_t i = 0; i < bytes.size(); ++i) t[i] = static_cast<double>(bytes[i]) / 255.0;
    return t;
}

/// Writes a [H, W] or [1, H, W] tensor; values are clamped to [0, 1] and rounded half-up.
inline void write_pgm(std::ostream& os, const Tensor& t) {
    if (!(t.rank() == 2 || (t.rank() == 3 && t.dim(0) == 1)))
        throw ShapeError("write_pgm: expected [H, W] or [1, H, W], got " + to_string(t.shape()));
    const std::size_t h = t.dim(t.rank() - 2), w = t.dim(t.rank() - 1);
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::vector<unsigned char> bytes(t.numel());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<unsigned char>(std::floor(std::clamp(t[i], 0.0, 1.0) * 255.0 + 0.5));
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw FormatError("write_pgm: stream failure");
}

inline Tensor load_pgm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open " + path);
    return read_pgm(is, path);
}

inline void save_pgm(const Tensor& t, const std::string& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    write_pgm(os, t);
}

/// Masks are binarized at 0.5 on load.
inline Tensor load_mask(const std::string& path) {
    Tensor m = load_pgm(path);
    for (auto& v : m.data()) v = v >= 0.5 ? 1.0 : 0.0;
    return m;
}

/// Manifest: JSON array of {id, image_path, mask_path}; relative paths resolve against the
/// manifest's directory.
inline std::vector<SamplePair> load_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw FormatError("cannot open manifest " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(is);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError("manifest " + path + ": " + e.what());
    }
    if (!j.is_array()) throw FormatError("manifest " + path + ": expected a JSON array");
    const auto base = std::filesystem::path(path).parent_path();
    std::vector<SamplePair> out;
    for (const auto& entry : j) {
        std::string id, image, mask;
        try {
            id = entry.at("id").get<std::string>();
            image = entry.at("image_path").get<std::string>();
            mask = entry.at("mask_path").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("manifest " + path + ": bad entry: " + e.what());
        }
        auto resolve = [&](const std::string& p) {
            std::filesystem::path fp(p);
            return (fp.is_absolute() ? fp : base / fp).string();
        };
        SamplePair s;
        s.id = id;
        s.image = load_pgm(resolve(image));
        s.mask = load_mask(resolve(mask));
        if (s.image.shape() != s.mask.shape())
            throw FormatError("manifest " + path + ": sample " + id + " image " + to_string(s.image.shape()) +
                              " and mask " + to_string(s.mask.shape()) + " differ");
        s.source = {SampleSource::Kind::File, 0, resolve(image)};
        out.push_back(std::move(s));
    }
    return out;
}

/// Writes <dir>/<id>_image.pgm, <dir>/<id>_mask.pgm and <dir>/manifest.json.
inline std::string write_dataset(const std::vector<SamplePair>& samples, const std::string& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = nlohmann::json::array();
    for (const auto& s : samples) {
        const std::string image = s.id + "_image.pgm", mask = s.id + "_mask.pgm";
        save_pgm(s.image, (std::filesystem::path(dir) / image).string());
        save_pgm(s.mask, (std::filesystem::path(dir) / mask).string());
        manifest.push_back({{"id", s.id}, {"image_path", image}, {"mask_path", mask}});
    }
    const std::string path = (std::filesystem::path(dir) / "manifest.json").string();
    std::ofstream os(path);
    if (!os) throw FormatError("cannot open " + path + " for writing");
    os << manifest.dump(2) << '\n';
    return path;
}

}  // namespace io

/// Center crop or symmetric zero pad of the last two axes to (height, width). When the
/// difference is odd the extra row/column goes to the bottom/right.
inline Tensor preprocess(const Tensor& image, std::size_t height, std::size_t width) {
    if (image.rank() < 2) throw ShapeError("preprocess: expected [..., H, W], got " + to_string(image.shape()));
    const std::size_t r = image.rank(), h = image.dim(r - 2), w = image.dim(r - 1);
    const std::size_t planes = image.numel() / (h * w);
    Shape out_shape = image.shape();
    out_shape[r - 2] = height;
    out_shape[r - 1] = width;
    Tensor out(out_shape);
    // Offsets of the output window in input coordinates (negative when padding).
    const long oy = (static_cast<long>(h) - static_cast<long>(height)) / 2;
    const long ox = (static_cast<long>(w) - static_cast<long>(width)) / 2;
    const long fy = h >= height ? oy : -static_cast<long>((height - h) / 2);
    const long fx = w >= width ? ox : -static_cast<long>((width - w) / 2);
    for (std::size_t p = 0; p < planes; ++p)
        for (std::size_t i = 0; i < height; ++i) {
            const long si = static_cast<long>(i) + fy;
            if (si < 0 || si >= static_cast<long>(h)) continue;
            for (std::size_t j = 0; j < width; ++j) {
                const long sj = static_cast<long>(j) + fx;
                if (sj < 0 || sj >= static_cast<long>(w)) continue;
                out[(p * height + i) * width + j] = image[(p * h + static_cast<std::size_t>(si)) * w + static_cast<std::size_t>(sj)];
            }
        }
    return out;
}

/// Stacks [1, H, W] samples (images or masks) into [N, 1, H, W].
inline Tensor stack_samples(const std::vector<SamplePair>& samples, const std::vector<std::size_t>& order,
                            bool masks) {
    if (order.empty()) throw ShapeError("stack_samples: empty batch");
    const Tensor& first = masks ? samples[order[0]].mask : samples[order[0]].image;
    Shape shape{order.size()};
    shape.insert(shape.end(), first.shape().begin(), first.shape().end());
    Tensor out(shape);
    const std::size_t per = first.numel();
    for (std::size_t b = 0; b < order.size(); ++b) {
        const Tensor& t = masks ? samples[order[b]].mask : samples[order[b]].image;
        if (t.shape() != first.shape())
            throw ShapeError("stack_samples: sample " + samples[order[b]].id + " has shape " + to_string(t.shape()) +
                             ", expected " + to_string(first.shape()));
        std::copy(t.data().begin(), t.data().end(), out.data().begin() + b * per);
    }
    return out;
}

}  // namespace s3tu
