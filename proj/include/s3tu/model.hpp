#pragma once

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "s3tu/blocks.hpp"
#include "s3tu/rm_svit.hpp"
#include "s3tu/s2_mlp_link.hpp"

namespace s3tu {

/// Which of the three contributed blocks are active. All off gives a plain U-Net.
struct BlockToggles {
    bool structured_conv = true;  // DWF-Conv / D2BR-Conv instead of plain double convs
    bool rm_svit = true;          // super-token transformer bottleneck instead of identity
    bool s2_link = true;          // S2-MLP Link on skips instead of identity
};

struct ModelConfig {
    std::size_t in_channels = 1;
    std::size_t base_channels = 16;
    std::size_t depth = 3;
    std::size_t input_h = 128;
    std::size_t input_w = 128;
    std::size_t lka_repeats = 1;
    RmSvitConfig rm_svit{};
    DropBlockParams dropblock{};
    BlockToggles blocks{};

    std::size_t channels_at(std::size_t level) const { return base_channels << level; }
    std::size_t height_at(std::size_t level) const { return input_h >> level; }
    std::size_t width_at(std::size_t level) const { return input_w >> level; }

    /// Every violated constraint, one per entry. Empty when the config is buildable.
    std::vector<std::string> violations() const {
        std::vector<std::string> out;
        if (in_channels == 0) out.emplace_back("in_channels must be positive");
        if (base_channels == 0) out.emplace_back("base_channels must be positive");
        if (depth != 3) out.emplace_back("depth is fixed at 3 downsamplings, got " + std::to_string(depth));
        if (input_h == 0 || input_w == 0 || input_h % 8 != 0 || input_w % 8 != 0)
            out.push_back("input size " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                          " must be divisible by 8");
        if (lka_repeats == 0) out.emplace_back("lka_repeats must be at least 1");
        if (blocks.rm_svit && input_h % 8 == 0 && input_w % 8 == 0) {
            const std::size_t bh = input_h / 8, bw = input_w / 8;
            if (rm_svit.grid_h == 0 || rm_svit.grid_w == 0 || bh % rm_svit.grid_h != 0 || bw % rm_svit.grid_w != 0)
                out.push_back("rm-svit grid " + std::to_string(rm_svit.grid_h) + "x" + std::to_string(rm_svit.grid_w) +
                              " must divide the bottleneck map " + std::to_string(bh) + "x" + std::to_string(bw));
            if (rm_svit.heads == 0 || (base_channels > 0 && channels_at(3) % rm_svit.heads != 0))
                out.push_back("rm-svit heads " + std::to_string(rm_svit.heads) + " must divide bottleneck channels " +
                              std::to_string(channels_at(3)));
        }
        if (blocks.structured_conv) {
            if (dropblock.block_size == 0 || dropblock.block_size % 2 == 0)
                out.emplace_back("dropblock block_size must be a positive odd number");
            if (!(dropblock.drop_prob >= 0.0 && dropblock.drop_prob < 1.0))
                out.emplace_back("dropblock drop_prob must lie in [0, 1)");
            const std::size_t smallest = std::min(input_h, input_w) / 8;
            if (dropblock.block_size > smallest)
                out.push_back("dropblock block_size " + std::to_string(dropblock.block_size) +
                              " exceeds the smallest D2BR feature map " + std::to_string(smallest));
        }
        return out;
    }

    void validate() const {
        auto v = violations();
        if (v.empty()) return;
        std::string msg = "invalid model config:";
        for (const auto& s : v) msg += "\n  - " + s;
        throw std::invalid_argument(msg);
    }
};

inline void to_json(nlohmann::json& j, const RmSvitConfig& c) {
    j = {{"grid", {c.grid_h, c.grid_w}}, {"n_iter", c.n_iter}, {"heads", c.heads},
         {"sparse", c.sparse}, {"detach_iterations", c.detach_iterations}};
}

inline void from_json(const nlohmann::json& j, RmSvitConfig& c) {
    if (j.contains("grid")) {
        c.grid_h = j.at("grid").at(0).get<std::size_t>();
        c.grid_w = j.at("grid").at(1).get<std::size_t>();
    }
    c.n_iter = j.value("n_iter", c.n_iter);
    c.heads = j.value("heads", c.heads);
    c.sparse = j.value("sparse", c.sparse);
    c.detach_iterations = j.value("detach_iterations", c.detach_iterations);
}

inline void to_json(nlohmann::json& j, const DropBlockParams& p) {
    j = {{"block_size", p.block_size}, {"drop_prob", p.drop_prob}};
}

inline void from_json(const nlohmann::json& j, DropBlockParams& p) {
    p.block_size = j.value("block_size", p.block_size);
    p.drop_prob = j.value("drop_prob", p.drop_prob);
}

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = {{"in_channels", c.in_channels},
         {"base_channels", c.base_channels},
         {"depth", c.depth},
         {"input_size", {c.input_h, c.input_w}},
         {"lka_repeats", c.lka_repeats},
         {"rm_svit", c.rm_svit},
         {"dropblock", c.dropblock},
         {"blocks",
          {{"structured_conv", c.blocks.structured_conv},
           {"rm_svit", c.blocks.rm_svit},
           {"s2_link", c.blocks.s2_link}}}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.base_channels = j.value("base_channels", c.base_channels);
    c.depth = j.value("depth", c.depth);
    if (j.contains("input_size")) {
        c.input_h = j.at("input_size").at(0).get<std::size_t>();
        c.input_w = j.at("input_size").at(1).get<std::size_t>();
    }
    c.lka_repeats = j.value("lka_repeats", c.lka_repeats);
    if (j.contains("rm_svit")) j.at("rm_svit").get_to(c.rm_svit);
    if (j.contains("dropblock")) j.at("dropblock").get_to(c.dropblock);
    if (j.contains("blocks")) {
        const auto& b = j.at("blocks");
        c.blocks.structured_conv = b.value("structured_conv", c.blocks.structured_conv);
        c.blocks.rm_svit = b.value("rm_svit", c.blocks.rm_svit);
        c.blocks.s2_link = b.value("s2_link", c.blocks.s2_link);
    }
}

/// Spatial shapes seen at each U level during a forward pass (encoder level k pairs with
/// decoder level k).
struct ForwardTrace {
    std::vector<Shape> encoder;     // levels 0..2 (skip sources) and 3 (bottleneck input)
    std::vector<Shape> decoder;     // levels 3 (after decoder head), 2, 1, 0
};

/// S3TU-Net: a U-shaped encoder/decoder with structured conv blocks, a super-token
/// transformer bottleneck and spatial-shift MLP skip connectors.
class Model {
public:
    static Model build(const ModelConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        Model m(cfg);
        Rng rng(derive_seed(seed, 0x6d6f64656cULL));
        m.declare(rng);
        return m;
    }

    const ModelConfig& config() const noexcept { return cfg_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    /// x: [N, in_channels, H, W] -> probabilities [N, 1, H, W].
    Var forward(Context& ctx, const Var& x, ForwardTrace* trace = nullptr) const {
        const Shape& s = x.shape();
        if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.input_h || s[3] != cfg_.input_w)
            throw ShapeError("model: expected input [N, " + std::to_string(cfg_.in_channels) + ", " +
                             std::to_string(cfg_.input_h) + ", " + std::to_string(cfg_.input_w) + "], got " +
                             to_string(s));
        std::vector<Var> skips;
        Var h = stem(ctx, x);
        skips.push_back(h);
        if (trace) trace->encoder.push_back(h.shape());
        for (std::size_t level = 1; level <= 3; ++level) {
            h = down(ctx, level, maxpool2x2(h));
            if (level < 3) skips.push_back(h);
            if (trace) trace->encoder.push_back(h.shape());
        }
        if (cfg_.blocks.rm_svit) h = bottleneck()(ctx, h);
        h = decoder_head(ctx, h);
        if (trace) trace->decoder.push_back(h.shape());
        for (std::size_t level = 3; level-- > 0;) {
            Var up = up_conv(level)(ctx, h);
            Var skip = skips[level];
            if (cfg_.blocks.s2_link) skip = link(level)(ctx, skip);
            h = up_block(ctx, level, concat({skip, up}, 1));
            if (trace) trace->decoder.push_back(h.shape());
        }
        return sigmoid(head()(ctx, h));
    }

    /// Eval-mode probabilities for a batch; no gradient tracking.
    Tensor predict(const Tensor& x) const {
        Tape tape;
        // Eval mode reads the running statistics but never writes them.
        Context ctx(tape, const_cast<ParamStore&>(params_), false, nullptr, false);
        return forward(ctx, tape.constant(x)).value();
    }

    // Sub-module descriptors (names follow the parameter naming scheme).
    DwfConv stem_dwf() const { return {"enc0.dwf", cfg_.in_channels, cfg_.base_channels, cfg_.lka_repeats}; }
    DoubleConv stem_plain() const { return {"enc0.plain", cfg_.in_channels, cfg_.base_channels}; }
    D2brConv down_d2br(std::size_t level) const {
        return {"down" + std::to_string(level) + ".d2br", cfg_.channels_at(level - 1), cfg_.channels_at(level),
                cfg_.dropblock};
    }
    DoubleConv down_plain(std::size_t level) const {
        return {"down" + std::to_string(level) + ".plain", cfg_.channels_at(level - 1), cfg_.channels_at(level)};
    }
    RmSvit bottleneck() const { return {"bottleneck.rmsvit", cfg_.channels_at(3), cfg_.rm_svit}; }
    DwfConv decoder_dwf() const { return {"dec0.dwf", cfg_.channels_at(3), cfg_.channels_at(3), cfg_.lka_repeats}; }
    DoubleConv decoder_plain() const { return {"dec0.plain", cfg_.channels_at(3), cfg_.channels_at(3)}; }
    UpConvLayer up_conv(std::size_t level) const {
        return {"up" + std::to_string(level) + ".tconv", cfg_.channels_at(level + 1), cfg_.channels_at(level)};
    }
    S2MlpLink link(std::size_t level) const { return {"skip" + std::to_string(level) + ".s2link", cfg_.channels_at(level)}; }
    D2brConv up_d2br(std::size_t level) const {
        return {"up" + std::to_string(level) + ".d2br", 2 * cfg_.channels_at(level), cfg_.channels_at(level),
                cfg_.dropblock};
    }
    DoubleConv up_plain(std::size_t level) const {
        return {"up" + std::to_string(level) + ".plain", 2 * cfg_.channels_at(level), cfg_.channels_at(level)};
    }
    ConvLayer head() const { return conv1x1("head.conv", cfg_.base_channels, 1); }

private:
    explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {}

    void declare(Rng& rng) {
        const bool sc = cfg_.blocks.structured_conv;
        sc ? stem_dwf().declare(params_, rng) : stem_plain().declare(params_, rng);
        for (std::size_t level = 1; level <= 3; ++level)
            sc ? down_d2br(level).declare(params_, rng) : down_plain(level).declare(params_, rng);
        if (cfg_.blocks.rm_svit) bottleneck().declare(params_, rng);
        sc ? decoder_dwf().declare(params_, rng) : decoder_plain().declare(params_, rng);
        for (std::size_t level = 3; level-- > 0;) {
            up_conv(level).declare(params_, rng);
            if (cfg_.blocks.s2_link) link(level).declare(params_, rng);
            sc ? up_d2br(level).declare(params_, rng) : up_plain(level).declare(params_, rng);
        }
        head().declare(params_, rng);
    }

    Var stem(Context& ctx, const Var& x) const {
        return cfg_.blocks.structured_conv ? stem_dwf()(ctx, x) : stem_plain()(ctx, x);
    }
    Var down(Context& ctx, std::size_t level, const Var& x) const {
        return cfg_.blocks.structured_conv ? down_d2br(level)(ctx, x) : down_plain(level)(ctx, x);
    }
    Var decoder_head(Context& ctx, const Var& x) const {
        return cfg_.blocks.structured_conv ? decoder_dwf()(ctx, x) : decoder_plain()(ctx, x);
    }
    Var up_block(Context& ctx, std::size_t level, const Var& x) const {
        return cfg_.blocks.structured_conv ? up_d2br(level)(ctx, x) : up_plain(level)(ctx, x);
    }

    ModelConfig cfg_;
    ParamStore params_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "S3CK", u32 version, u64 header length, JSON header (model config and
// tensor count), u32 tensor count, then per tensor: u32 name length, name bytes,
// u8 trainable flag, S3TU tensor record.

namespace io {

inline constexpr char kCheckpointMagic[4] = {'S', '3', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_checkpoint(std::ostream& os, const Model& model) {
    const auto& entries = model.params().entries();
    nlohmann::json header = {{"format", "s3tu-checkpoint"},
                             {"model_config", model.config()},
                             {"tensor_count", entries.size()}};
    const std::string text = header.dump();
    os.write(kCheckpointMagic, 4);
    write_le<std::uint32_t>(os, kCheckpointVersion);
    write_le<std::uint64_t>(os, text.size());
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    write_le<std::uint32_t>(os, static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
        write_le<std::uint8_t>(os, e.trainable ? 1 : 0);
        write_tensor(os, e.value);
    }
    if (!os) throw FormatError("write_checkpoint: stream failure");
}

inline Model read_checkpoint(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, kCheckpointMagic, 4) != 0)
        throw FormatError("checkpoint: bad magic (expected S3CK)");
    const auto version = read_le<std::uint32_t>(is, "checkpoint version");
    if (version != kCheckpointVersion)
        throw FormatError("checkpoint: unsupported version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    const auto header_len = read_le<std::uint64_t>(is, "checkpoint header length");
    if (header_len > (1u << 24)) throw FormatError("checkpoint: implausible header length");
    std::string text(header_len, '\0');
    if (!is.read(text.data(), static_cast<std::streamsize>(header_len)))
        throw FormatError("checkpoint: truncated header");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: corrupt JSON header: ") + e.what());
    }
    ModelConfig cfg;
    try {
        cfg = header.at("model_config").get<ModelConfig>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("checkpoint: bad model config: ") + e.what());
    }
    Model model = Model::build(cfg, 0);
    const auto count = read_le<std::uint32_t>(is, "checkpoint tensor count");
    if (count != model.params().size() || header.value("tensor_count", std::size_t{0}) != count)
        throw FormatError("checkpoint: holds " + std::to_string(count) + " tensors, model config expects " +
                          std::to_string(model.params().size()));
    std::vector<bool> seen(count, false);
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = read_le<std::uint32_t>(is, "tensor name length");
        if (len > 4096) throw FormatError("checkpoint: implausible tensor name length");
        std::string name(len, '\0');
        if (!is.read(name.data(), len)) throw FormatError("checkpoint: truncated tensor name");
        const auto trainable = read_le<std::uint8_t>(is, "trainable flag");
        Tensor t = read_tensor(is);
        if (!model.params().contains(name)) throw FormatError("checkpoint: unknown tensor " + name);
        auto& dst = model.params().at(name);
        if (dst.shape() != t.shape())
            throw FormatError("checkpoint: tensor " + name + " has shape " + to_string(t.shape()) + ", expected " +
                              to_string(dst.shape()));
        if ((trainable != 0) != model.params().entry(name).trainable)
            throw FormatError("checkpoint: trainable flag mismatch for " + name);
        dst = std::move(t);
    }
    if (is.peek() != std::char_traits<char>::eof()) throw FormatError("checkpoint: trailing bytes after last tensor");
    return model;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw FormatError("cannot open " + tmp + " for writing");
        write_checkpoint(os, model);
    }
    std::filesystem::rename(tmp, path);
}

inline Model load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open checkpoint " + path);
    return read_checkpoint(is);
}

}  // namespace io
}  // namespace s3tu
