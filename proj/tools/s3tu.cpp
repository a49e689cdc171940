// Command-line front end: train, eval, predict, gradcheck, synth.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "s3tu/s3tu.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace s3tu;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitNumerical = 2;

json read_json(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

void write_json(const json& j, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path);
    if (!os) throw std::invalid_argument("cannot write " + path.string());
    os << j.dump(2) << '\n';
}

template <typename T>
T config_from(const std::string& path) {
    try {
        return read_json(path).get<T>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
}

/// A manifest (JSON array) or a synthetic-data config (JSON object).
std::vector<SamplePair> load_data(const std::string& path, std::optional<std::uint64_t> seed) {
    const json j = read_json(path);
    if (j.is_array()) return io::load_manifest(path);
    if (!j.is_object()) throw std::invalid_argument(path + ": expected a manifest array or a synth config object");
    SynthConfig cfg;
    try {
        cfg = j.get<SynthConfig>();
    } catch (const json::exception& e) {
        throw std::invalid_argument(path + ": " + e.what());
    }
    if (seed) cfg.seed = *seed;
    return generate_synthetic(cfg);
}

struct Options {
    std::optional<std::uint64_t> seed;
    std::string model_config, train_config, data, val_data, out, checkpoint, report, image, probs, scope = "all";
    std::string config;
    double val_fraction = 0.2;
    std::size_t batch = 16;
    bool fit = false;
    bool quiet = false;
};

int cmd_train(const Options& o) {
    const auto model_cfg = config_from<ModelConfig>(o.model_config);
    auto train_cfg = config_from<TrainConfig>(o.train_config);
    if (o.seed) train_cfg.seed = *o.seed;
    std::vector<SamplePair> data = load_data(o.data, o.seed), val;
    if (!o.val_data.empty()) {
        val = load_data(o.val_data, o.seed);
    } else if (o.val_fraction > 0.0) {
        std::tie(data, val) = split_validation(std::move(data), o.val_fraction);
    }
    const fs::path out(o.out);
    fs::create_directories(out);
    TrainResult res = train(model_cfg, train_cfg, data, val, [&](const TrainLogRecord& r, double seconds) {
        if (o.quiet) return;
        std::printf("epoch %3zu  step %5zu  loss %.5f  lr %.3e  train_dsc %.4f", r.epoch, r.step, r.loss, r.lr,
                    r.train_dsc);
        if (r.val) std::printf("  val_dsc %.4f  val_sen %.4f", r.val->dsc, r.val->sensitivity);
        std::printf("  %.1fs\n", seconds);
        std::fflush(stdout);
    });
    io::save_checkpoint(res.best, (out / "checkpoint.s3ck").string());
    io::save_checkpoint(res.last, (out / "last.s3ck").string());
    write_json(res.log, out / "train_log.json");
    json timing = {{"epoch_seconds", res.epoch_seconds}};
    write_json(timing, out / "timing.json");
    std::printf("best epoch %zu, val DSC %.4f -> %s\n", res.log.best_epoch, res.log.best_dsc,
                (out / "checkpoint.s3ck").string().c_str());
    return kExitOk;
}

int cmd_eval(const Options& o) {
    const Model model = io::load_checkpoint(o.checkpoint);
    const auto data = load_data(o.data, o.seed);
    check_sizes(model.config(), data, "evaluation");
    const MetricReport report = evaluate(model, data, o.batch);
    if (!o.report.empty()) write_json(report, o.report);
    std::printf("n %zu  dsc %.4f  acc %.4f  miou %.4f  precision %.4f  sensitivity %.4f\n", report.n_samples,
                report.dsc, report.acc, report.miou, report.precision, report.sensitivity);
    return kExitOk;
}

int cmd_predict(const Options& o) {
    const Model model = io::load_checkpoint(o.checkpoint);
    const ModelConfig& cfg = model.config();
    Tensor image = io::load_pgm(o.image);
    if (image.dim(1) != cfg.input_h || image.dim(2) != cfg.input_w) {
        if (!o.fit)
            throw ShapeError("image " + o.image + " is " + std::to_string(image.dim(1)) + "x" +
                             std::to_string(image.dim(2)) + ", model expects " + std::to_string(cfg.input_h) + "x" +
                             std::to_string(cfg.input_w) + " (pass --fit to crop/pad)");
        image = preprocess(image, cfg.input_h, cfg.input_w);
    }
    const Tensor probs = model.predict(image.reshaped({1, 1, cfg.input_h, cfg.input_w}))
                             .reshaped({1, cfg.input_h, cfg.input_w});
    Tensor mask(probs.shape());
    for (std::size_t i = 0; i < probs.numel(); ++i) mask[i] = probs[i] >= kThreshold ? 1.0 : 0.0;
    const fs::path out(o.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    io::save_pgm(mask, out.string());
    const std::string probs_path = o.probs.empty() ? fs::path(out).replace_extension(".s3tu").string() : o.probs;
    io::save_tensor(probs, probs_path);
    std::printf("mask -> %s, probabilities -> %s\n", out.string().c_str(), probs_path.c_str());
    return kExitOk;
}

int cmd_gradcheck(const Options& o) {
    const auto specs = gradcases::registry();
    bool known = false;
    for (const auto& s : specs) known = known || scope_matches(s, o.scope);
    if (!known) throw std::invalid_argument("gradcheck: no case or group named '" + o.scope + "'");
    std::printf("%-18s %12s %7s %8s  %s\n", "case", "max_rel_err", "coords", "seconds", "status");
    bool ok = true;
    for (const auto& s : specs) {
        if (!scope_matches(s, o.scope)) continue;
        const GradResult r = run_gradcheck(s.make());
        ok = ok && r.passed;
        std::printf("%-18s %12.3e %7zu %8.3f  %s%s\n", r.name.c_str(), r.max_rel_error, r.coords, r.seconds,
                    r.passed ? "PASS" : "FAIL at ", r.passed ? "" : r.worst.c_str());
        std::fflush(stdout);
    }
    std::printf("%s (tolerance %.0e)\n", ok ? "all passed" : "FAILURES", kGradTolerance);
    return ok ? kExitOk : kExitNumerical;
}

int cmd_synth(const Options& o) {
    auto cfg = config_from<SynthConfig>(o.config);
    if (o.seed) cfg.seed = *o.seed;
    const std::string manifest = io::write_dataset(generate_synthetic(cfg), o.out);
    std::printf("%zu samples -> %s\n", cfg.n_samples, manifest.c_str());
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"S3TU-Net segmentation toolkit"};
    app.require_subcommand(1);
    Options o;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Global seed; overrides the seeds in the configs");

    auto* train = app.add_subcommand("train", "Train a model");
    train->add_option("--model-config", o.model_config, "Model config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--train-config", o.train_config, "Training config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--data", o.data, "Manifest or synth config JSON")->required()->check(CLI::ExistingFile);
    train->add_option("--val-data", o.val_data, "Separate validation data")->check(CLI::ExistingFile);
    train->add_option("--val-fraction", o.val_fraction, "Fraction of --data held out when --val-data is absent")
        ->check(CLI::Range(0.0, 0.99));
    train->add_option("--out", o.out, "Output directory")->required();
    train->add_flag("--quiet", o.quiet, "No per-epoch lines");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    eval->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    eval->add_option("--data", o.data, "Manifest or synth config JSON")->required()->check(CLI::ExistingFile);
    eval->add_option("--report", o.report, "MetricReport JSON output");
    eval->add_option("--batch", o.batch)->check(CLI::PositiveNumber);

    auto* predict = app.add_subcommand("predict", "Segment one PGM image");
    predict->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
    predict->add_option("--image", o.image)->required()->check(CLI::ExistingFile);
    predict->add_option("--out", o.out, "Mask PGM output")->required();
    predict->add_option("--probs", o.probs, "Probability tensor output (default: <out>.s3tu)");
    predict->add_flag("--fit", o.fit, "Center crop/pad the image to the model input size");

    auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
    gradcheck->add_option("--scope", o.scope, "Case name, group name or 'all'");

    auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
    synth->add_option("--config", o.config, "Synth config JSON")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", o.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }
    if (seed_opt->count() > 0) o.seed = seed;

    try {
        if (*train) return cmd_train(o);
        if (*eval) return cmd_eval(o);
        if (*predict) return cmd_predict(o);
        if (*gradcheck) return cmd_gradcheck(o);
        if (*synth) return cmd_synth(o);
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << '\n';
        return kExitNumerical;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    }
    return kExitUsage;
}
