// Trains a small S3TU-Net on synthetic nodules for a few epochs, reports validation
// metrics and writes one predicted mask next to its image and ground truth.
//
//   ./quickstart [output_dir] [epochs]

#include <cstdio>
#include <cstdlib>
#include <filesystem>

#include "s3tu/s3tu.hpp"

using namespace s3tu;

int main(int argc, char** argv) {
    const std::filesystem::path out = argc > 1 ? argv[1] : "quickstart_out";
    const std::size_t epochs = argc > 2 ? std::strtoul(argv[2], nullptr, 10) : 3;
    std::filesystem::create_directories(out);

    SynthConfig data_cfg;
    data_cfg.size = 32;
    data_cfg.n_samples = 48;
    data_cfg.seed = 1;
    data_cfg.radius_min = 3;
    data_cfg.radius_max = 7;
    auto [train_set, val] = split_validation(generate_synthetic(data_cfg), 0.25);

    ModelConfig model_cfg;
    model_cfg.base_channels = 4;
    model_cfg.input_h = model_cfg.input_w = 32;
    model_cfg.rm_svit.grid_h = model_cfg.rm_svit.grid_w = 2;
    model_cfg.rm_svit.heads = 2;
    model_cfg.dropblock = {3, 0.1};

    TrainConfig train_cfg;
    train_cfg.lr = 5e-3;
    train_cfg.batch_size = 8;
    train_cfg.epochs = epochs;
    train_cfg.seed = 1;

    const Model probe = Model::build(model_cfg, train_cfg.seed);
    std::printf("model: %zu trainable parameters; %zu train / %zu val samples\n", probe.params().trainable_count(),
                train_set.size(), val.size());

    const TrainResult res = train(model_cfg, train_cfg, train_set, val, [](const TrainLogRecord& r, double s) {
        std::printf("epoch %zu  loss %.4f  val DSC %.4f  val sensitivity %.4f  (%.1f s)\n", r.epoch, r.loss,
                    r.val->dsc, r.val->sensitivity, s);
    });

    const MetricReport report = evaluate(res.best, val);
    std::printf("best epoch %zu: DSC %.4f  mIoU %.4f  precision %.4f  sensitivity %.4f\n", res.log.best_epoch,
                report.dsc, report.miou, report.precision, report.sensitivity);

    const SamplePair& s = val.front();
    const Tensor probs = res.best.predict(s.image.reshaped({1, 1, 32, 32})).reshaped({1, 32, 32});
    Tensor mask(probs.shape());
    for (std::size_t i = 0; i < probs.numel(); ++i) mask[i] = probs[i] >= kThreshold ? 1.0 : 0.0;
    io::save_pgm(s.image, (out / "image.pgm").string());
    io::save_pgm(s.mask, (out / "truth.pgm").string());
    io::save_pgm(mask, (out / "prediction.pgm").string());
    io::save_checkpoint(res.best, (out / "model.s3ck").string());
    std::printf("wrote image.pgm, truth.pgm, prediction.pgm and model.s3ck to %s\n", out.string().c_str());
}
