#include <cstdio>
#include <filesystem>

#include "pyramidat/cli.hpp"

namespace pyramidat::cli {

int cmd_train(const RunConfig& config) {
    const std::filesystem::path out = config.out_dir();
    std::filesystem::create_directories(out);
    config.write_resolved(out / "resolved.cfg");

    const DatasetHandle data = config.load_data();
    const ModelConfig model_cfg = config.model_config();
    if (model_cfg.n_classes != data.n_classes)
        throw ConfigError("model.n_classes does not match the dataset");
    const TrainConfig train_cfg = config.train_config();

    TrainState state = init_train_state(model_cfg, train_cfg);
    TrainSinks sinks;
    sinks.metrics_csv = out / "metrics.csv";
    sinks.checkpoint_dir = out;
    const long long report_every = std::max(1LL, train_cfg.total_steps / 20);
    sinks.on_step = [&](const MetricsRecord& m) {
        if (m.step % report_every == 0 || m.step + 1 == train_cfg.total_steps)
            std::printf("step %lld/%lld  clean %.4f (acc %.3f)  adv %.4f  lr %.2e\n", m.step,
                        train_cfg.total_steps, m.clean_loss, m.clean_acc, m.adv_loss, m.lr);
    };
    train_loop(state, train_cfg, data, sinks);
    std::printf("done: %s\n", (out / ("ckpt_" + std::to_string(state.step) + ".bin")).c_str());
    return kExitOk;
}

}  // namespace pyramidat::cli
