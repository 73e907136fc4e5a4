#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pyramidat/attack.hpp"
#include "pyramidat/checkpoint.hpp"
#include "pyramidat/dataio.hpp"
#include "pyramidat/optimizer.hpp"
#include "pyramidat/pyramid.hpp"
#include "pyramidat/schedule.hpp"
#include "pyramidat/vit.hpp"

namespace pyramidat {

enum class Regime { baseline, pixel_at, pyramid_at, random_pixel, random_pyramid };

struct TrainConfig {
    Regime regime = Regime::baseline;
    double lambda = 1.0;
    double weight_decay = 0.05;
    double base_lr = 1e-3;
    long long warmup_steps = 200;
    long long total_steps = 2000;
    int batch_size = 128;
    DropMode drop_mode = DropMode::matched;
    PyramidSpec attack = PyramidSpec::desk_defaults();
    PixelSpec pixel_attack{};
    std::uint64_t seed = 0;
    long long checkpoint_every = 0;  // 0 = final checkpoint only
    int threads = 1;                 // 1 = reference mode (strictly sequential)
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    bool reference_mode() const { return threads <= 1; }

    void validate() const {
        if (total_steps <= 0) throw ConfigError("total_steps must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw ConfigError("warmup_steps must lie in [0, total_steps)");
        if (batch_size <= 0) throw ConfigError("batch_size must be positive");
        if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be nonnegative");
        if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
        attack.validate();
    }
};

inline double lr_at(long long step, const TrainConfig& config) {
    return cosine_warmup_lr(step, config.warmup_steps, config.total_steps, config.base_lr);
}

struct MetricsRecord {
    long long step = 0;
    double clean_loss = 0.0;
    double adv_loss = 0.0;
    double total_loss = 0.0;
    double lr = 0.0;
    double clean_acc = 0.0;
    double adv_acc = 0.0;
    double wall_time_s = 0.0;
};

inline constexpr const char* kMetricsHeader =
    "step,clean_loss,adv_loss,total_loss,lr,clean_acc,adv_acc,wall_time_s";

std::string format_metrics_row(const MetricsRecord& m);

struct TrainState {
    ModelParams<float> params;
    AdamW opt;
    long long step = 0;
    std::uint64_t run_seed = 0;  // with the step counter this determines all
                                 // remaining randomness of the run
};

TrainState init_train_state(const ModelConfig& model_config, const TrainConfig& config);

/// Reporting-only weight decay term, 0.5 * wd * |theta|^2. The optimizer
/// applies decoupled decay; this value makes the recorded total_loss
/// decompose as clean + lambda * adv + decay.
double weight_decay_term(const TrainConfig& config, const ModelParams<float>& params);

/// One optimization step on an already-augmented batch:
/// samples the step's dropout configuration, generates the adversarial or
/// random perturbation when the regime requires it (through the matching
/// branch realization), accumulates clean + lambda * adversarial gradients,
/// and applies one AdamW update at lr_at(step). Attack gradients never touch
/// the parameters.
MetricsRecord train_step(TrainState& state, const ImageBatch<float>& batch,
                         const TrainConfig& config, MaskRecorder* clean_rec = nullptr,
                         MaskRecorder* attack_rec = nullptr,
                         MaskRecorder* adv_rec = nullptr);

struct TrainSinks {
    std::filesystem::path metrics_csv;   // appended per step when nonempty
    std::filesystem::path checkpoint_dir;  // ckpt_<step>.bin when nonempty
    std::function<void(const MetricsRecord&)> on_step;  // optional observer
};

/// Runs (or resumes) a training loop until config.total_steps. Batch order,
/// augmentation, dropout configurations and attack seeds derive from
/// (config.seed, step), so a resumed run reproduces the uninterrupted one
/// bitwise in reference mode.
std::vector<MetricsRecord> train_loop(TrainState& state, const TrainConfig& config,
                                      const DatasetHandle& dataset,
                                      const TrainSinks& sinks = {});

Container train_state_to_container(const TrainState& state);
TrainState train_state_from_container(const Container& c);

}  // namespace pyramidat
