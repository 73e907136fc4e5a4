#include "pyramidat/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

namespace pyramidat {

std::string format_metrics_row(const MetricsRecord& m) {
    char buf[320];
    std::snprintf(buf, sizeof(buf), "%lld,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.6f", m.step,
                  m.clean_loss, m.adv_loss, m.total_loss, m.lr, m.clean_acc, m.adv_acc,
                  m.wall_time_s);
    return std::string(buf);
}

TrainState init_train_state(const ModelConfig& model_config, const TrainConfig& config) {
    config.validate();
    TrainState state;
    state.params = init_params<float>(model_config, config.seed);
    state.opt.beta1 = config.adam_beta1;
    state.opt.beta2 = config.adam_beta2;
    state.opt.eps = config.adam_eps;
    state.opt.weight_decay = config.weight_decay;
    state.opt.init(state.params.size());
    state.step = 0;
    state.run_seed = config.seed;
    return state;
}

double weight_decay_term(const TrainConfig& config, const ModelParams<float>& params) {
    double sq = 0.0;
    for (float v : params.values) sq += static_cast<double>(v) * v;
    return 0.5 * config.weight_decay * sq;
}

namespace {

// Generates the step's perturbed batch for adversarial/random regimes.
// Returns the plain pixels tensor fed to the adversarial branch.
Tensor<float> make_adversarial_input(const TrainState& state, const ImageBatch<float>& batch,
                                     const TrainConfig& config, const DropConfig& drop,
                                     std::uint64_t step_seed, double* attack_loss0,
                                     MaskRecorder* attack_rec) {
    const DropRealization attack_drop = drop.realize(Branch::attack);
    const std::uint64_t attack_seed = key_stream(step_seed, "attack");
    PyramidSpec spec;
    switch (config.regime) {
        case Regime::pixel_at:
            spec = config.pixel_attack.as_pyramid();
            break;
        case Regime::random_pixel: {
            PixelSpec p = config.pixel_attack;
            p.random_mode = RandomMode::random_sign;
            spec = p.as_pyramid();
            break;
        }
        case Regime::pyramid_at:
            spec = config.attack;
            break;
        case Regime::random_pyramid:
            spec = config.attack;
            spec.random_mode = RandomMode::random_sign;
            break;
        case Regime::baseline:
            throw StructureError("baseline regime has no adversarial branch");
    }
    auto result = pgd_pyramid_attack(state.params, attack_drop, batch, spec, attack_seed,
                                     config.threads, attack_rec);
    if (attack_loss0) *attack_loss0 = result.per_step_loss.front();
    return std::move(result.perturbed.pixels);
}

}  // namespace

MetricsRecord train_step(TrainState& state, const ImageBatch<float>& batch,
                         const TrainConfig& config, MaskRecorder* clean_rec,
                         MaskRecorder* attack_rec, MaskRecorder* adv_rec) {
    const auto t0 = std::chrono::steady_clock::now();
    const int B = batch.batch_size();
    const std::uint64_t step_seed =
        key_stream(config.seed, "train_step", static_cast<std::uint64_t>(state.step));
    const DropConfig drop =
        sample_drop_config(state.params.config, config.drop_mode, step_seed);

    Gradients<float> grads(state.params.size());
    const auto clean = forward_backward<float>(state.params, batch.pixels, batch.labels,
                                        drop.realize(Branch::clean), GradKind::params_only,
                                        &grads, nullptr, clean_rec, config.threads);

    MetricsRecord m;
    m.step = state.step;
    m.lr = lr_at(state.step, config);
    m.clean_loss = clean.mean_loss;
    m.clean_acc = static_cast<double>(clean.n_correct) / B;

    if (config.regime != Regime::baseline) {
        Tensor<float> adv_pixels =
            make_adversarial_input(state, batch, config, drop, step_seed, nullptr, attack_rec);
        const auto adv = forward_backward<float>(
            state.params, adv_pixels, batch.labels, drop.realize(Branch::adversarial),
            GradKind::params_only, &grads, nullptr, adv_rec, config.threads,
            static_cast<float>(config.lambda));
        m.adv_loss = adv.mean_loss;
        m.adv_acc = static_cast<double>(adv.n_correct) / B;
    }

    m.total_loss = m.clean_loss + config.lambda * m.adv_loss +
                   weight_decay_term(config, state.params);
    if (!std::isfinite(m.total_loss)) {
        char buf[256];
        std::snprintf(buf, sizeof(buf),
                      "non-finite loss at step %lld (lr=%.6g clean=%.6g adv=%.6g)", state.step,
                      m.lr, m.clean_loss, m.adv_loss);
        throw NumericError(buf);
    }

    state.opt.step(state.params.values, grads.values, m.lr);
    ++state.step;

    if (config.reference_mode()) {
        m.wall_time_s = 0.0;  // keeps reference-mode metrics bit-reproducible
    } else {
        m.wall_time_s =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return m;
}

Container train_state_to_container(const TrainState& state) {
    Container c;
    c.config = state.params.config;
    c.arrays = params_to_arrays(state.params);
    c.arrays.push_back(NamedArray{"opt/m", {static_cast<int>(state.opt.m.size())},
                                  {state.opt.m.begin(), state.opt.m.end()}});
    c.arrays.push_back(NamedArray{"opt/v", {static_cast<int>(state.opt.v.size())},
                                  {state.opt.v.begin(), state.opt.v.end()}});
    c.meta["step"] = state.step;
    c.meta["opt_t"] = state.opt.t;
    c.meta["run_seed"] = state.run_seed;
    c.meta["opt_beta1"] = state.opt.beta1;
    c.meta["opt_beta2"] = state.opt.beta2;
    c.meta["opt_eps"] = state.opt.eps;
    c.meta["opt_weight_decay"] = state.opt.weight_decay;
    return c;
}

TrainState train_state_from_container(const Container& c) {
    TrainState state;
    state.params = params_from_container(c);
    state.step = c.meta.value("step", 0LL);
    state.run_seed = c.meta.value("run_seed", 0ULL);
    state.opt.t = c.meta.value("opt_t", state.step);
    state.opt.beta1 = c.meta.value("opt_beta1", 0.9);
    state.opt.beta2 = c.meta.value("opt_beta2", 0.999);
    state.opt.eps = c.meta.value("opt_eps", 1e-8);
    state.opt.weight_decay = c.meta.value("opt_weight_decay", 0.0);
    const NamedArray* m = c.find("opt/m");
    const NamedArray* v = c.find("opt/v");
    if (m && v && m->data.size() == state.params.size() &&
        v->data.size() == state.params.size()) {
        state.opt.m.assign(m->data.begin(), m->data.end());
        state.opt.v.assign(v->data.begin(), v->data.end());
    } else {
        state.opt.init(state.params.size());
    }
    return state;
}

std::vector<MetricsRecord> train_loop(TrainState& state, const TrainConfig& config,
                                      const DatasetHandle& dataset, const TrainSinks& sinks) {
    config.validate();
    if (dataset.n_train() <= 0) throw ConfigError("training split is empty");
    BatchStream stream(dataset, /*train_split=*/true, config.batch_size, config.seed);
    const int per_epoch = stream.batches_per_epoch();
    if (per_epoch <= 0)
        throw ConfigError("batch_size larger than the training split");

    std::ofstream csv;
    if (!sinks.metrics_csv.empty()) {
        const bool fresh = state.step == 0 || !std::filesystem::exists(sinks.metrics_csv);
        csv.open(sinks.metrics_csv, fresh ? std::ios::trunc : std::ios::app);
        if (!csv) throw DataError("cannot open metrics file: " + sinks.metrics_csv.string());
        if (fresh) csv << kMetricsHeader << "\n";
    }
    const auto save_ckpt = [&](long long step) {
        if (sinks.checkpoint_dir.empty()) return;
        std::filesystem::create_directories(sinks.checkpoint_dir);
        save_container(sinks.checkpoint_dir / ("ckpt_" + std::to_string(step) + ".bin"),
                       train_state_to_container(state));
    };

    std::vector<MetricsRecord> records;
    records.reserve(static_cast<std::size_t>(config.total_steps - state.step));
    while (state.step < config.total_steps) {
        const long long epoch = state.step / per_epoch;
        const int pos = static_cast<int>(state.step % per_epoch);
        ImageBatch<float> batch = stream.get(epoch, pos);
        batch = augment(batch, key_stream(config.seed, "augment",
                                          static_cast<std::uint64_t>(state.step)));
        MetricsRecord m = train_step(state, batch, config);
        if (csv.is_open()) csv << format_metrics_row(m) << "\n";
        if (sinks.on_step) sinks.on_step(m);
        records.push_back(m);
        if (config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 &&
            state.step < config.total_steps)
            save_ckpt(state.step);
    }
    save_ckpt(state.step);
    return records;
}

}  // namespace pyramidat
