#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "pyramidat/trainer.hpp"

using namespace pyramidat;

namespace {

ModelConfig small_model(int n_classes = 2) {
    ModelConfig c;
    c.image_size = 32;
    c.patch_size = 4;
    c.embed_dim = 32;
    c.depth = 2;
    c.n_heads = 2;
    c.mlp_dim = 64;
    c.n_classes = n_classes;
    c.dropout_p = 0.1f;
    c.stochdepth_p = 0.1f;
    return c;
}

TrainConfig small_train(Regime regime, std::uint64_t seed = 1) {
    TrainConfig t;
    t.regime = regime;
    t.base_lr = 1e-3;
    t.warmup_steps = 0;  // lr > 0 from the first step
    t.total_steps = 10;
    t.batch_size = 16;
    t.seed = seed;
    t.attack = PyramidSpec::desk_defaults();
    return t;
}

DatasetHandle toy_data(int n_train = 64, int n_eval = 32) {
    SyntheticOptions opt;
    opt.n_train = n_train;
    opt.n_eval = n_eval;
    opt.seed = 3;
    return make_synthetic_dataset(opt);
}

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("cosine schedule with linear warmup") {
    TrainConfig t;
    t.base_lr = 0.5;
    t.warmup_steps = 100;
    t.total_steps = 1100;
    CHECK(lr_at(0, t) == 0.0);
    CHECK(lr_at(50, t) == doctest::Approx(0.25));
    CHECK(lr_at(100, t) == doctest::Approx(0.5));
    // midpoint of the decay phase: base * cos^2(pi/4) = base / 2
    CHECK(lr_at((100 + 1100) / 2, t) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(lr_at(1100, t) == doctest::Approx(0.0));
    // monotone decay after warmup
    double prev = lr_at(100, t);
    for (long long s = 101; s <= 1100; s += 13) {
        const double cur = lr_at(s, t);
        CHECK(cur <= prev + 1e-15);
        prev = cur;
    }
}

TEST_CASE("train config validation") {
    TrainConfig t = small_train(Regime::baseline);
    CHECK_NOTHROW(t.validate());
    t.warmup_steps = t.total_steps;
    CHECK_THROWS_AS(t.validate(), ConfigError);
    t = small_train(Regime::baseline);
    t.lambda = -1;
    CHECK_THROWS_AS(t.validate(), ConfigError);
}

TEST_CASE("baseline never computes an adversarial branch") {
    auto data = toy_data();
    auto cfg = small_train(Regime::baseline);
    TrainState state = init_train_state(small_model(), cfg);
    auto batch = data.gather(true, {0, 1, 2, 3});
    auto m = train_step(state, batch, cfg);
    CHECK(m.adv_loss == 0.0);
    CHECK(m.adv_acc == 0.0);
    CHECK(m.clean_loss > 0.0);
}

TEST_CASE("lambda = 0 pyramid training updates parameters exactly like baseline") {
    auto data = toy_data();
    auto batch = data.gather(true, {0, 1, 2, 3, 4, 5, 6, 7});

    auto base_cfg = small_train(Regime::baseline, 5);
    auto pyr_cfg = small_train(Regime::pyramid_at, 5);
    pyr_cfg.lambda = 0.0;

    TrainState a = init_train_state(small_model(), base_cfg);
    TrainState b = init_train_state(small_model(), pyr_cfg);
    REQUIRE(a.params.values == b.params.values);
    (void)train_step(a, batch, base_cfg);
    (void)train_step(b, batch, pyr_cfg);
    CHECK(a.params.values == b.params.values);
}

TEST_CASE("recorded total loss decomposes into its parts") {
    auto data = toy_data();
    auto batch = data.gather(true, {0, 1, 2, 3, 4, 5, 6, 7});
    auto cfg = small_train(Regime::pyramid_at, 9);
    cfg.lambda = 0.7;
    TrainState state = init_train_state(small_model(), cfg);
    const double decay_before = weight_decay_term(cfg, state.params);
    auto m = train_step(state, batch, cfg);
    const double recomposed = m.clean_loss + cfg.lambda * m.adv_loss + decay_before;
    CHECK(std::abs(m.total_loss - recomposed) / std::abs(recomposed) < 1e-6);
}

TEST_CASE("total gradient is linear in lambda") {
    auto data = toy_data();
    auto batch = data.gather(true, {0, 1, 2, 3});
    ModelConfig mc = small_model();
    auto params = init_params<float>(mc, 4);
    DropConfig drop = sample_drop_config(mc, DropMode::matched, 21);

    // one frozen adversarial input
    auto attack = pgd_pyramid_attack(params, drop.realize(Branch::attack), batch,
                                     PyramidSpec::desk_defaults(), 77);

    Gradients<float> g_clean(params.size()), g_adv(params.size());
    (void)forward_backward<float>(params, batch.pixels, batch.labels,
                                  drop.realize(Branch::clean), GradKind::params_only,
                                  &g_clean, nullptr);
    (void)forward_backward<float>(params, attack.perturbed.pixels, batch.labels,
                                  drop.realize(Branch::adversarial), GradKind::params_only,
                                  &g_adv, nullptr);

    for (double lambda : {0.5, 2.0}) {
        Gradients<float> g_total(params.size());
        (void)forward_backward<float>(params, batch.pixels, batch.labels,
                                      drop.realize(Branch::clean), GradKind::params_only,
                                      &g_total, nullptr);
        (void)forward_backward<float>(params, attack.perturbed.pixels, batch.labels,
                                      drop.realize(Branch::adversarial),
                                      GradKind::params_only, &g_total, nullptr, nullptr, 1,
                                      static_cast<float>(lambda));
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < g_total.values.size(); ++i) {
            const double want = g_clean.values[i] + lambda * g_adv.values[i];
            num += std::abs(g_total.values[i] - want);
            den += std::abs(want);
        }
        CHECK(num / den < 1e-5);
    }
}

TEST_CASE("matched and unmatched drop modes diverge after one step") {
    auto data = toy_data();
    auto batch = data.gather(true, {0, 1, 2, 3, 4, 5, 6, 7});
    auto cfg_m = small_train(Regime::pyramid_at, 13);
    cfg_m.drop_mode = DropMode::matched;
    auto cfg_u = cfg_m;
    cfg_u.drop_mode = DropMode::unmatched;

    TrainState a = init_train_state(small_model(), cfg_m);
    TrainState b = init_train_state(small_model(), cfg_u);
    REQUIRE(a.params.values == b.params.values);

    MaskRecorder clean_rec, attack_rec, adv_rec;
    (void)train_step(a, batch, cfg_m, &clean_rec, &attack_rec, &adv_rec);
    (void)train_step(b, batch, cfg_u);
    CHECK(a.params.values != b.params.values);

    // matched-mode recordings agree across the clean/attack/adversarial passes
    REQUIRE(!clean_rec.sites.empty());
    CHECK(clean_rec.sites == attack_rec.sites);
    CHECK(clean_rec.sites == adv_rec.sites);
}

TEST_CASE("random regimes respect the budget structurally") {
    auto data = toy_data();
    auto batch = data.gather(true, {0, 1, 2, 3});
    ModelConfig mc = small_model();
    auto params = init_params<float>(mc, 8);

    PixelSpec pixel;
    pixel.random_mode = RandomMode::random_sign;
    auto r = pgd_pixel_attack(params, DropRealization::disabled_all(), batch, pixel, 5);
    CHECK(r.per_step_loss.size() == 1);
    // every level entry sits exactly at the pixel budget
    for (std::size_t i = 0; i < r.pyramid.levels[0].size(); ++i)
        CHECK(std::abs(r.pyramid.levels[0][i]) == doctest::Approx(4.0 / 255).epsilon(1e-6));
    // and the realized image change is within the same bound
    for (std::size_t i = 0; i < r.perturbed.pixels.size(); ++i)
        CHECK(std::abs(r.perturbed.pixels[i] - batch.pixels[i]) <= 4.0f / 255 + 1e-6f);
}

TEST_CASE("two identical runs produce identical metrics and parameters") {
    auto data = toy_data();
    auto cfg = small_train(Regime::pyramid_at, 31);
    cfg.total_steps = 2;
    cfg.warmup_steps = 1;

    TrainState a = init_train_state(small_model(), cfg);
    TrainState b = init_train_state(small_model(), cfg);
    auto ra = train_loop(a, cfg, data);
    auto rb = train_loop(b, cfg, data);
    REQUIRE(ra.size() == rb.size());
    for (std::size_t i = 0; i < ra.size(); ++i)
        CHECK(format_metrics_row(ra[i]) == format_metrics_row(rb[i]));
    CHECK(a.params.values == b.params.values);
    CHECK(a.opt.m == b.opt.m);
}

TEST_CASE("an overfit run memorizes a tiny training set") {
    SyntheticOptions opt;
    opt.n_train = 16;
    opt.n_eval = 8;
    opt.seed = 11;
    auto data = make_synthetic_dataset(opt);

    TrainConfig cfg = small_train(Regime::baseline, 2);
    cfg.total_steps = 400;
    cfg.warmup_steps = 20;
    cfg.batch_size = 16;
    cfg.base_lr = 1.5e-3;
    cfg.weight_decay = 0.0;

    ModelConfig mc = small_model();
    mc.dropout_p = 0.0f;
    mc.stochdepth_p = 0.0f;
    TrainState state = init_train_state(mc, cfg);
    auto records = train_loop(state, cfg, data);
    CHECK(records.back().clean_acc == 1.0);
}

TEST_CASE("resume from a checkpoint reproduces the uninterrupted run bitwise") {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "pyramidat_resume_test";
    fs::remove_all(dir);
    fs::create_directories(dir);

    auto data = toy_data();
    auto cfg = small_train(Regime::pyramid_at, 17);
    cfg.total_steps = 6;
    cfg.warmup_steps = 1;
    cfg.checkpoint_every = 3;

    // uninterrupted run; checkpoint_every=3 drops ckpt_3.bin along the way
    TrainState full = init_train_state(small_model(), cfg);
    TrainSinks sinks_full;
    sinks_full.metrics_csv = dir / "full.csv";
    sinks_full.checkpoint_dir = dir / "ckpts";
    train_loop(full, cfg, data, sinks_full);

    // resume the run from the mid-run checkpoint
    TrainState resumed =
        train_state_from_container(load_container(dir / "ckpts" / "ckpt_3.bin"));
    CHECK(resumed.step == 3);
    TrainSinks sinks_resume;
    sinks_resume.metrics_csv = dir / "resume.csv";
    train_loop(resumed, cfg, data, sinks_resume);

    CHECK(resumed.params.values == full.params.values);
    CHECK(resumed.opt.m == full.opt.m);
    CHECK(resumed.opt.v == full.opt.v);

    // the resumed CSV holds rows 3..5; they must match the full run's rows
    auto full_csv = read_file(dir / "full.csv");
    auto resume_csv = read_file(dir / "resume.csv");
    const auto row3 = full_csv.find("\n3,");
    REQUIRE(row3 != std::string::npos);
    CHECK(resume_csv.find(full_csv.substr(row3 + 1)) != std::string::npos);
    fs::remove_all(dir);
}

TEST_CASE("empty datasets are rejected") {
    DatasetHandle empty;
    empty.name = "empty";
    empty.n_classes = 2;
    empty.shape = ImageShape{32, 32, 3};
    auto cfg = small_train(Regime::baseline);
    TrainState state = init_train_state(small_model(), cfg);
    CHECK_THROWS_AS(train_loop(state, cfg, empty), ConfigError);
}

TEST_CASE("metrics CSV header and formatting are stable") {
    CHECK(std::string(kMetricsHeader) ==
          "step,clean_loss,adv_loss,total_loss,lr,clean_acc,adv_acc,wall_time_s");
    MetricsRecord m;
    m.step = 3;
    m.clean_loss = 0.5;
    m.adv_loss = 0.25;
    m.total_loss = 0.875;
    m.lr = 1e-3;
    m.clean_acc = 0.75;
    m.adv_acc = 0.5;
    m.wall_time_s = 0.0;
    CHECK(format_metrics_row(m) == "3,0.5,0.25,0.875,0.001,0.75,0.5,0.000000");
}
