#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "pyramidat/checkpoint.hpp"
#include "pyramidat/cli.hpp"

using namespace pyramidat;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
}

fs::path fresh_dir(const std::string& name) {
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<std::string> tiny_run_overrides(const fs::path& out) {
    return {
        "out_dir=" + out.string(),
        "data.synthetic_train=32",
        "data.synthetic_eval=16",
        "model.embed_dim=16",
        "model.depth=1",
        "model.n_heads=2",
        "model.mlp_dim=32",
        "trainer.total_steps=4",
        "trainer.warmup_steps=1",
        "trainer.batch_size=8",
        "eval.batch_size=16",
    };
}

// one shared tiny checkpoint for the artifact-producing commands
const fs::path& tiny_checkpoint() {
    static const fs::path path = [] {
        const fs::path out = fresh_dir("pyramidat_cli_ckpt");
        RunConfig config = RunConfig::from_overrides(tiny_run_overrides(out));
        REQUIRE(cli::cmd_train(config) == cli::kExitOk);
        return out / "ckpt_4.bin";
    }();
    return path;
}

}  // namespace

TEST_CASE("config schema: defaults, files, overrides, rejection") {
    RunConfig def = RunConfig::from_overrides({});
    CHECK(def.get_int("schema_version") == 1);
    CHECK(def.get_string("trainer.regime") == "baseline");
    CHECK(def.get_double("attack.step_size") == doctest::Approx(1.0 / 255));
    CHECK(def.get_int_list("attack.scales") == std::vector<long long>{8, 4, 1});
    CHECK(def.attack_spec().eps[0] == doctest::Approx(6.0 / 255));

    CHECK_THROWS_AS(RunConfig::from_overrides({"no_such_key=1"}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_overrides({"malformed"}), ConfigError);
    CHECK_THROWS_AS(RunConfig::from_file("/nonexistent/base.cfg"), DataError);

    const fs::path dir = fresh_dir("pyramidat_cfg_test");
    {
        std::ofstream f(dir / "run.cfg");
        f << "# comment line\n\n";
        f << "seed = 9\n";
        f << "trainer.regime = pyramid_at\n";
        f << "attack.eps = [3/255, 3/255, 3/255]\n";
    }
    RunConfig fromfile = RunConfig::from_file(dir / "run.cfg");
    CHECK(fromfile.seed() == 9);
    CHECK(fromfile.get_string("trainer.regime") == "pyramid_at");
    CHECK(fromfile.attack_spec().eps[1] == doctest::Approx(3.0 / 255));

    // --set overrides win over file values
    RunConfig overridden =
        RunConfig::from_file(dir / "run.cfg", {"trainer.regime=pixel_at", "seed=11"});
    CHECK(overridden.get_string("trainer.regime") == "pixel_at");
    CHECK(overridden.seed() == 11);

    {
        std::ofstream f(dir / "bad.cfg");
        f << "trainer.regim = oops\n";
    }
    CHECK_THROWS_WITH_AS(RunConfig::from_file(dir / "bad.cfg"),
                         doctest::Contains("trainer.regim"), ConfigError);
    {
        std::ofstream f(dir / "badver.cfg");
        f << "schema_version = 2\n";
    }
    CHECK_THROWS_AS(RunConfig::from_file(dir / "badver.cfg"), ConfigError);
}

TEST_CASE("resolved config round-trips") {
    const fs::path dir = fresh_dir("pyramidat_resolved_test");
    RunConfig a = RunConfig::from_overrides({"trainer.regime=random_pyramid", "seed=5"});
    a.write_resolved(dir / "resolved.cfg");
    RunConfig b = RunConfig::from_file(dir / "resolved.cfg");
    CHECK(a.resolved_text() == b.resolved_text());
}

TEST_CASE("enum parsing") {
    CHECK(regime_from_string("pyramid_at") == Regime::pyramid_at);
    CHECK_THROWS_AS(regime_from_string("bogus"), ConfigError);
    CHECK(drop_mode_from_string("disabled_adv") == DropMode::disabled_adv);
    CHECK_THROWS_AS(drop_mode_from_string("off"), ConfigError);
    CHECK(std::string(regime_to_string(Regime::random_pixel)) == "random_pixel");
    CHECK(std::string(drop_mode_to_string(DropMode::matched)) == "matched");
}

TEST_CASE("cmd_train writes resolved config, metrics, and a checkpoint") {
    const fs::path out = fresh_dir("pyramidat_cmd_train");
    RunConfig config = RunConfig::from_overrides(tiny_run_overrides(out));
    CHECK(cli::cmd_train(config) == cli::kExitOk);
    CHECK(fs::exists(out / "resolved.cfg"));
    CHECK(fs::exists(out / "metrics.csv"));
    CHECK(fs::exists(out / "ckpt_4.bin"));

    const std::string metrics = read_file(out / "metrics.csv");
    CHECK(metrics.rfind("step,clean_loss,adv_loss,total_loss,lr,clean_acc,adv_acc,"
                        "wall_time_s\n",
                        0) == 0);
    CHECK(std::count(metrics.begin(), metrics.end(), '\n') == 5);  // header + 4 steps

    // rerunning from the resolved config reproduces the metrics bitwise
    const fs::path out2 = fresh_dir("pyramidat_cmd_train2");
    RunConfig config2 =
        RunConfig::from_file(out / "resolved.cfg", {"out_dir=" + out2.string()});
    CHECK(cli::cmd_train(config2) == cli::kExitOk);
    CHECK(read_file(out2 / "metrics.csv") == metrics);

    // mismatched class count is a config error
    RunConfig bad = RunConfig::from_overrides(tiny_run_overrides(out));
    bad.set("model.n_classes", "10");
    CHECK_THROWS_AS(cli::cmd_train(bad), ConfigError);
}

TEST_CASE("cmd_attack emits per-sample artifacts and the loss trajectory") {
    const fs::path out = fresh_dir("pyramidat_cmd_attack");
    RunConfig config = RunConfig::from_overrides(tiny_run_overrides(out));
    config.set("attack.samples", "3");
    config.set("attack.n_steps", "2");
    CHECK(cli::cmd_attack(config, tiny_checkpoint().string()) == cli::kExitOk);

    for (int i = 0; i < 3; ++i) {
        const fs::path sdir = out / ("sample_" + std::to_string(i));
        CHECK(fs::exists(sdir / "original.pfa"));
        CHECK(fs::exists(sdir / "original.png"));
        CHECK(fs::exists(sdir / "perturbed.pfa"));
        CHECK(fs::exists(sdir / "perturbed.png"));
        // one delta + one expanded array per pyramid level
        for (int l = 0; l < 3; ++l) {
            CHECK(fs::exists(sdir / ("level" + std::to_string(l) + "_delta.pfa")));
            CHECK(fs::exists(sdir / ("level" + std::to_string(l) + "_expanded.pfa")));
        }
        CHECK(!fs::exists(sdir / "level3_delta.pfa"));
    }
    const std::string loss = read_file(out / "loss.csv");
    CHECK(loss.rfind("step,loss\n", 0) == 0);
    CHECK(std::count(loss.begin(), loss.end(), '\n') == 4);  // header + n_steps+1 rows

    // a zero-step attack leaves the image bytes untouched
    const fs::path out0 = fresh_dir("pyramidat_cmd_attack0");
    RunConfig config0 = RunConfig::from_overrides(tiny_run_overrides(out0));
    config0.set("attack.samples", "2");
    config0.set("attack.n_steps", "0");
    CHECK(cli::cmd_attack(config0, tiny_checkpoint().string()) == cli::kExitOk);
    CHECK(read_file(out0 / "sample_0" / "original.pfa") ==
          read_file(out0 / "sample_0" / "perturbed.pfa"));

    // a missing checkpoint is a data error (exit code 2 at the CLI)
    CHECK_THROWS_AS(cli::cmd_attack(config0, "/nonexistent/ckpt.bin"), DataError);
}

TEST_CASE("cmd_eval writes the selected reports plus a JSON summary") {
    const fs::path out = fresh_dir("pyramidat_cmd_eval_clean");
    RunConfig config = RunConfig::from_overrides(tiny_run_overrides(out));
    config.set("eval.suites", "[clean]");
    CHECK(cli::cmd_eval(config, tiny_checkpoint().string()) == cli::kExitOk);
    CHECK(fs::exists(out / "clean.csv"));
    CHECK(fs::exists(out / "summary.json"));
    CHECK(!fs::exists(out / "corruption.csv"));
    CHECK(!fs::exists(out / "whitebox.csv"));
    CHECK(read_file(out / "clean.csv").rfind("metric,value\n", 0) == 0);

    const fs::path out_all = fresh_dir("pyramidat_cmd_eval_all");
    RunConfig all = RunConfig::from_overrides(tiny_run_overrides(out_all));
    all.set("attack.n_steps", "1");
    all.set("pixel.n_steps", "1");
    all.set("eval.max_images", "8");
    CHECK(cli::cmd_eval(all, tiny_checkpoint().string()) == cli::kExitOk);
    CHECK(fs::exists(out_all / "clean.csv"));
    CHECK(fs::exists(out_all / "corruption.csv"));
    CHECK(fs::exists(out_all / "whitebox.csv"));
    CHECK(fs::exists(out_all / "summary.json"));
    CHECK(read_file(out_all / "whitebox.csv").rfind("attack,accuracy\n", 0) == 0);
    CHECK(read_file(out_all / "corruption.csv").rfind("kind,severity,accuracy,error\n", 0) ==
          0);
}

TEST_CASE("cmd_analyze emits heatmaps and noise curves deterministically") {
    const fs::path out = fresh_dir("pyramidat_cmd_analyze");
    RunConfig config = RunConfig::from_overrides(tiny_run_overrides(out));
    config.set("analyze.samples", "8");
    config.set("attack.n_steps", "1");
    config.set("pixel.n_steps", "1");
    config.set("analyze.cutoffs", "[2,8]");
    config.set("eval.max_images", "8");
    CHECK(cli::cmd_analyze(config, tiny_checkpoint().string()) == cli::kExitOk);

    for (const char* source :
         {"random_pixel", "adv_pixel", "random_pyramid", "adv_pyramid"}) {
        CHECK(fs::exists(out / ("heatmap_" + std::string(source) + ".pfa")));
        CHECK(fs::exists(out / ("heatmap_" + std::string(source) + ".txt")));
        CHECK(fs::exists(out / ("heatmap_" + std::string(source) + "_log.txt")));
    }
    const std::string curves = read_file(out / "noise_curves.csv");
    CHECK(curves.rfind("band,cutoff,accuracy\n", 0) == 0);
    CHECK(std::count(curves.begin(), curves.end(), '\n') == 1 + 2 * 2);

    // deterministic per seed: a rerun reproduces the artifacts bitwise
    const fs::path out2 = fresh_dir("pyramidat_cmd_analyze2");
    RunConfig config2 = RunConfig::from_overrides(tiny_run_overrides(out2));
    config2.set("analyze.samples", "8");
    config2.set("attack.n_steps", "1");
    config2.set("pixel.n_steps", "1");
    config2.set("analyze.cutoffs", "[2,8]");
    config2.set("eval.max_images", "8");
    CHECK(cli::cmd_analyze(config2, tiny_checkpoint().string()) == cli::kExitOk);
    CHECK(read_file(out2 / "noise_curves.csv") == curves);
    CHECK(read_file(out2 / "heatmap_adv_pyramid.pfa") ==
          read_file(out / "heatmap_adv_pyramid.pfa"));
}

TEST_CASE("portable float arrays round-trip") {
    const fs::path dir = fresh_dir("pyramidat_pfa_test");
    Tensor<float> t({2, 3, 4});
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(i) * 0.5f;
    save_pfa(dir / "t.pfa", t.shape(), t.data());
    Tensor<float> back = load_pfa(dir / "t.pfa");
    CHECK(back.shape() == t.shape());
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(back[i] == t[i]);
    CHECK_THROWS_AS(load_pfa(dir / "missing.pfa"), DataError);
}
