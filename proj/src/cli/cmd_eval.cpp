#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pyramidat/checkpoint.hpp"
#include "pyramidat/cli.hpp"
#include "pyramidat/evaluator.hpp"

namespace pyramidat::cli {

int cmd_eval(const RunConfig& config, const std::string& checkpoint) {
    const std::filesystem::path out = config.out_dir();
    std::filesystem::create_directories(out);
    config.write_resolved(out / "resolved.cfg");

    const ModelParams<float> params = params_from_container(load_container(checkpoint));
    const DatasetHandle data = config.load_data();
    const int batch = static_cast<int>(config.get_int("eval.batch_size"));
    const int threads = static_cast<int>(config.get_int("trainer.threads"));
    const int max_images = static_cast<int>(config.get_int("eval.max_images"));
    const auto suites = config.get_string_list("eval.suites");
    const auto has = [&](const char* name) {
        for (const auto& s : suites)
            if (s == name) return true;
        return false;
    };

    nlohmann::json summary;
    if (has("clean")) {
        const double acc = evaluate_clean(params, data, batch, threads);
        std::ofstream f(out / "clean.csv");
        f << "metric,value\nclean_accuracy," << acc << "\n";
        summary["clean_accuracy"] = acc;
        std::printf("clean accuracy: %.4f\n", acc);
    }
    if (has("corruption")) {
        const std::string ref_path = config.get_string("eval.reference_checkpoint");
        // With no pinned reference the model is normalized against itself
        // (mCE = 1 by definition); pin a baseline checkpoint for real mCE.
        const ModelParams<float> reference =
            ref_path.empty() ? params : params_from_container(load_container(ref_path));
        const auto report = evaluate_corruption_suite(params, reference, data,
                                                      full_corruption_grid(),
                                                      config.corruption_tables(),
                                                      config.seed(), batch, threads);
        std::ofstream f(out / "corruption.csv");
        f << report.to_csv();
        summary["corruption_mean_accuracy"] = report.mean_accuracy;
        summary["mce"] = report.mce;
        summary["mce_reference"] = ref_path.empty() ? "self" : ref_path;
        std::printf("corruption mean accuracy: %.4f  mCE: %.4f\n", report.mean_accuracy,
                    report.mce);
    }
    if (has("whitebox")) {
        std::vector<WhiteboxAttack> attacks = {
            {"pixel_pgd", config.pixel_spec().as_pyramid()},
            {"pyramid_pgd", config.attack_spec()},
        };
        const auto report =
            whitebox_eval(params, data, attacks, config.seed(), batch, threads, max_images);
        std::ofstream f(out / "whitebox.csv");
        f << report.to_csv();
        for (const auto& row : report.rows) {
            summary["whitebox_" + row.attack] = row.accuracy;
            std::printf("whitebox %s accuracy: %.4f\n", row.attack.c_str(), row.accuracy);
        }
    }

    std::ofstream js(out / "summary.json");
    js << summary.dump(2) << "\n";
    return kExitOk;
}

}  // namespace pyramidat::cli
