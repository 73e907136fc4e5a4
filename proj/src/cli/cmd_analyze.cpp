#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "pyramidat/attack.hpp"
#include "pyramidat/checkpoint.hpp"
#include "pyramidat/cli.hpp"
#include "pyramidat/evaluator.hpp"

namespace pyramidat::cli {

namespace {

// Materialized perturbations (attacked minus original) for one source name.
std::vector<Tensor<float>> source_perturbations(const std::string& source,
                                                const ModelParams<float>& params,
                                                const ImageBatch<float>& batch,
                                                const RunConfig& config) {
    PyramidSpec spec;
    if (source == "random_pixel" || source == "adv_pixel")
        spec = config.pixel_spec().as_pyramid();
    else if (source == "random_pyramid" || source == "adv_pyramid")
        spec = config.attack_spec();
    else
        throw ConfigError("unknown analyze source: " + source);
    if (source.rfind("random_", 0) == 0) spec.random_mode = RandomMode::random_sign;

    const auto result = pgd_pyramid_attack(params, DropRealization::disabled_all(), batch,
                                           spec, key_stream(config.seed(), source),
                                           static_cast<int>(config.get_int("trainer.threads")));
    const ImageShape shape = batch.image_shape();
    const std::size_t px = shape.pixels();
    std::vector<Tensor<float>> out;
    out.reserve(static_cast<std::size_t>(batch.batch_size()));
    for (int i = 0; i < batch.batch_size(); ++i) {
        Tensor<float> d({shape.height, shape.width, shape.channels});
        const float* a = result.perturbed.pixels.data() + static_cast<std::size_t>(i) * px;
        const float* b = batch.pixels.data() + static_cast<std::size_t>(i) * px;
        for (std::size_t k = 0; k < px; ++k) d[k] = a[k] - b[k];
        out.push_back(std::move(d));
    }
    return out;
}

void write_text_grid(const std::filesystem::path& path, const Tensor<float>& grid,
                     bool log_scale) {
    std::ofstream f(path);
    for (int i = 0; i < grid.dim(0); ++i) {
        for (int j = 0; j < grid.dim(1); ++j) {
            const float v = grid.at(i, j);
            f << (log_scale ? std::log10(1.0f + v) : v);
            f << (j + 1 == grid.dim(1) ? '\n' : ' ');
        }
    }
}

}  // namespace

int cmd_analyze(const RunConfig& config, const std::string& checkpoint) {
    const std::filesystem::path out = config.out_dir();
    std::filesystem::create_directories(out);
    config.write_resolved(out / "resolved.cfg");

    const ModelParams<float> params = params_from_container(load_container(checkpoint));
    const DatasetHandle data = config.load_data();
    const int n = std::min(static_cast<int>(config.get_int("analyze.samples")), data.n_eval());
    if (n <= 0) throw ConfigError("analyze.samples must be positive");
    std::vector<int> indices(static_cast<std::size_t>(n));
    std::iota(indices.begin(), indices.end(), 0);
    const ImageBatch<float> batch = data.gather(false, indices);

    nlohmann::json summary;
    for (const auto& source : config.get_string_list("analyze.sources")) {
        const auto perts = source_perturbations(source, params, batch, config);
        const SpectralReport report = spectral_report(perts);
        save_pfa(out / ("heatmap_" + source + ".pfa"), report.heatmap.shape(),
                 report.heatmap.data());
        write_text_grid(out / ("heatmap_" + source + ".txt"), report.heatmap, false);
        write_text_grid(out / ("heatmap_" + source + "_log.txt"), report.heatmap, true);
        summary["low_freq_energy_fraction_" + source] = report.low_freq_energy_fraction;
        std::printf("%s: low-frequency energy fraction %.4f\n", source.c_str(),
                    report.low_freq_energy_fraction);
    }

    const double l2 = config.get_double("analyze.l2_norm");
    const auto cutoffs = config.get_double_list("analyze.cutoffs");
    std::ofstream curves(out / "noise_curves.csv");
    curves << "band,cutoff,accuracy\n";
    for (const auto& band_name : config.get_string_list("analyze.bands")) {
        BandKind band;
        if (band_name == "low_pass")
            band = BandKind::low_pass;
        else if (band_name == "high_pass")
            band = BandKind::high_pass;
        else
            throw ConfigError("unknown analyze band: " + band_name);
        const NoiseCurve curve = noise_robustness_curve(
            params, data, band, cutoffs, l2, config.seed(),
            static_cast<int>(config.get_int("eval.batch_size")),
            static_cast<int>(config.get_int("trainer.threads")),
            static_cast<int>(config.get_int("eval.max_images")));
        for (const auto& p : curve.points) {
            curves << p.band << "," << p.cutoff << "," << p.accuracy << "\n";
            summary["accuracy_" + p.band + "_cutoff_" + std::to_string(p.cutoff)] = p.accuracy;
        }
    }

    std::ofstream js(out / "summary.json");
    js << summary.dump(2) << "\n";
    return kExitOk;
}

}  // namespace pyramidat::cli
