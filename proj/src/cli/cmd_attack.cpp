#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "pyramidat/attack.hpp"
#include "pyramidat/checkpoint.hpp"
#include "pyramidat/cli.hpp"
#include "pyramidat/pngio.hpp"

namespace pyramidat::cli {

namespace {

Tensor<float> slice_image(const Tensor<float>& batch_pixels, int index) {
    const int H = batch_pixels.dim(1), W = batch_pixels.dim(2), C = batch_pixels.dim(3);
    Tensor<float> out({H, W, C});
    const std::size_t px = out.size();
    std::copy(batch_pixels.data() + static_cast<std::size_t>(index) * px,
              batch_pixels.data() + static_cast<std::size_t>(index + 1) * px, out.data());
    return out;
}

}  // namespace

int cmd_attack(const RunConfig& config, const std::string& checkpoint) {
    const std::filesystem::path out = config.out_dir();
    std::filesystem::create_directories(out);
    config.write_resolved(out / "resolved.cfg");

    const Container ckpt = load_container(checkpoint);
    const ModelParams<float> params = params_from_container(ckpt);
    const DatasetHandle data = config.load_data();
    const PyramidSpec spec = config.attack_spec();

    const int n = std::min(static_cast<int>(config.get_int("attack.samples")), data.n_eval());
    if (n <= 0) throw ConfigError("attack.samples must be positive (and eval split nonempty)");
    std::vector<int> indices(static_cast<std::size_t>(n));
    std::iota(indices.begin(), indices.end(), 0);
    const ImageBatch<float> batch = data.gather(false, indices);

    const auto result =
        pgd_pyramid_attack(params, DropRealization::disabled_all(), batch, spec,
                           config.seed(), static_cast<int>(config.get_int("trainer.threads")));

    std::ofstream loss_csv(out / "loss.csv");
    loss_csv << "step,loss\n";
    for (std::size_t s = 0; s < result.per_step_loss.size(); ++s)
        loss_csv << s << "," << result.per_step_loss[s] << "\n";

    const ImageShape shape = batch.image_shape();
    for (int i = 0; i < n; ++i) {
        const std::filesystem::path dir = out / ("sample_" + std::to_string(i));
        std::filesystem::create_directories(dir);
        const Tensor<float> original = slice_image(batch.pixels, i);
        const Tensor<float> perturbed = slice_image(result.perturbed.pixels, i);
        save_pfa(dir / "original.pfa", original.shape(), original.data());
        save_pfa(dir / "perturbed.pfa", perturbed.shape(), perturbed.data());
        write_png_preview(dir / "original.png", original);
        write_png_preview(dir / "perturbed.png", perturbed);

        for (std::size_t l = 0; l < spec.levels(); ++l) {
            // raw per-level grid for this sample
            const Tensor<float>& lvl = result.pyramid.levels[l];
            Tensor<float> grid({lvl.dim(1), lvl.dim(2), lvl.dim(3)});
            std::copy(lvl.data() + static_cast<std::size_t>(i) * grid.size(),
                      lvl.data() + static_cast<std::size_t>(i + 1) * grid.size(), grid.data());
            const std::string stem = "level" + std::to_string(l);
            save_pfa(dir / (stem + "_delta.pfa"), grid.shape(), grid.data());

            // this level's contribution expanded to image size
            PerturbationPyramid<float> solo = init_pyramid<float>(spec, 1, shape);
            std::copy(grid.data(), grid.data() + grid.size(), solo.levels[l].data());
            Tensor<float> expanded = expand_pyramid(solo, spec, 1, shape);
            Tensor<float> img({shape.height, shape.width, shape.channels});
            std::copy(expanded.data(), expanded.data() + img.size(), img.data());
            save_pfa(dir / (stem + "_expanded.pfa"), img.shape(), img.data());
            write_png_preview(dir / (stem + "_expanded.png"), img, 0.0f, 0.0f);
        }
    }
    std::printf("attacked %d samples -> %s (levels=%zu, steps=%zu)\n", n, out.c_str(),
                spec.levels(), result.per_step_loss.size() - 1);
    return kExitOk;
}

}  // namespace pyramidat::cli
