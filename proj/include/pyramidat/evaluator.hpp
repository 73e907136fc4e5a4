#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "pyramidat/attack.hpp"
#include "pyramidat/dataio.hpp"
#include "pyramidat/vit.hpp"

namespace pyramidat {

// ---------------------------------------------------------------------------
// Synthetic corruptions
// ---------------------------------------------------------------------------

enum class CorruptionKind { gaussian_noise, gaussian_blur, contrast, jpeg_blockiness_proxy };

inline const char* corruption_name(CorruptionKind k) {
    switch (k) {
        case CorruptionKind::gaussian_noise: return "gaussian_noise";
        case CorruptionKind::gaussian_blur: return "gaussian_blur";
        case CorruptionKind::contrast: return "contrast";
        case CorruptionKind::jpeg_blockiness_proxy: return "jpeg_blockiness_proxy";
    }
    return "?";
}

struct CorruptionSpec {
    CorruptionKind kind = CorruptionKind::gaussian_noise;
    int severity = 1;  // 1..5

    void validate() const {
        if (severity < 1 || severity > 5) throw ConfigError("severity must lie in 1..5");
    }
};

/// Frozen severity parameter tables (versioned; v1 ships as
/// configs/corruptions_v1.json and as the builtin defaults here).
struct CorruptionTables {
    int version = 1;
    std::array<double, 5> noise_sigma{0.04, 0.06, 0.08, 0.10, 0.12};
    std::array<double, 5> blur_sigma{0.5, 0.8, 1.2, 1.8, 2.5};
    std::array<double, 5> contrast_factor{0.75, 0.60, 0.45, 0.30, 0.20};
    std::array<double, 5> jpeg_step{0.06, 0.09, 0.13, 0.19, 0.25};

    static CorruptionTables v1() { return CorruptionTables{}; }
    nlohmann::json to_json() const;
    static CorruptionTables from_json(const nlohmann::json& j);
};

/// Pure corruption of a batch; output stays in [0,1]. Only gaussian_noise
/// consumes the seed.
ImageBatch<float> corrupt(const ImageBatch<float>& batch, const CorruptionSpec& spec,
                          const CorruptionTables& tables, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Accuracy evaluation
// ---------------------------------------------------------------------------

/// Top-1 accuracy over the evaluation split; dropout and stochastic depth are
/// fully disabled; argmax ties break toward the lowest class index.
double evaluate_clean(const ModelParams<float>& params, const DatasetHandle& dataset,
                      int batch_size = 256, int threads = 1);

struct CorruptionCell {
    CorruptionKind kind;
    int severity;
    double accuracy;
    double error;  // 1 - accuracy
};

struct CorruptionReport {
    std::vector<CorruptionCell> cells;
    double mean_accuracy = 0.0;
    double mce = 0.0;  // relative to the reference model

    std::string to_csv() const;  // header: kind,severity,accuracy,error
};

/// Evaluates the grid kind x severity for the model and normalizes the summed
/// error per kind by the reference model's summed error (mean over kinds).
CorruptionReport evaluate_corruption_suite(const ModelParams<float>& params,
                                           const ModelParams<float>& reference,
                                           const DatasetHandle& dataset,
                                           const std::vector<CorruptionSpec>& specs,
                                           const CorruptionTables& tables, std::uint64_t seed,
                                           int batch_size = 256, int threads = 1);

/// The full 4-kind x 5-severity grid.
std::vector<CorruptionSpec> full_corruption_grid();

// ---------------------------------------------------------------------------
// Frequency-domain analysis
// ---------------------------------------------------------------------------

enum class BandKind { low_pass, high_pass };

/// Largest frequency radius representable on an H x W grid.
double max_frequency_radius(int height, int width);

/// White Gaussian noise filtered by an ideal radial frequency mask
/// (low_pass keeps radius <= cutoff; high_pass keeps radius > cutoff), then
/// rescaled so its L2 norm is exactly l2_norm. Shape is H x W x C with
/// independent channels.
Tensor<float> band_limited_noise(const ImageShape& shape, BandKind band, double cutoff,
                                 double l2_norm, std::uint64_t seed);

struct NoiseCurvePoint {
    std::string band;
    double cutoff;
    double accuracy;
};

struct NoiseCurve {
    std::vector<NoiseCurvePoint> points;
    std::string to_csv() const;  // header: band,cutoff,accuracy
};

/// Accuracy under additive band-limited noise of fixed L2 norm, per cutoff.
/// Noise is sampled per image, deterministic in the seed; perturbed inputs
/// are clipped back to [0,1].
NoiseCurve noise_robustness_curve(const ModelParams<float>& params,
                                  const DatasetHandle& dataset, BandKind band,
                                  const std::vector<double>& cutoffs, double l2_norm,
                                  std::uint64_t seed, int batch_size = 256, int threads = 1,
                                  int max_images = 0);

/// Averaged DC-centered magnitude spectrum over a set of H x W x C
/// perturbations, plus the fraction of spectral energy inside the centered
/// square covering 25% of the frequency area.
struct SpectralReport {
    int height = 0;
    int width = 0;
    Tensor<float> heatmap;  // H x W, DC at (H/2, W/2)
    double low_freq_energy_fraction = 0.0;
    double spatial_energy = 0.0;   // mean per-sample-channel sum of squares
    double spectral_energy = 0.0;  // same quantity computed from the spectrum
};

SpectralReport spectral_report(const std::vector<Tensor<float>>& perturbations);

// ---------------------------------------------------------------------------
// White-box evaluation
// ---------------------------------------------------------------------------

struct WhiteboxAttack {
    std::string name;
    PyramidSpec spec;  // target_mode is forced to untargeted
};

struct WhiteboxRow {
    std::string attack;
    double accuracy;
};

struct WhiteboxReport {
    std::vector<WhiteboxRow> rows;
    std::string to_csv() const;  // header: attack,accuracy
};

/// Untargeted PGD attacks generated against the evaluated model itself, with
/// dropout disabled; reports top-1 accuracy under each attack.
WhiteboxReport whitebox_eval(const ModelParams<float>& params, const DatasetHandle& dataset,
                             const std::vector<WhiteboxAttack>& attacks, std::uint64_t seed,
                             int batch_size = 128, int threads = 1, int max_images = 0);

}  // namespace pyramidat
