#include "pyramidat/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace pyramidat {

nlohmann::json CorruptionTables::to_json() const {
    return nlohmann::json{{"version", version},
                          {"gaussian_noise_sigma", noise_sigma},
                          {"gaussian_blur_sigma", blur_sigma},
                          {"contrast_factor", contrast_factor},
                          {"jpeg_quant_step", jpeg_step}};
}

CorruptionTables CorruptionTables::from_json(const nlohmann::json& j) {
    CorruptionTables t;
    t.version = j.at("version").get<int>();
    auto read5 = [&](const char* key, std::array<double, 5>& out) {
        auto v = j.at(key).get<std::vector<double>>();
        if (v.size() != 5) throw ConfigError("severity tables need exactly 5 entries");
        std::copy(v.begin(), v.end(), out.begin());
    };
    read5("gaussian_noise_sigma", t.noise_sigma);
    read5("gaussian_blur_sigma", t.blur_sigma);
    read5("contrast_factor", t.contrast_factor);
    read5("jpeg_quant_step", t.jpeg_step);
    return t;
}

namespace {

void corrupt_gaussian_noise(ImageBatch<float>& batch, double sigma, std::uint64_t seed) {
    const int B = batch.batch_size();
    const std::size_t px = batch.image_shape().pixels();
    for (int b = 0; b < B; ++b) {
        Rng rng(key_stream(seed, "gaussian_noise", static_cast<std::uint64_t>(b)));
        float* p = batch.pixels.data() + static_cast<std::size_t>(b) * px;
        for (std::size_t i = 0; i < px; ++i)
            p[i] = clamp01<float>(p[i] + static_cast<float>(sigma * rng.gaussian()));
    }
}

int reflect(int k, int n) {
    while (k < 0 || k >= n) {
        if (k < 0) k = -k - 1;
        if (k >= n) k = 2 * n - 1 - k;
    }
    return k;
}

void corrupt_gaussian_blur(ImageBatch<float>& batch, double sigma) {
    const ImageShape s = batch.image_shape();
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<float> kernel(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        const double v = std::exp(-0.5 * (i / sigma) * (i / sigma));
        kernel[static_cast<std::size_t>(i + radius)] = static_cast<float>(v);
        sum += v;
    }
    for (auto& k : kernel) k = static_cast<float>(k / sum);

    const int B = batch.batch_size();
    Tensor<float> tmp(batch.pixels.shape());
    // horizontal pass
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < s.channels; ++c) {
                    float acc = 0.0f;
                    for (int k = -radius; k <= radius; ++k)
                        acc += kernel[static_cast<std::size_t>(k + radius)] *
                               batch.pixels.at(b, y, reflect(x + k, s.width), c);
                    tmp.at(b, y, x, c) = acc;
                }
    // vertical pass
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x)
                for (int c = 0; c < s.channels; ++c) {
                    float acc = 0.0f;
                    for (int k = -radius; k <= radius; ++k)
                        acc += kernel[static_cast<std::size_t>(k + radius)] *
                               tmp.at(b, reflect(y + k, s.height), x, c);
                    batch.pixels.at(b, y, x, c) = clamp01(acc);
                }
}

void corrupt_contrast(ImageBatch<float>& batch, double factor) {
    const ImageShape s = batch.image_shape();
    const int B = batch.batch_size();
    const std::size_t per_channel = static_cast<std::size_t>(s.height) * s.width;
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < s.channels; ++c) {
            double mean = 0.0;
            for (int y = 0; y < s.height; ++y)
                for (int x = 0; x < s.width; ++x) mean += batch.pixels.at(b, y, x, c);
            mean /= static_cast<double>(per_channel);
            for (int y = 0; y < s.height; ++y)
                for (int x = 0; x < s.width; ++x) {
                    const double v = mean + factor * (batch.pixels.at(b, y, x, c) - mean);
                    batch.pixels.at(b, y, x, c) = clamp01(static_cast<float>(v));
                }
        }
}

// 8x8 block DCT with coarse quantization of the coefficients; reproduces the
// blocky look of aggressive JPEG compression without a codec.
void corrupt_jpeg_proxy(ImageBatch<float>& batch, double step) {
    constexpr int N = 8;
    static float basis[N][N];  // basis[k][n] = c_k cos(pi (2n+1) k / 16)
    static bool init = false;
    if (!init) {
        for (int k = 0; k < N; ++k) {
            const double ck = k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
            for (int n = 0; n < N; ++n)
                basis[k][n] = static_cast<float>(
                    ck * std::cos(3.14159265358979323846 * (2 * n + 1) * k / (2.0 * N)));
        }
        init = true;
    }
    const ImageShape s = batch.image_shape();
    const int B = batch.batch_size();
    float blk[N][N], tmp[N][N], coef[N][N];
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < s.channels; ++c)
            for (int by = 0; by < s.height; by += N)
                for (int bx = 0; bx < s.width; bx += N) {
                    const int bh = std::min(N, s.height - by);
                    const int bw = std::min(N, s.width - bx);
                    for (int y = 0; y < N; ++y)
                        for (int x = 0; x < N; ++x)
                            blk[y][x] = batch.pixels.at(b, by + std::min(y, bh - 1),
                                                        bx + std::min(x, bw - 1), c);
                    // 2-D DCT, rows then columns
                    for (int y = 0; y < N; ++y)
                        for (int k = 0; k < N; ++k) {
                            float acc = 0.0f;
                            for (int x = 0; x < N; ++x) acc += blk[y][x] * basis[k][x];
                            tmp[y][k] = acc;
                        }
                    for (int k = 0; k < N; ++k)
                        for (int j = 0; j < N; ++j) {
                            float acc = 0.0f;
                            for (int y = 0; y < N; ++y) acc += tmp[y][j] * basis[k][y];
                            coef[k][j] = acc;
                        }
                    // quantize: DC at half the AC step
                    for (int k = 0; k < N; ++k)
                        for (int j = 0; j < N; ++j) {
                            const double q = (k == 0 && j == 0) ? step * 0.5 : step;
                            coef[k][j] = static_cast<float>(
                                std::round(coef[k][j] / q) * q);
                        }
                    // inverse DCT
                    for (int k = 0; k < N; ++k)
                        for (int x = 0; x < N; ++x) {
                            float acc = 0.0f;
                            for (int j = 0; j < N; ++j) acc += coef[k][j] * basis[j][x];
                            tmp[k][x] = acc;
                        }
                    for (int y = 0; y < N; ++y)
                        for (int x = 0; x < N; ++x) {
                            float acc = 0.0f;
                            for (int k = 0; k < N; ++k) acc += tmp[k][x] * basis[k][y];
                            blk[y][x] = acc;
                        }
                    for (int y = 0; y < bh; ++y)
                        for (int x = 0; x < bw; ++x)
                            batch.pixels.at(b, by + y, bx + x, c) = clamp01(blk[y][x]);
                }
}

}  // namespace

ImageBatch<float> corrupt(const ImageBatch<float>& batch, const CorruptionSpec& spec,
                          const CorruptionTables& tables, std::uint64_t seed) {
    spec.validate();
    ImageBatch<float> out = batch;
    const int si = spec.severity - 1;
    switch (spec.kind) {
        case CorruptionKind::gaussian_noise:
            corrupt_gaussian_noise(out, tables.noise_sigma[si], seed);
            break;
        case CorruptionKind::gaussian_blur:
            corrupt_gaussian_blur(out, tables.blur_sigma[si]);
            break;
        case CorruptionKind::contrast:
            corrupt_contrast(out, tables.contrast_factor[si]);
            break;
        case CorruptionKind::jpeg_blockiness_proxy:
            corrupt_jpeg_proxy(out, tables.jpeg_step[si]);
            break;
    }
    return out;
}

namespace {

int count_correct(const Tensor<float>& logits, const std::vector<int>& labels) {
    const int B = logits.dim(0), K = logits.dim(1);
    int correct = 0;
    for (int i = 0; i < B; ++i) {
        const float* row = logits.data() + static_cast<std::size_t>(i) * K;
        int arg = 0;
        for (int k = 1; k < K; ++k)
            if (row[k] > row[arg]) arg = k;
        if (arg == labels[i]) ++correct;
    }
    return correct;
}

template <class BatchFn>
double eval_accuracy(const ModelParams<float>& params, const DatasetHandle& dataset,
                     int batch_size, int threads, int max_images, BatchFn&& prepare) {
    BatchStream stream(dataset, /*train_split=*/false, batch_size, 0);
    const int limit = max_images > 0 ? std::min(max_images, stream.split_size())
                                     : stream.split_size();
    long long correct = 0, total = 0;
    for (int i = 0; i < stream.batches_per_epoch() && total < limit; ++i) {
        ImageBatch<float> batch = stream.get(0, i);
        if (total + batch.batch_size() > limit) {
            std::vector<int> idx(static_cast<std::size_t>(limit - total));
            std::iota(idx.begin(), idx.end(), static_cast<int>(total));
            batch = dataset.gather(false, idx);
        }
        ImageBatch<float> ready = prepare(std::move(batch), i);
        Tensor<float> logits =
            forward(params, ready.pixels, DropRealization::disabled_all(), nullptr, threads);
        correct += count_correct(logits, ready.labels);
        total += ready.labels.size();
    }
    return total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

double evaluate_clean(const ModelParams<float>& params, const DatasetHandle& dataset,
                      int batch_size, int threads) {
    return eval_accuracy(params, dataset, batch_size, threads, 0,
                         [](ImageBatch<float> b, int) { return b; });
}

std::vector<CorruptionSpec> full_corruption_grid() {
    std::vector<CorruptionSpec> specs;
    for (CorruptionKind k :
         {CorruptionKind::gaussian_noise, CorruptionKind::gaussian_blur,
          CorruptionKind::contrast, CorruptionKind::jpeg_blockiness_proxy})
        for (int sev = 1; sev <= 5; ++sev) specs.push_back(CorruptionSpec{k, sev});
    return specs;
}

std::string CorruptionReport::to_csv() const {
    std::string out = "kind,severity,accuracy,error\n";
    char buf[160];
    for (const auto& c : cells) {
        std::snprintf(buf, sizeof(buf), "%s,%d,%.9g,%.9g\n", corruption_name(c.kind),
                      c.severity, c.accuracy, c.error);
        out += buf;
    }
    return out;
}

CorruptionReport evaluate_corruption_suite(const ModelParams<float>& params,
                                           const ModelParams<float>& reference,
                                           const DatasetHandle& dataset,
                                           const std::vector<CorruptionSpec>& specs,
                                           const CorruptionTables& tables, std::uint64_t seed,
                                           int batch_size, int threads) {
    CorruptionReport report;
    std::map<CorruptionKind, double> err_sum, ref_err_sum;
    double acc_sum = 0.0;
    for (const auto& spec : specs) {
        const std::uint64_t cell_seed =
            key_mix(key_stream(seed, corruption_name(spec.kind)), spec.severity);
        auto prepare = [&](ImageBatch<float> b, int batch_idx) {
            return corrupt(b, spec, tables, key_mix(cell_seed, batch_idx));
        };
        const double acc = eval_accuracy(params, dataset, batch_size, threads, 0, prepare);
        const double ref_acc =
            eval_accuracy(reference, dataset, batch_size, threads, 0, prepare);
        report.cells.push_back(CorruptionCell{spec.kind, spec.severity, acc, 1.0 - acc});
        err_sum[spec.kind] += 1.0 - acc;
        ref_err_sum[spec.kind] += 1.0 - ref_acc;
        acc_sum += acc;
    }
    report.mean_accuracy = report.cells.empty() ? 0.0 : acc_sum / report.cells.size();
    double mce = 0.0;
    int kinds = 0;
    for (const auto& [kind, err] : err_sum) {
        const double ref = ref_err_sum[kind];
        mce += ref > 0.0 ? err / ref : 1.0;
        ++kinds;
    }
    report.mce = kinds > 0 ? mce / kinds : 0.0;
    return report;
}

std::string NoiseCurve::to_csv() const {
    std::string out = "band,cutoff,accuracy\n";
    char buf[120];
    for (const auto& p : points) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g\n", p.band.c_str(), p.cutoff,
                      p.accuracy);
        out += buf;
    }
    return out;
}

NoiseCurve noise_robustness_curve(const ModelParams<float>& params,
                                  const DatasetHandle& dataset, BandKind band,
                                  const std::vector<double>& cutoffs, double l2_norm,
                                  std::uint64_t seed, int batch_size, int threads,
                                  int max_images) {
    const char* band_name = band == BandKind::low_pass ? "low_pass" : "high_pass";
    NoiseCurve curve;
    for (double cutoff : cutoffs) {
        auto prepare = [&](ImageBatch<float> b, int batch_idx) {
            if (l2_norm > 0.0) {
                const ImageShape shape = b.image_shape();
                for (int i = 0; i < b.batch_size(); ++i) {
                    const std::uint64_t image_seed = key_mix(
                        key_stream(seed, band_name, static_cast<std::uint64_t>(batch_idx)),
                        static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(cutoff * 8));
                    Tensor<float> noise =
                        band_limited_noise(shape, band, cutoff, l2_norm, image_seed);
                    float* px = b.pixels.data() + static_cast<std::size_t>(i) * shape.pixels();
                    for (std::size_t k = 0; k < noise.size(); ++k)
                        px[k] = clamp01(px[k] + noise[k]);
                }
            }
            return b;
        };
        const double acc =
            eval_accuracy(params, dataset, batch_size, threads, max_images, prepare);
        curve.points.push_back(NoiseCurvePoint{band_name, cutoff, acc});
    }
    return curve;
}

std::string WhiteboxReport::to_csv() const {
    std::string out = "attack,accuracy\n";
    char buf[120];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g\n", r.attack.c_str(), r.accuracy);
        out += buf;
    }
    return out;
}

WhiteboxReport whitebox_eval(const ModelParams<float>& params, const DatasetHandle& dataset,
                             const std::vector<WhiteboxAttack>& attacks, std::uint64_t seed,
                             int batch_size, int threads, int max_images) {
    WhiteboxReport report;
    for (const auto& atk : attacks) {
        PyramidSpec spec = atk.spec;
        spec.target_mode = TargetMode::untargeted;
        auto prepare = [&](ImageBatch<float> b, int batch_idx) {
            auto result = pgd_pyramid_attack(params, DropRealization::disabled_all(), b, spec,
                                             key_stream(seed, atk.name,
                                                        static_cast<std::uint64_t>(batch_idx)),
                                             threads);
            return result.perturbed;
        };
        const double acc =
            eval_accuracy(params, dataset, batch_size, threads, max_images, prepare);
        report.rows.push_back(WhiteboxRow{atk.name, acc});
    }
    return report;
}

}  // namespace pyramidat
