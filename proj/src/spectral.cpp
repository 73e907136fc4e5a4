#include <fftw3.h>

#include <cmath>
#include <complex>
#include <mutex>

#include "pyramidat/evaluator.hpp"

namespace pyramidat {

namespace {

// FFTW plan creation is not thread-safe; execution of independent plans is.
std::mutex& fftw_mutex() {
    static std::mutex m;
    return m;
}

struct Plan2D {
    fftw_plan forward;
    fftw_plan inverse;
    fftw_complex* buf;
    int h, w;

    Plan2D(int height, int width) : h(height), w(width) {
        std::lock_guard<std::mutex> lock(fftw_mutex());
        buf = fftw_alloc_complex(static_cast<std::size_t>(h) * w);
        forward = fftw_plan_dft_2d(h, w, buf, buf, FFTW_FORWARD, FFTW_ESTIMATE);
        inverse = fftw_plan_dft_2d(h, w, buf, buf, FFTW_BACKWARD, FFTW_ESTIMATE);
    }
    ~Plan2D() {
        std::lock_guard<std::mutex> lock(fftw_mutex());
        fftw_destroy_plan(forward);
        fftw_destroy_plan(inverse);
        fftw_free(buf);
    }
    Plan2D(const Plan2D&) = delete;
    Plan2D& operator=(const Plan2D&) = delete;
};

inline int freq_index(int u, int n) { return u <= n / 2 ? u : u - n; }

}  // namespace

double max_frequency_radius(int height, int width) {
    const double fu = height / 2;
    const double fv = width / 2;
    return std::sqrt(fu * fu + fv * fv);
}

Tensor<float> band_limited_noise(const ImageShape& shape, BandKind band, double cutoff,
                                 double l2_norm, std::uint64_t seed) {
    shape.validate();
    if (cutoff < 0.0) throw ConfigError("cutoff must be nonnegative");
    if (l2_norm < 0.0) throw ConfigError("l2_norm must be nonnegative");
    const int H = shape.height, W = shape.width, C = shape.channels;
    Tensor<float> out({H, W, C});
    if (l2_norm == 0.0) return out;

    Plan2D plan(H, W);
    Rng rng(key_stream(seed, "band_noise"));
    const double c2 = cutoff * cutoff;
    for (int c = 0; c < C; ++c) {
        for (int i = 0; i < H * W; ++i) {
            plan.buf[i][0] = rng.gaussian();
            plan.buf[i][1] = 0.0;
        }
        fftw_execute(plan.forward);
        for (int u = 0; u < H; ++u) {
            const double fu = freq_index(u, H);
            for (int v = 0; v < W; ++v) {
                const double fv = freq_index(v, W);
                const double r2 = fu * fu + fv * fv;
                const bool keep = band == BandKind::low_pass ? r2 <= c2 : r2 > c2;
                if (!keep) {
                    plan.buf[u * W + v][0] = 0.0;
                    plan.buf[u * W + v][1] = 0.0;
                }
            }
        }
        fftw_execute(plan.inverse);
        const double inv = 1.0 / (static_cast<double>(H) * W);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x)
                out.at(y, x, c) = static_cast<float>(plan.buf[y * W + x][0] * inv);
    }

    double norm2 = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i)
        norm2 += static_cast<double>(out[i]) * out[i];
    if (norm2 <= 0.0)
        throw ConfigError("band mask removed all energy; cannot rescale to the L2 budget");
    const float scale = static_cast<float>(l2_norm / std::sqrt(norm2));
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= scale;
    return out;
}

SpectralReport spectral_report(const std::vector<Tensor<float>>& perturbations) {
    if (perturbations.empty()) throw ConfigError("spectral_report needs at least one tensor");
    const auto& first = perturbations.front();
    if (first.ndim() != 3) throw StructureError("spectral_report expects H x W x C tensors");
    const int H = first.dim(0), W = first.dim(1), C = first.dim(2);

    SpectralReport report;
    report.height = H;
    report.width = W;
    report.heatmap = Tensor<float>({H, W});
    std::vector<double> mag_sum(static_cast<std::size_t>(H) * W, 0.0);
    std::vector<double> pow_sum(static_cast<std::size_t>(H) * W, 0.0);
    double spatial = 0.0;

    Plan2D plan(H, W);
    long long n_fields = 0;
    for (const auto& t : perturbations) {
        if (t.ndim() != 3 || t.dim(0) != H || t.dim(1) != W || t.dim(2) != C)
            throw StructureError("spectral_report tensors must share one shape");
        for (int c = 0; c < C; ++c) {
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    const double v = t.at(y, x, c);
                    plan.buf[y * W + x][0] = v;
                    plan.buf[y * W + x][1] = 0.0;
                    spatial += v * v;
                }
            fftw_execute(plan.forward);
            for (int u = 0; u < H; ++u)
                for (int v = 0; v < W; ++v) {
                    const double re = plan.buf[u * W + v][0];
                    const double im = plan.buf[u * W + v][1];
                    const double p = re * re + im * im;
                    // center DC at (H/2, W/2)
                    const int su = (u + H / 2) % H;
                    const int sv = (v + W / 2) % W;
                    mag_sum[static_cast<std::size_t>(su) * W + sv] += std::sqrt(p);
                    pow_sum[static_cast<std::size_t>(su) * W + sv] += p;
                }
            ++n_fields;
        }
    }

    for (std::size_t i = 0; i < mag_sum.size(); ++i)
        report.heatmap[i] = static_cast<float>(mag_sum[i] / n_fields);

    double total_power = 0.0, low_power = 0.0;
    const int u0 = H / 2 - H / 4, u1 = H / 2 + H / 4;
    const int v0 = W / 2 - W / 4, v1 = W / 2 + W / 4;
    for (int u = 0; u < H; ++u)
        for (int v = 0; v < W; ++v) {
            const double p = pow_sum[static_cast<std::size_t>(u) * W + v];
            total_power += p;
            if (u >= u0 && u < u1 && v >= v0 && v < v1) low_power += p;
        }
    report.low_freq_energy_fraction = total_power > 0.0 ? low_power / total_power : 0.0;
    report.spatial_energy = spatial / n_fields;
    report.spectral_energy = total_power / (static_cast<double>(H) * W) / n_fields;
    return report;
}

}  // namespace pyramidat
