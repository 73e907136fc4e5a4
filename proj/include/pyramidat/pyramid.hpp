#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "pyramidat/errors.hpp"
#include "pyramidat/image.hpp"
#include "pyramidat/rng.hpp"
#include "pyramidat/tensor.hpp"

namespace pyramidat {

enum class TargetMode { random_target, untargeted };
enum class RandomMode { adversarial, random_sign };

/// Configuration of a multi-scale perturbation and of the PGD loop that
/// optimizes it. A scale of 1 means one learned parameter per pixel; a scale
/// of s means one parameter per s x s cell, block-replicated to image size.
struct PyramidSpec {
    std::vector<int> scales;          // coarsest first; pixels per cell side
    std::vector<double> multipliers;  // m_s, applied after the per-level clip
    std::vector<double> eps;          // per-level L-inf budget, image units
    double step_size = 1.0 / 255.0;   // signed step per PGD iteration
    int n_steps = 5;
    TargetMode target_mode = TargetMode::random_target;
    RandomMode random_mode = RandomMode::adversarial;

    std::size_t levels() const { return scales.size(); }

    void validate() const {
        if (scales.empty()) throw ConfigError("pyramid spec needs at least one scale");
        if (multipliers.size() != scales.size() || eps.size() != scales.size())
            throw ConfigError("pyramid spec lists must have identical lengths");
        for (int s : scales)
            if (s <= 0) throw ConfigError("pyramid scales must be positive");
        for (double m : multipliers)
            if (!(m > 0.0)) throw ConfigError("pyramid multipliers must be positive");
        for (double e : eps)
            if (!(e >= 0.0)) throw ConfigError("pyramid eps must be nonnegative");
        if (n_steps < 0) throw ConfigError("n_steps must be nonnegative");
        if (n_steps > 0 && !(step_size > 0.0))
            throw ConfigError("step_size must be positive when n_steps > 0");
    }

    /// The paper-scale defaults: 3 levels on 224px images, 16px patches.
    static PyramidSpec paper_defaults() {
        PyramidSpec s;
        s.scales = {32, 16, 1};
        s.multipliers = {20.0, 10.0, 1.0};
        s.eps = {6.0 / 255.0, 6.0 / 255.0, 6.0 / 255.0};
        s.step_size = 1.0 / 255.0;
        s.n_steps = 5;
        return s;
    }

    /// Desk-scale defaults for 32px images with 4px patches: coarse = 2x2
    /// patches, mid = one patch, fine = pixel.
    static PyramidSpec desk_defaults() {
        PyramidSpec s = paper_defaults();
        s.scales = {8, 4, 1};
        return s;
    }

    /// The single-level pixel attack as a pyramid spec.
    static PyramidSpec pixel(double eps_value = 4.0 / 255.0, double step = 1.0 / 255.0,
                             int steps = 5) {
        PyramidSpec s;
        s.scales = {1};
        s.multipliers = {1.0};
        s.eps = {eps_value};
        s.step_size = step;
        s.n_steps = steps;
        return s;
    }
};

/// Grid height/width for one level over an image: non-dividing scales get a
/// ceil-sized grid whose boundary cells cover the truncated remainder.
inline int level_cells(int extent, int scale) {
    return (extent + scale - 1) / scale;
}

/// Per-image-batch perturbation grids, one tensor per level with shape
/// B x ceil(H/s) x ceil(W/s) x C.
template <class S>
struct PerturbationPyramid {
    std::vector<Tensor<S>> levels;

    bool matches(const PyramidSpec& spec, int batch, const ImageShape& shape) const {
        if (levels.size() != spec.levels()) return false;
        for (std::size_t l = 0; l < levels.size(); ++l) {
            const int s = spec.scales[l];
            const std::vector<int> want = {batch, level_cells(shape.height, s),
                                           level_cells(shape.width, s), shape.channels};
            if (levels[l].shape() != want) return false;
        }
        return true;
    }
};

/// All-zero pyramid with level shapes determined by (batch, shape, scales).
template <class S>
PerturbationPyramid<S> init_pyramid(const PyramidSpec& spec, int batch, const ImageShape& shape) {
    spec.validate();
    shape.validate();
    if (batch <= 0) throw ConfigError("batch size must be positive");
    PerturbationPyramid<S> pyr;
    pyr.levels.reserve(spec.levels());
    for (int s : spec.scales) {
        pyr.levels.emplace_back(std::vector<int>{batch, level_cells(shape.height, s),
                                                 level_cells(shape.width, s), shape.channels});
    }
    return pyr;
}

namespace detail {
template <class S>
inline S clip_sym(S v, S bound) {
    return v < -bound ? -bound : (v > bound ? bound : v);
}
}  // namespace detail

/// Sum over levels of m_s * clip(delta_s, +-eps_s), each level
/// nearest-neighbor (block-replicate) upsampled to image size.
/// Output shape: B x H x W x C.
template <class S>
Tensor<S> expand_pyramid(const PerturbationPyramid<S>& pyr, const PyramidSpec& spec, int batch,
                         const ImageShape& shape) {
    spec.validate();
    shape.validate();
    if (!pyr.matches(spec, batch, shape))
        throw StructureError("pyramid levels do not match spec/shape");
    Tensor<S> out({batch, shape.height, shape.width, shape.channels});
    const int C = shape.channels;
    for (std::size_t l = 0; l < spec.levels(); ++l) {
        const int s = spec.scales[l];
        const S m = static_cast<S>(spec.multipliers[l]);
        const S e = static_cast<S>(spec.eps[l]);
        const Tensor<S>& lvl = pyr.levels[l];
        for (int b = 0; b < batch; ++b) {
            for (int i = 0; i < shape.height; ++i) {
                const int ci = i / s;
                for (int j = 0; j < shape.width; ++j) {
                    const int cj = j / s;
                    const S* src = &lvl.at(b, ci, cj, 0);
                    S* dst = &out.at(b, i, j, 0);
                    for (int c = 0; c < C; ++c) dst[c] += m * detail::clip_sym(src[c], e);
                }
            }
        }
    }
    return out;
}

/// Backpropagate an image-space gradient onto every level: each cell receives
/// m_s times the sum of pixel gradients it covers, masked to zero where the
/// per-level clip is saturated (|delta| > eps).
template <class S>
PerturbationPyramid<S> expand_pyramid_backward(const Tensor<S>& image_grad,
                                               const PerturbationPyramid<S>& pyr,
                                               const PyramidSpec& spec, int batch,
                                               const ImageShape& shape) {
    if (!pyr.matches(spec, batch, shape))
        throw StructureError("pyramid levels do not match spec/shape");
    PerturbationPyramid<S> grad = init_pyramid<S>(spec, batch, shape);
    const int C = shape.channels;
    for (std::size_t l = 0; l < spec.levels(); ++l) {
        const int s = spec.scales[l];
        const S m = static_cast<S>(spec.multipliers[l]);
        const S e = static_cast<S>(spec.eps[l]);
        const Tensor<S>& lvl = pyr.levels[l];
        Tensor<S>& g = grad.levels[l];
        for (int b = 0; b < batch; ++b) {
            for (int i = 0; i < shape.height; ++i) {
                const int ci = i / s;
                for (int j = 0; j < shape.width; ++j) {
                    const int cj = j / s;
                    const S* gin = &image_grad.at(b, i, j, 0);
                    S* gout = &g.at(b, ci, cj, 0);
                    const S* v = &lvl.at(b, ci, cj, 0);
                    for (int c = 0; c < C; ++c) {
                        if (v[c] >= -e && v[c] <= e) gout[c] += m * gin[c];
                    }
                }
            }
        }
    }
    return grad;
}

/// clip01(x + expand(pyramid)); labels pass through unchanged.
template <class S>
ImageBatch<S> apply_pyramid(const ImageBatch<S>& x, const PerturbationPyramid<S>& pyr,
                            const PyramidSpec& spec) {
    const int batch = x.batch_size();
    const ImageShape shape = x.image_shape();
    Tensor<S> delta = expand_pyramid(pyr, spec, batch, shape);
    ImageBatch<S> out;
    out.pixels = x.pixels;
    out.labels = x.labels;
    for (std::size_t i = 0; i < delta.size(); ++i)
        out.pixels[i] = clamp01<S>(out.pixels[i] + delta[i]);
    return out;
}

/// Elementwise projection of every level into its L-inf ball [-eps_s, eps_s].
template <class S>
PerturbationPyramid<S> project_pyramid(const PerturbationPyramid<S>& pyr,
                                       const PyramidSpec& spec) {
    if (pyr.levels.size() != spec.levels())
        throw StructureError("pyramid level count does not match spec");
    PerturbationPyramid<S> out = pyr;
    for (std::size_t l = 0; l < out.levels.size(); ++l) {
        const S e = static_cast<S>(spec.eps[l]);
        Tensor<S>& lvl = out.levels[l];
        for (std::size_t i = 0; i < lvl.size(); ++i) lvl[i] = detail::clip_sym(lvl[i], e);
    }
    return out;
}

/// Uniformly random wrong label per example; deterministic in seed.
inline std::vector<int> select_targets(const std::vector<int>& labels, int n_classes,
                                       std::uint64_t seed) {
    if (n_classes < 2) throw ConfigError("select_targets needs at least 2 classes");
    Rng rng(key_stream(seed, "targets"));
    std::vector<int> targets(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= n_classes) throw StructureError("label out of range");
        int t = static_cast<int>(rng.bounded(static_cast<std::uint64_t>(n_classes - 1)));
        if (t >= labels[i]) ++t;
        targets[i] = t;
    }
    return targets;
}

/// Full-budget sign noise on every level: entries are eps_s * u, u in {-1,+1}.
/// Realizes the random-perturbation training baselines.
template <class S>
PerturbationPyramid<S> random_perturbation(const PyramidSpec& spec, int batch,
                                           const ImageShape& shape, std::uint64_t seed) {
    PerturbationPyramid<S> pyr = init_pyramid<S>(spec, batch, shape);
    for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
        const S e = static_cast<S>(spec.eps[l]);
        Tensor<S>& lvl = pyr.levels[l];
        const std::uint64_t level_key = key_stream(seed, "random_perturbation", l);
        for (std::size_t i = 0; i < lvl.size(); ++i) {
            lvl[i] = e * static_cast<S>(key_sign(key_mix(level_key, i)));
        }
    }
    return pyr;
}

}  // namespace pyramidat
