#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "pyramidat/errors.hpp"
#include "pyramidat/image.hpp"
#include "pyramidat/pyramid.hpp"
#include "pyramidat/vit.hpp"

namespace pyramidat {

/// Outcome of one attack over a batch: the materialized adversarial images,
/// the optimized (projected) pyramid, the attack loss trajectory, and the
/// labels the attack optimized toward.
template <class S>
struct AttackResult {
    ImageBatch<S> perturbed;
    PerturbationPyramid<S> pyramid;
    std::vector<double> per_step_loss;  // [0] is the pre-attack loss
    std::vector<int> target_labels;
};

/// Single-level pixel attack configuration.
struct PixelSpec {
    double eps = 4.0 / 255.0;
    double step_size = 1.0 / 255.0;
    int n_steps = 5;
    TargetMode target_mode = TargetMode::random_target;
    RandomMode random_mode = RandomMode::adversarial;

    PyramidSpec as_pyramid() const {
        PyramidSpec s;
        s.scales = {1};
        s.multipliers = {1.0};
        s.eps = {eps};
        s.step_size = step_size;
        s.n_steps = n_steps;
        s.target_mode = target_mode;
        s.random_mode = random_mode;
        return s;
    }
};

/// Projected gradient descent over a perturbation pyramid.
///
/// With target_mode == random_target the attack draws one random wrong label
/// per example (fixed for the whole attack) and minimizes the cross-entropy
/// toward it with signed steps; with untargeted it maximizes the true-label
/// cross-entropy. Inside the loop the image fed to the model is
/// x + expand(pyramid) without the [0,1] clip; the clip is applied once when
/// materializing the output. Every forward pass uses the given
/// DropRealization, so a matched configuration reproduces identical masks
/// across all steps. After each signed step the pyramid is projected back
/// into its per-level eps balls.
///
/// With random_mode == random_sign no gradients are taken: the pyramid is
/// filled with full-budget sign noise and per_step_loss has a single entry
/// (the pre-attack loss).
template <class S>
AttackResult<S> pgd_pyramid_attack(const ModelParams<S>& params, const DropRealization& drop,
                                   const ImageBatch<S>& batch, const PyramidSpec& spec,
                                   std::uint64_t seed, int threads = 1,
                                   MaskRecorder* recorder = nullptr) {
    spec.validate();
    const int B = batch.batch_size();
    const ImageShape shape = batch.image_shape();
    if (B <= 0) throw ConfigError("attack needs a nonempty batch");

    AttackResult<S> result;
    result.target_labels = spec.target_mode == TargetMode::random_target
                               ? select_targets(batch.labels, params.config.n_classes, seed)
                               : batch.labels;
    // Descend toward a random target; ascend on the true label.
    const S direction = spec.target_mode == TargetMode::random_target ? S(-1) : S(1);

    PerturbationPyramid<S> pyr = init_pyramid<S>(spec, B, shape);

    const auto attack_loss = [&](const PerturbationPyramid<S>& p, Tensor<S>* dpixels,
                                 MaskRecorder* rec) {
        Tensor<S> x = batch.pixels;
        Tensor<S> delta = expand_pyramid(p, spec, B, shape);
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += delta[i];
        if (dpixels == nullptr) {
            Tensor<S> logits = forward(params, x, drop, rec, threads);
            auto ce = softmax_cross_entropy(logits, result.target_labels, S(0));
            return ce.loss_sum / B;
        }
        auto r = forward_backward<S>(params, x, result.target_labels, drop,
                                     GradKind::input_only, nullptr, dpixels, rec, threads);
        return r.mean_loss;
    };

    if (spec.random_mode == RandomMode::random_sign) {
        result.per_step_loss.push_back(attack_loss(pyr, nullptr, recorder));
        pyr = random_perturbation<S>(spec, B, shape, seed);
        result.pyramid = project_pyramid(pyr, spec);
        result.perturbed = apply_pyramid(batch, result.pyramid, spec);
        return result;
    }

    for (int step = 0; step < spec.n_steps; ++step) {
        Tensor<S> dpixels;
        const double loss = attack_loss(pyr, &dpixels, recorder);
        if (!std::isfinite(loss)) throw NumericError("non-finite attack loss");
        result.per_step_loss.push_back(loss);
        PerturbationPyramid<S> grad = expand_pyramid_backward(dpixels, pyr, spec, B, shape);
        const S lr = static_cast<S>(spec.step_size);
        for (std::size_t l = 0; l < pyr.levels.size(); ++l) {
            Tensor<S>& lvl = pyr.levels[l];
            const Tensor<S>& g = grad.levels[l];
            for (std::size_t i = 0; i < lvl.size(); ++i) {
                if (!std::isfinite(static_cast<double>(g[i])))
                    throw NumericError("non-finite attack gradient");
                const S s = g[i] > S(0) ? S(1) : (g[i] < S(0) ? S(-1) : S(0));
                lvl[i] += direction * lr * s;
            }
        }
        pyr = project_pyramid(pyr, spec);
    }
    result.per_step_loss.push_back(attack_loss(pyr, nullptr, recorder));

    result.pyramid = std::move(pyr);
    result.perturbed = apply_pyramid(batch, result.pyramid, spec);
    return result;
}

/// The pixel special case: a one-level pyramid with unit multiplier.
template <class S>
AttackResult<S> pgd_pixel_attack(const ModelParams<S>& params, const DropRealization& drop,
                                 const ImageBatch<S>& batch, const PixelSpec& spec,
                                 std::uint64_t seed, int threads = 1,
                                 MaskRecorder* recorder = nullptr) {
    return pgd_pyramid_attack(params, drop, batch, spec.as_pyramid(), seed, threads, recorder);
}

}  // namespace pyramidat
