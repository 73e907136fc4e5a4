#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "pyramidat/aligned.hpp"
#include "pyramidat/errors.hpp"

namespace pyramidat {

/// Adam with decoupled weight decay. Moments are kept in float32; the decay
/// is applied directly to the parameters, not through the gradient.
struct AdamW {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;

    AVector<float> m;
    AVector<float> v;
    long long t = 0;

    void init(std::size_t n) {
        m.assign(n, 0.0f);
        v.assign(n, 0.0f);
        t = 0;
    }

    void step(AVector<float>& params, const AVector<float>& grads, double lr) {
        if (params.size() != m.size() || grads.size() != m.size())
            throw StructureError("optimizer state size mismatch");
        ++t;
        const float b1 = static_cast<float>(beta1);
        const float b2 = static_cast<float>(beta2);
        const float bc1 = 1.0f - static_cast<float>(std::pow(beta1, t));
        const float bc2 = 1.0f - static_cast<float>(std::pow(beta2, t));
        const float flr = static_cast<float>(lr);
        const float feps = static_cast<float>(eps);
        const float fwd = static_cast<float>(weight_decay);
        for (std::size_t i = 0; i < params.size(); ++i) {
            const float g = grads[i];
            m[i] = b1 * m[i] + (1.0f - b1) * g;
            v[i] = b2 * v[i] + (1.0f - b2) * g * g;
            const float mhat = m[i] / bc1;
            const float vhat = v[i] / bc2;
            params[i] -= flr * (mhat / (std::sqrt(vhat) + feps) + fwd * params[i]);
        }
    }
};

}  // namespace pyramidat
