#pragma once

#include <cmath>

namespace pyramidat {

/// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
/// at total_steps: lr(t) = base * 0.5 * (1 + cos(pi * progress)).
inline double cosine_warmup_lr(long long step, long long warmup_steps, long long total_steps,
                               double base_lr) {
    if (step <= 0 && warmup_steps > 0) return 0.0;
    if (step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

}  // namespace pyramidat
