#pragma once

#include <string>

#include "pyramidat/runconfig.hpp"

namespace pyramidat::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// train: writes resolved.cfg, metrics.csv and ckpt_<step>.bin under out_dir.
int cmd_train(const RunConfig& config);

/// attack: loads a checkpoint, attacks evaluation samples per the attack
/// spec, and writes per-sample arrays (+PNG previews) and a per-step loss CSV.
int cmd_attack(const RunConfig& config, const std::string& checkpoint);

/// eval: clean / corruption / white-box reports plus summary.json.
int cmd_eval(const RunConfig& config, const std::string& checkpoint);

/// analyze: Fourier heatmaps per perturbation source and band-limited-noise
/// robustness curves.
int cmd_analyze(const RunConfig& config, const std::string& checkpoint);

}  // namespace pyramidat::cli
