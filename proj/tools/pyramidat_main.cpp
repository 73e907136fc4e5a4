#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "pyramidat/cli.hpp"

using namespace pyramidat;

namespace {

struct GlobalArgs {
    std::string config_path;
    std::vector<std::string> sets;
    std::string out;
    long long seed = -1;
    std::string checkpoint;
};

RunConfig build_config(const GlobalArgs& args) {
    RunConfig config = args.config_path.empty()
                           ? RunConfig::from_overrides(args.sets)
                           : RunConfig::from_file(args.config_path, args.sets);
    if (!args.out.empty()) config.set("out_dir", args.out);
    if (args.seed >= 0) config.set("seed", std::to_string(args.seed));
    return config;
}

void add_common(CLI::App* cmd, GlobalArgs& args, bool needs_checkpoint) {
    cmd->add_option("--config", args.config_path, "Config file (see configs/base.cfg)");
    cmd->add_option("--set", args.sets, "Override: key=value (repeatable)");
    cmd->add_option("--out", args.out, "Output directory (overrides out_dir)");
    cmd->add_option("--seed", args.seed, "Global seed (overrides seed)");
    if (needs_checkpoint)
        cmd->add_option("--checkpoint", args.checkpoint, "Checkpoint file")->required();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-scale adversarial training for small vision transformers"};
    app.require_subcommand(1);

    GlobalArgs args;
    CLI::App* train = app.add_subcommand("train", "Train a model");
    CLI::App* attack = app.add_subcommand("attack", "Attack samples and dump artifacts");
    CLI::App* eval = app.add_subcommand("eval", "Clean/corruption/white-box evaluation");
    CLI::App* analyze = app.add_subcommand("analyze", "Spectral heatmaps and noise curves");
    add_common(train, args, false);
    add_common(attack, args, true);
    add_common(eval, args, true);
    add_common(analyze, args, true);

    CLI11_PARSE(app, argc, argv);

    try {
        const RunConfig config = build_config(args);
        if (train->parsed()) return cli::cmd_train(config);
        if (attack->parsed()) return cli::cmd_attack(config, args.checkpoint);
        if (eval->parsed()) return cli::cmd_eval(config, args.checkpoint);
        if (analyze->parsed()) return cli::cmd_analyze(config, args.checkpoint);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return cli::kExitUsage;
    } catch (const DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cli::kExitUsage;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return cli::kExitFailure;
    }
    return cli::kExitUsage;
}
