#include <cstdint>
#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "playerfl/errors.hpp"
#include "playerfl/harness.hpp"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Overrides {
    std::string config;
    std::optional<std::string> out;
    std::optional<std::string> seeds;
    std::optional<std::size_t> threads;
};

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
    std::vector<std::uint64_t> seeds;
    std::stringstream in(text);
    std::string item;
    while (std::getline(in, item, ',')) {
        const bool digits = !item.empty() && item.find_first_not_of("0123456789") == std::string::npos;
        if (!digits) throw playerfl::ConfigError("--seeds", 0, "expected a comma-separated list of integers");
        seeds.push_back(std::stoull(item));
    }
    if (seeds.empty()) throw playerfl::ConfigError("--seeds", 0, "at least one seed is required");
    return seeds;
}

playerfl::ExperimentConfig load(const Overrides& o) {
    playerfl::ExperimentConfig cfg = playerfl::parse_config(o.config);
    if (o.out) cfg.output_dir = *o.out;
    if (o.seeds) cfg.seeds = parse_seed_list(*o.seeds);
    if (o.threads) cfg.threads = *o.threads;
    playerfl::validate(cfg);
    return cfg;
}

void print_ranks(const playerfl::ResultBundle& bundle) {
    const auto it = bundle.ranks.find(playerfl::Metric::macro_f1);
    if (it == bundle.ranks.end()) return;
    std::printf("mean macro-F1 rank over %zu blocks\n", it->second.blocks.size());
    for (std::size_t j = 0; j < it->second.algorithms.size(); ++j) {
        std::printf("  %-20s %.3f\n", it->second.algorithms[j].c_str(), it->second.mean_ranks[j]);
    }
}

int run_command(const Overrides& o, bool curves) {
    const playerfl::ExperimentConfig cfg = load(o);
    playerfl::RunOptions options;
    options.results = !curves;
    options.curves = curves;
    const playerfl::ResultBundle bundle = playerfl::run_experiment(cfg, options);
    if (curves) {
        playerfl::emit_layer_curves(bundle, cfg.output_dir);
    } else {
        playerfl::emit_results(bundle, cfg.output_dir);
        print_ranks(bundle);
    }
    std::printf("wrote %s\n", cfg.output_dir.string().c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Layer-wise personalised federated learning experiments"};
    app.require_subcommand(1);

    Overrides run_args;
    Overrides curve_args;
    const auto add_common = [](CLI::App* cmd, Overrides& o) {
        cmd->add_option("config", o.config, "experiment config (YAML)")->required();
        cmd->add_option("--out", o.out, "output directory, overrides the config");
        cmd->add_option("--seeds", o.seeds, "comma-separated seeds, overrides the config");
        cmd->add_option("--threads", o.threads, "clients trained concurrently")->check(CLI::PositiveNumber);
    };
    CLI::App* run = app.add_subcommand("run", "train every configured algorithm and write results");
    add_common(run, run_args);
    CLI::App* curves = app.add_subcommand("curves", "write per-layer diagnostic curves");
    add_common(curves, curve_args);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        return run->parsed() ? run_command(run_args, false) : run_command(curve_args, true);
    } catch (const playerfl::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitRuntime;
    }
}
