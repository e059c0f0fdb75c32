#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "svne/experiment.hpp"

namespace {

svne::CliOverrides make_overrides(bool has_seed, std::uint64_t seed, const std::string& out,
                                  std::size_t folds) {
    svne::CliOverrides o;
    if (has_seed) o.seed = seed;
    if (!out.empty()) o.out_dir = out;
    if (folds != 0) o.folds = folds;
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Particle-ensemble training for small networks: independent MAP ensembles, "
                 "kernelized gradient transport, and curvature-preconditioned transport"};
    app.require_subcommand(1);

    std::uint64_t seed = 0;
    bool has_seed = false;
    std::string out_dir;
    std::size_t folds = 0;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--seed", seed, "override the experiment seed")->each([&](const std::string&) {
            has_seed = true;
        });
        cmd->add_option("--out", out_dir, "override the output directory");
        cmd->add_option("--folds", folds, "override the fold count");
    };

    std::string run_config;
    CLI::App* run = app.add_subcommand("run", "train and evaluate one config across folds");
    run->add_option("config", run_config, "JSON experiment config")->required();
    add_common(run);

    std::vector<std::string> compare_configs;
    CLI::App* compare = app.add_subcommand("compare", "run several configs on shared folds and seeds");
    compare->add_option("configs", compare_configs, "JSON experiment configs")->required()->expected(-1);
    add_common(compare);

    std::string snapshot_config;
    CLI::App* snapshot = app.add_subcommand("snapshot", "train with periodic curvature matrix dumps");
    snapshot->add_option("config", snapshot_config, "JSON experiment config")->required();
    add_common(snapshot);

    CLI11_PARSE(app, argc, argv);

    try {
        svne::CliOverrides overrides = make_overrides(has_seed, seed, out_dir, folds);
        if (run->parsed())
            return svne::cmd_run(svne::load_config(run_config), overrides, std::cout);
        if (compare->parsed()) {
            std::vector<svne::ExperimentConfig> cfgs;
            for (const std::string& path : compare_configs) cfgs.push_back(svne::load_config(path));
            return svne::cmd_compare(std::move(cfgs), overrides, std::cout);
        }
        if (snapshot->parsed())
            return svne::cmd_snapshot(svne::load_config(snapshot_config), overrides, std::cout);
    } catch (const svne::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
