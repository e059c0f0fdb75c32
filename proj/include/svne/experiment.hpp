#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "svne/data.hpp"
#include "svne/inference.hpp"

namespace svne {

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DatasetConfig {
    bool builtin_toy = false;
    std::string name;  // label used in reports
    std::string csv_path;
    std::string target_column;
    Task task = Task::Regression;
    ToyConfig toy;
};

// One experiment: dataset, model, method, run settings. Parsed from a JSON
// file; see configs/ for annotated examples.
struct ExperimentConfig {
    DatasetConfig dataset;
    std::vector<std::size_t> hidden = {10};
    Activation activation = Activation::Tanh;
    MethodConfig method;
    std::string out_dir = "out";
    std::size_t folds = 5;
    double val_fraction = 0.2;
    bool standardize_targets = true;
    std::size_t snapshot_every = 20;
    bool nll_log_mixture = false;  // regression NLL on the exact mixture instead of its moments

    void validate() const;
};

ExperimentConfig load_config(const std::string& path);

struct CliOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out_dir;
    std::optional<std::size_t> folds;
};

// Worker-pool size for fold-level parallelism, from SVNE_WORKERS (default 1).
std::size_t worker_count();

// Train/evaluate every fold; writes metrics_fold*.json, history_fold*.csv,
// predictions_fold*.csv and checkpoint_fold*.json under out_dir. Failed folds
// are recorded and the remaining folds continue.
int cmd_run(ExperimentConfig cfg, const CliOverrides& overrides, std::ostream& log);

// Runs several method configs on the first config's dataset/folds/seed and
// writes a joint metrics table plus a joint per-epoch history.
int cmd_compare(std::vector<ExperimentConfig> cfgs, const CliOverrides& overrides, std::ostream& log);

// Training run that additionally dumps per-particle curvature matrices and
// their ensemble average at epoch 1 and every snapshot_every epochs.
int cmd_snapshot(ExperimentConfig cfg, const CliOverrides& overrides, std::ostream& log);

// Exposed for tests.
std::vector<DatasetSplit> resolve_folds(const ExperimentConfig& cfg);
MlpArchitecture architecture_for(const ExperimentConfig& cfg, const DatasetSplit& split);
struct FoldOutcome {
    bool ok = false;
    std::string error;
    std::vector<std::pair<std::string, double>> metrics;  // insertion-ordered
    TrainResult result;
};
FoldOutcome run_fold(const ExperimentConfig& cfg, const DatasetSplit& split, std::size_t fold,
                     std::ostream& log);

void atomic_write_text(const std::string& path, const std::string& content);

}  // namespace svne
