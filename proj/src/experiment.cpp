#include "svne/experiment.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "svne/curvature.hpp"
#include "svne/metrics.hpp"

namespace svne {

namespace fs = std::filesystem;
using nlohmann::json;

void ExperimentConfig::validate() const {
    method.validate();
    if (hidden.empty() && dataset.task == Task::Regression) {
        // a bare linear model is allowed; nothing to check
    }
    for (std::size_t h : hidden)
        if (h == 0) throw ConfigError("config: hidden layer sizes must be positive");
    if (!dataset.builtin_toy) {
        if (dataset.csv_path.empty()) throw ConfigError("config: dataset needs 'builtin': \"toy\" or a csv path");
        if (!fs::exists(dataset.csv_path))
            throw ConfigError("config: dataset file does not exist: " + dataset.csv_path);
        if (dataset.target_column.empty()) throw ConfigError("config: target_column required for csv datasets");
        if (folds < 2) throw ConfigError("config: csv datasets need folds >= 2");
    }
    if (!(val_fraction > 0.0 && val_fraction < 1.0))
        throw ConfigError("config: val_fraction must be in (0, 1)");
}

namespace {

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

MethodConfig parse_method(const json& j) {
    MethodConfig m;
    m.method = method_from_name(j.at("name").get<std::string>());
    m.curvature = curvature_kind_from_name(get_or<std::string>(j, "curvature", "full"));
    std::string system = get_or<std::string>(j, "svn_system", "full");
    if (system == "full")
        m.svn_system = SvnSystem::Full;
    else if (system == "block_diagonal")
        m.svn_system = SvnSystem::BlockDiagonal;
    else
        throw ConfigError("config: unknown svn_system: " + system);
    std::string metric = get_or<std::string>(j, "kernel_metric",
                                             m.method == Method::Svgd ? "identity" : "avg_curvature");
    if (metric == "identity")
        m.kernel_metric = KernelMetric::Identity;
    else if (metric == "avg_curvature")
        m.kernel_metric = KernelMetric::AvgCurvature;
    else
        throw ConfigError("config: unknown kernel_metric: " + metric);
    std::string bandwidth = get_or<std::string>(j, "kernel_bandwidth", "dim_scaled");
    if (bandwidth == "dim_scaled")
        m.kernel_bandwidth = KernelBandwidth::DimScaled;
    else if (bandwidth == "median")
        m.kernel_bandwidth = KernelBandwidth::Median;
    else
        throw ConfigError("config: unknown kernel_bandwidth: " + bandwidth);
    m.step_size = get_or<double>(j, "step_size", 1e-2);
    m.epochs = get_or<std::size_t>(j, "epochs", 50);
    m.batch_size = get_or<std::size_t>(j, "batch_size", 16);
    m.seed = get_or<std::uint64_t>(j, "seed", 0);
    m.particles = get_or<std::size_t>(j, "particles", 5);
    m.prior_precision = get_or<double>(j, "prior_precision", 1.0);
    m.curvature_refresh = get_or<std::size_t>(j, "curvature_refresh", 1);
    m.full_matrix_cap = get_or<std::size_t>(j, "full_matrix_cap", 5000);
    if (j.contains("cg")) {
        const json& cg = j.at("cg");
        m.cg.max_iters = get_or<std::size_t>(cg, "max_iters", 50);
        m.cg.tol = get_or<double>(cg, "tol", 1e-6);
        m.cg.damping = get_or<double>(cg, "damping", 1e-6);
    }
    return m;
}

}  // namespace

ExperimentConfig load_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config: " + path);
    json j;
    try {
        j = json::parse(f);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }

    ExperimentConfig cfg;
    try {
        const json& ds = j.at("dataset");
        if (ds.contains("builtin")) {
            std::string b = ds.at("builtin").get<std::string>();
            if (b != "toy") throw ConfigError("config: unknown builtin dataset: " + b);
            cfg.dataset.builtin_toy = true;
            cfg.dataset.name = "toy";
            cfg.dataset.task = Task::Regression;
            cfg.dataset.toy.seed = get_or<std::uint64_t>(ds, "seed", 42);
            cfg.dataset.toy.train_count = get_or<std::size_t>(ds, "train_count", 150);
            cfg.dataset.toy.test_count = get_or<std::size_t>(ds, "test_count", 200);
            cfg.dataset.toy.val_count = get_or<std::size_t>(ds, "val_count", 30);
            cfg.dataset.toy.noise_std = get_or<double>(ds, "noise_std", 0.25);
            cfg.dataset.toy.blob_low_count = get_or<std::size_t>(ds, "blob_low_count", 0);
            cfg.dataset.toy.blob_high_count = get_or<std::size_t>(ds, "blob_high_count", 0);
            cfg.folds = 1;
        } else {
            cfg.dataset.csv_path = ds.at("csv").get<std::string>();
            cfg.dataset.target_column = ds.at("target_column").get<std::string>();
            cfg.dataset.task = task_from_name(get_or<std::string>(ds, "task", "regression"));
            cfg.dataset.name = get_or<std::string>(ds, "name", fs::path(cfg.dataset.csv_path).stem().string());
        }
        if (j.contains("model")) {
            const json& model = j.at("model");
            cfg.hidden = get_or<std::vector<std::size_t>>(model, "hidden", {10});
            cfg.activation = activation_from_name(get_or<std::string>(model, "activation", "tanh"));
        }
        cfg.method = parse_method(j.at("method"));
        if (j.contains("run")) {
            const json& run = j.at("run");
            cfg.out_dir = get_or<std::string>(run, "out_dir", "out");
            if (run.contains("folds")) cfg.folds = run.at("folds").get<std::size_t>();
            cfg.val_fraction = get_or<double>(run, "val_fraction", 0.2);
            cfg.standardize_targets = get_or<bool>(run, "standardize_targets", true);
            cfg.snapshot_every = get_or<std::size_t>(run, "snapshot_every", 20);
            cfg.nll_log_mixture = get_or<bool>(run, "nll_log_mixture", false);
        }
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config error: ") + e.what());
    }
    return cfg;
}

std::size_t worker_count() {
    const char* env = std::getenv("SVNE_WORKERS");
    if (env == nullptr) return 1;
    long v = std::strtol(env, nullptr, 10);
    return v > 0 ? static_cast<std::size_t>(v) : 1;
}

void atomic_write_text(const std::string& path, const std::string& content) {
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot open " + tmp);
        f << content;
    }
    fs::rename(tmp, path);
}

std::vector<DatasetSplit> resolve_folds(const ExperimentConfig& cfg) {
    if (cfg.dataset.builtin_toy) {
        ToyConfig toy = cfg.dataset.toy;
        DatasetSplit split = toy_regression(toy);
        return {standardize(std::move(split), cfg.standardize_targets)};
    }
    RawTable table = load_csv(cfg.dataset.csv_path);
    std::size_t target = table.column_index(cfg.dataset.target_column);
    DenseMatrix x(table.values.rows, table.values.cols - 1);
    DenseMatrix y(table.values.rows, 1);
    for (std::size_t r = 0; r < table.values.rows; ++r) {
        std::size_t cc = 0;
        for (std::size_t c = 0; c < table.values.cols; ++c) {
            if (c == target)
                y(r, 0) = table.values(r, c);
            else
                x(r, cc++) = table.values(r, c);
        }
    }
    if (cfg.dataset.task != Task::Regression) {
        for (double v : y.data)
            if (v != std::floor(v) || v < 0.0)
                throw ConfigError("config: classification targets must be non-negative integers");
    }
    auto folds = kfold_splits(x, y, cfg.dataset.task, cfg.folds, cfg.val_fraction, cfg.method.seed);
    for (auto& f : folds) f = standardize(std::move(f), cfg.standardize_targets);
    return folds;
}

MlpArchitecture architecture_for(const ExperimentConfig& cfg, const DatasetSplit& split) {
    MlpArchitecture arch;
    arch.activation = cfg.activation;
    arch.layer_sizes.push_back(split.input_dim());
    for (std::size_t h : cfg.hidden) arch.layer_sizes.push_back(h);
    switch (split.task) {
        case Task::Regression:
            arch.head = Head::GaussianRegression;
            arch.layer_sizes.push_back(2);
            break;
        case Task::Binary:
            arch.head = Head::BinaryClassification;
            arch.layer_sizes.push_back(1);
            break;
        case Task::Multiclass:
            arch.head = Head::Multiclass;
            arch.layer_sizes.push_back(split.class_count());
            break;
    }
    arch.validate();
    return arch;
}

namespace {

Vector column(const DenseMatrix& m, std::size_t c) {
    Vector out(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) out[r] = m(r, c);
    return out;
}

std::vector<int> labels_of(const DenseMatrix& y) {
    std::vector<int> out(y.rows);
    for (std::size_t r = 0; r < y.rows; ++r) out[r] = static_cast<int>(y(r, 0));
    return out;
}

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<std::pair<std::string, double>> evaluate_test(const ExperimentConfig& cfg,
                                                          const DatasetSplit& split,
                                                          const ParticleEnsemble& ens) {
    std::vector<std::pair<std::string, double>> metrics;
    if (split.task == Task::Regression) {
        RegressionSummary s = predictive_regression(ens, split.test_x);
        Vector targets = column(split.test_y, 0);
        double nll = cfg.nll_log_mixture ? nll_regression_log_mixture(ens, split.test_x, targets)
                                         : nll_regression(s, targets);
        double err = mse(s.mean, targets);
        metrics.emplace_back("nll", nll);
        metrics.emplace_back("mse", err);
        // the same numbers on the original target scale, for cross-run comparison
        double sd = split.targets_standardized ? split.target_scaler.std[0] : 1.0;
        metrics.emplace_back("mse_raw", err * sd * sd);
        metrics.emplace_back("nll_raw", nll + std::log(sd));
    } else {
        DenseMatrix probs = predictive_class_probs(ens, split.test_x);
        std::vector<int> labels = labels_of(split.test_y);
        metrics.emplace_back("acc", accuracy(probs, labels));
        metrics.emplace_back("nll", nll_classification(ens, split.test_x, labels));
        metrics.emplace_back("ece", ece(probs, labels));
        metrics.emplace_back("brier", brier(probs, labels));
        if (split.task == Task::Binary) {
            metrics.emplace_back("auroc", auroc(column(probs, 1), labels));
        }
    }
    return metrics;
}

std::string metrics_report_json(const ExperimentConfig& cfg, std::size_t fold,
                                const FoldOutcome& outcome) {
    std::ostringstream out;
    out << "{\n"
        << "  \"method\": \"" << method_name(cfg.method.method) << "\",\n"
        << "  \"dataset\": \"" << cfg.dataset.name << "\",\n"
        << "  \"fold\": " << fold << ",\n"
        << "  \"seed\": " << cfg.method.seed << ",\n"
        << "  \"best_epoch\": " << outcome.result.best_epoch << ",\n"
        << "  \"metrics\": {\n";
    for (std::size_t i = 0; i < outcome.metrics.size(); ++i)
        out << "    \"" << outcome.metrics[i].first << "\": " << format_double(outcome.metrics[i].second)
            << (i + 1 < outcome.metrics.size() ? "," : "") << "\n";
    out << "  }\n}\n";
    return out.str();
}

std::string history_csv(const TrainResult& result) {
    std::ostringstream out;
    out << "epoch,split,metric,value\n";
    for (const EpochRecord& r : result.history) {
        out << r.epoch << ",train,loss," << format_double(r.train_loss) << "\n";
        out << r.epoch << ",val,nll," << format_double(r.val_nll) << "\n";
        out << r.epoch << ",step,rejections," << r.rejections << "\n";
        out << r.epoch << ",step,cg_iterations," << r.cg_iterations << "\n";
        out << r.epoch << ",step,wall_seconds," << format_double(r.wall_seconds) << "\n";
    }
    return out.str();
}

std::string predictions_csv(const ExperimentConfig& cfg, const DatasetSplit& split,
                            const ParticleEnsemble& ens) {
    std::ostringstream out;
    const std::size_t m = split.test_x.cols;
    if (split.task == Task::Regression) {
        for (std::size_t c = 0; c < m; ++c) out << "x" << c << ",";
        out << "target,pred_mean,pred_std\n";
        RegressionSummary s = predictive_regression(ens, split.test_x);
        for (std::size_t r = 0; r < split.test_x.rows; ++r) {
            for (std::size_t c = 0; c < m; ++c) {
                double raw = split.standardized
                                 ? split.test_x(r, c) * split.feature_scaler.std[c] + split.feature_scaler.mean[c]
                                 : split.test_x(r, c);
                out << format_double(raw) << ",";
            }
            out << format_double(destandardize_target(split, split.test_y(r, 0))) << ","
                << format_double(destandardize_target(split, s.mean[r])) << ","
                << format_double(destandardize_scale(split, s.std[r])) << "\n";
        }
    } else {
        DenseMatrix probs = predictive_class_probs(ens, split.test_x);
        for (std::size_t c = 0; c < m; ++c) out << "x" << c << ",";
        out << "target";
        for (std::size_t c = 0; c < probs.cols; ++c) out << ",p" << c;
        out << "\n";
        for (std::size_t r = 0; r < split.test_x.rows; ++r) {
            for (std::size_t c = 0; c < m; ++c) {
                double raw = split.standardized
                                 ? split.test_x(r, c) * split.feature_scaler.std[c] + split.feature_scaler.mean[c]
                                 : split.test_x(r, c);
                out << format_double(raw) << ",";
            }
            out << static_cast<int>(split.test_y(r, 0));
            for (std::size_t c = 0; c < probs.cols; ++c) out << "," << format_double(probs(r, c));
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace

FoldOutcome run_fold(const ExperimentConfig& cfg, const DatasetSplit& split, std::size_t fold,
                     std::ostream& log) {
    FoldOutcome outcome;
    try {
        MlpArchitecture arch = architecture_for(cfg, split);
        log << "fold " << fold << ": training " << method_name(cfg.method.method) << " on "
            << cfg.dataset.name << " (d=" << arch.param_count() << ")\n";
        outcome.result = train(split, arch, cfg.method, nullptr, &log);
        if (outcome.result.aborted) {
            outcome.error = outcome.result.abort_reason;
            return outcome;
        }
        const ParticleEnsemble& best =
            outcome.result.history.empty() ? outcome.result.last : outcome.result.best;
        outcome.metrics = evaluate_test(cfg, split, best);
        outcome.ok = true;
    } catch (const std::exception& e) {
        outcome.error = e.what();
    }
    return outcome;
}

namespace {

void write_fold_outputs(const ExperimentConfig& cfg, const DatasetSplit& split, std::size_t fold,
                        const FoldOutcome& outcome) {
    fs::path dir(cfg.out_dir);
    const std::string suffix = "_fold" + std::to_string(fold);
    atomic_write_text((dir / ("metrics" + suffix + ".json")).string(),
                      metrics_report_json(cfg, fold, outcome));
    atomic_write_text((dir / ("history" + suffix + ".csv")).string(), history_csv(outcome.result));
    const ParticleEnsemble& best =
        outcome.result.history.empty() ? outcome.result.last : outcome.result.best;
    atomic_write_text((dir / ("predictions" + suffix + ".csv")).string(),
                      predictions_csv(cfg, split, best));
    Checkpoint ckpt{best.arch, cfg.method.seed, best.particles};
    save_checkpoint(ckpt, (dir / ("checkpoint" + suffix + ".json")).string());
}

int run_all_folds(const ExperimentConfig& cfg, const std::vector<DatasetSplit>& folds,
                  std::vector<FoldOutcome>& outcomes, std::ostream& log) {
    outcomes.resize(folds.size());
    const std::size_t workers = std::min(worker_count(), folds.size());
    if (workers <= 1) {
        for (std::size_t f = 0; f < folds.size(); ++f) outcomes[f] = run_fold(cfg, folds[f], f, log);
    } else {
        std::vector<std::future<void>> tasks;
        std::atomic<std::size_t> next{0};
        std::mutex log_mutex;
        for (std::size_t w = 0; w < workers; ++w) {
            tasks.push_back(std::async(std::launch::async, [&]() {
                for (;;) {
                    std::size_t f = next.fetch_add(1);
                    if (f >= folds.size()) return;
                    std::ostringstream local;
                    outcomes[f] = run_fold(cfg, folds[f], f, local);
                    std::lock_guard<std::mutex> guard(log_mutex);
                    log << local.str();
                }
            }));
        }
        for (auto& t : tasks) t.get();
    }

    int failures = 0;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        write_fold_outputs(cfg, folds[f], f, outcomes[f]);
        if (!outcomes[f].ok) {
            ++failures;
            log << "fold " << f << " failed: " << outcomes[f].error << "\n";
        }
    }
    return failures;
}

void apply_overrides(ExperimentConfig& cfg, const CliOverrides& o) {
    if (o.seed) cfg.method.seed = *o.seed;
    if (o.out_dir) cfg.out_dir = *o.out_dir;
    if (o.folds) cfg.folds = *o.folds;
}

}  // namespace

int cmd_run(ExperimentConfig cfg, const CliOverrides& overrides, std::ostream& log) {
    apply_overrides(cfg, overrides);
    cfg.validate();
    auto folds = resolve_folds(cfg);
    std::vector<FoldOutcome> outcomes;
    int failures = run_all_folds(cfg, folds, outcomes, log);
    if (failures > 0) {
        log << failures << " of " << folds.size() << " folds failed\n";
        return 3;
    }
    log << "wrote results for " << folds.size() << " fold(s) to " << cfg.out_dir << "\n";
    return 0;
}

int cmd_compare(std::vector<ExperimentConfig> cfgs, const CliOverrides& overrides, std::ostream& log) {
    if (cfgs.empty()) throw ConfigError("compare: need at least one config");
    for (auto& cfg : cfgs) apply_overrides(cfg, overrides);
    // shared data: every method sees the first config's dataset, folds and seed
    for (std::size_t i = 1; i < cfgs.size(); ++i) {
        cfgs[i].dataset = cfgs[0].dataset;
        cfgs[i].folds = cfgs[0].folds;
        cfgs[i].val_fraction = cfgs[0].val_fraction;
        cfgs[i].standardize_targets = cfgs[0].standardize_targets;
        cfgs[i].method.seed = cfgs[0].method.seed;
    }
    for (auto& cfg : cfgs) cfg.validate();

    auto folds = resolve_folds(cfgs[0]);
    fs::path out_root(cfgs[0].out_dir);

    std::ostringstream joint_metrics;
    std::ostringstream joint_history;
    bool regression = cfgs[0].dataset.task == Task::Regression;
    joint_metrics << (regression ? "method,dataset,fold,seed,nll,mse,nll_raw,mse_raw\n"
                                 : "method,dataset,fold,seed,acc,nll,ece,brier,auroc\n");
    joint_history << "method,fold,epoch,split,metric,value\n";

    int failures = 0;
    for (auto& cfg : cfgs) {
        ExperimentConfig local = cfg;
        local.out_dir = (out_root / method_name(cfg.method.method)).string();
        std::vector<FoldOutcome> outcomes;
        failures += run_all_folds(local, folds, outcomes, log);
        for (std::size_t f = 0; f < outcomes.size(); ++f) {
            const FoldOutcome& oc = outcomes[f];
            joint_metrics << method_name(cfg.method.method) << "," << cfg.dataset.name << "," << f
                          << "," << cfg.method.seed;
            auto value_of = [&](const std::string& key) -> std::string {
                for (const auto& kv : oc.metrics)
                    if (kv.first == key) return format_double(kv.second);
                return "nan";
            };
            if (regression)
                joint_metrics << "," << value_of("nll") << "," << value_of("mse") << ","
                              << value_of("nll_raw") << "," << value_of("mse_raw") << "\n";
            else
                joint_metrics << "," << value_of("acc") << "," << value_of("nll") << ","
                              << value_of("ece") << "," << value_of("brier") << ","
                              << value_of("auroc") << "\n";
            for (const EpochRecord& r : oc.result.history) {
                joint_history << method_name(cfg.method.method) << "," << f << "," << r.epoch
                              << ",train,loss," << format_double(r.train_loss) << "\n";
                joint_history << method_name(cfg.method.method) << "," << f << "," << r.epoch
                              << ",val,nll," << format_double(r.val_nll) << "\n";
            }
        }
    }
    atomic_write_text((out_root / "compare_metrics.csv").string(), joint_metrics.str());
    atomic_write_text((out_root / "compare_history.csv").string(), joint_history.str());
    log << "wrote joint tables to " << out_root << "\n";
    return failures == 0 ? 0 : 3;
}

int cmd_snapshot(ExperimentConfig cfg, const CliOverrides& overrides, std::ostream& log) {
    apply_overrides(cfg, overrides);
    cfg.validate();
    auto folds = resolve_folds(cfg);
    const DatasetSplit& split = folds.front();
    MlpArchitecture arch = architecture_for(cfg, split);
    if (arch.param_count() > cfg.method.full_matrix_cap)
        throw ConfigError("snapshot: parameter count exceeds full_matrix_cap; curvature dumps need a small model");

    fs::path dir(cfg.out_dir);
    fs::create_directories(dir);

    auto snapshot_epochs = [&](std::size_t epoch) {
        if (epoch == 1 || epoch == cfg.method.epochs) return true;
        return cfg.snapshot_every != 0 && epoch % cfg.snapshot_every == 0;
    };

    PriorSpec prior{cfg.method.prior_precision};
    EpochHook hook = [&](std::size_t epoch, const ParticleEnsemble& ens) {
        if (!snapshot_epochs(epoch)) return;
        // full-train-set curvature, one file per particle plus the average
        BatchView batch;
        batch.inputs = split.train_x;
        batch.targets = split.train_y;
        batch.dataset_size = split.train_x.rows;
        std::vector<CurvatureEstimate> estimates;
        for (const FlatParams& p : ens.particles) {
            switch (cfg.method.curvature) {
                case CurvatureKind::Full:
                    estimates.push_back(ggn_full(arch, p, batch, prior, cfg.method.full_matrix_cap));
                    break;
                case CurvatureKind::Diagonal:
                    estimates.push_back(curvature_diagonal(arch, p, batch, prior));
                    break;
                case CurvatureKind::Kfac:
                    estimates.push_back(curvature_kfac(arch, p, batch, prior));
                    break;
            }
        }
        for (std::size_t i = 0; i < estimates.size(); ++i) {
            dump_curvature(estimates[i],
                           (dir / ("curvature_epoch" + std::to_string(epoch) + "_particle" +
                                   std::to_string(i) + ".csv"))
                               .string(),
                           cfg.method.full_matrix_cap);
        }
        MetricOperator avg = average_curvature(estimates);
        dump_curvature(*avg.estimate(),
                       (dir / ("curvature_epoch" + std::to_string(epoch) + "_mean.csv")).string(),
                       cfg.method.full_matrix_cap);
        log << "snapshot at epoch " << epoch << "\n";
    };

    TrainResult result = train(split, arch, cfg.method, hook, &log);
    if (result.aborted) {
        log << "snapshot run aborted: " << result.abort_reason << "\n";
        return 3;
    }
    atomic_write_text((dir / "history.csv").string(), history_csv(result));
    return 0;
}

}  // namespace svne
