#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "svne/tensor.hpp"

namespace svne {

struct CsvError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Task { Regression, Binary, Multiclass };

std::string task_name(Task t);
Task task_from_name(const std::string& s);

// Comma-separated numeric table with a header row.
struct RawTable {
    std::vector<std::string> columns;
    DenseMatrix values;
    std::size_t column_index(const std::string& name) const;
};

// Rejects non-numeric cells and NaN rows with the offending row/column in the
// message (1-based, counting the header as line 1).
RawTable load_csv(const std::string& path);
void write_csv(const RawTable& table, const std::string& path);

// Per-feature affine transform fitted on training rows only. Population
// standard deviation (divide by n); constant columns fall back to std 1.
struct Scaler {
    Vector mean;
    Vector std;
    std::vector<std::string> constant_warnings;
};

Scaler fit_scaler(const DenseMatrix& rows);
void apply_scaler(const Scaler& s, DenseMatrix& rows);

struct DatasetSplit {
    Task task = Task::Regression;
    DenseMatrix train_x, train_y;
    DenseMatrix val_x, val_y;
    DenseMatrix test_x, test_y;
    Scaler feature_scaler;
    Scaler target_scaler;  // regression only
    bool standardized = false;
    bool targets_standardized = false;

    std::size_t input_dim() const { return train_x.cols; }
    std::size_t class_count() const;  // classification: 1 + max label over splits
};

// K folds: each uses 1/k of the (seed-shuffled) rows as test, then splits
// val_fraction of the remainder off as validation. With 100 rows and the
// defaults this gives the 64/16/20 split.
std::vector<DatasetSplit> kfold_splits(const DenseMatrix& x, const DenseMatrix& y, Task task,
                                       std::size_t k, double val_fraction, std::uint64_t seed);

// Standardizes features (and, for regression, targets) with statistics
// fitted on the training rows; validation and test rows reuse those
// statistics.
DatasetSplit standardize(DatasetSplit split, bool standardize_targets);

// Synthetic 1-d regression benchmark: y = (x-3)^3 + noise. Training inputs
// live on [2,3] u [4.5,6], test inputs on [0,7]. Optional extra cluster
// points are sampled inside the configured blob intervals clipped to the
// training domain, and count against train_count.
struct ToyConfig {
    std::uint64_t seed = 42;
    std::size_t train_count = 150;
    std::size_t test_count = 200;
    std::size_t val_count = 30;
    double noise_std = 0.25;
    std::size_t blob_low_count = 0;   // extra points in [1.5, 2.5] ^ train domain
    std::size_t blob_high_count = 0;  // extra points in [4.5, 6.0]
};

double toy_true_function(double x);
DatasetSplit toy_regression(const ToyConfig& cfg = {});

// Undo target standardization for reporting.
double destandardize_target(const DatasetSplit& split, double y);
double destandardize_scale(const DatasetSplit& split, double s);

}  // namespace svne
