#include "svne/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include "svne/rng.hpp"

namespace svne {

std::string task_name(Task t) {
    switch (t) {
        case Task::Regression: return "regression";
        case Task::Binary: return "binary";
        case Task::Multiclass: return "multiclass";
    }
    return "?";
}

Task task_from_name(const std::string& s) {
    if (s == "regression") return Task::Regression;
    if (s == "binary") return Task::Binary;
    if (s == "multiclass") return Task::Multiclass;
    throw std::invalid_argument("unknown task: " + s);
}

std::size_t RawTable::column_index(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
        if (columns[i] == name) return i;
    throw CsvError("column not found: " + name);
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) {
        // trim surrounding whitespace
        std::size_t a = cell.find_first_not_of(" \t\r");
        std::size_t b = cell.find_last_not_of(" \t\r");
        cells.push_back(a == std::string::npos ? "" : cell.substr(a, b - a + 1));
    }
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

}  // namespace

RawTable load_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw CsvError("cannot open " + path);

    RawTable table;
    std::string line;
    if (!std::getline(f, line)) throw CsvError(path + ": empty file");
    table.columns = split_line(line);
    if (table.columns.empty()) throw CsvError(path + ": empty header");

    std::vector<double> values;
    std::size_t rows = 0;
    std::size_t lineno = 1;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
        auto cells = split_line(line);
        if (cells.size() != table.columns.size())
            throw CsvError(path + ":" + std::to_string(lineno) + ": expected " +
                           std::to_string(table.columns.size()) + " cells, got " +
                           std::to_string(cells.size()));
        for (std::size_t c = 0; c < cells.size(); ++c) {
            char* end = nullptr;
            const std::string& cell = cells[c];
            double v = std::strtod(cell.c_str(), &end);
            if (cell.empty() || end != cell.c_str() + cell.size())
                throw CsvError(path + ":" + std::to_string(lineno) + ": non-numeric cell in column '" +
                               table.columns[c] + "'");
            if (std::isnan(v))
                throw CsvError(path + ":" + std::to_string(lineno) + ": NaN in column '" +
                               table.columns[c] + "'");
            values.push_back(v);
        }
        ++rows;
    }
    table.values = DenseMatrix(rows, table.columns.size());
    table.values.data = std::move(values);
    return table;
}

void write_csv(const RawTable& table, const std::string& path) {
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw CsvError("cannot open " + tmp);
        f.precision(17);
        for (std::size_t c = 0; c < table.columns.size(); ++c)
            f << (c ? "," : "") << table.columns[c];
        f << '\n';
        for (std::size_t r = 0; r < table.values.rows; ++r) {
            for (std::size_t c = 0; c < table.values.cols; ++c)
                f << (c ? "," : "") << table.values(r, c);
            f << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

Scaler fit_scaler(const DenseMatrix& rows) {
    Scaler s;
    s.mean.assign(rows.cols, 0.0);
    s.std.assign(rows.cols, 1.0);
    if (rows.rows == 0) return s;
    const double n = static_cast<double>(rows.rows);
    for (std::size_t c = 0; c < rows.cols; ++c) {
        double m = 0.0;
        for (std::size_t r = 0; r < rows.rows; ++r) m += rows(r, c);
        m /= n;
        double var = 0.0;
        for (std::size_t r = 0; r < rows.rows; ++r) {
            double d = rows(r, c) - m;
            var += d * d;
        }
        var /= n;
        s.mean[c] = m;
        double sd = std::sqrt(var);
        if (sd <= 0.0) {
            s.std[c] = 1.0;
            s.constant_warnings.push_back("column " + std::to_string(c) + " is constant; std forced to 1");
        } else {
            s.std[c] = sd;
        }
    }
    return s;
}

void apply_scaler(const Scaler& s, DenseMatrix& rows) {
    if (rows.cols != s.mean.size()) throw std::invalid_argument("apply_scaler: column mismatch");
    for (std::size_t r = 0; r < rows.rows; ++r)
        for (std::size_t c = 0; c < rows.cols; ++c)
            rows(r, c) = (rows(r, c) - s.mean[c]) / s.std[c];
}

std::size_t DatasetSplit::class_count() const {
    double maxv = 0.0;
    auto scan = [&](const DenseMatrix& y) {
        for (double v : y.data) maxv = std::max(maxv, v);
    };
    scan(train_y);
    scan(val_y);
    scan(test_y);
    return static_cast<std::size_t>(maxv) + 1;
}

namespace {

DenseMatrix take_rows(const DenseMatrix& m, const std::vector<std::size_t>& idx) {
    DenseMatrix out(idx.size(), m.cols);
    for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::size_t c = 0; c < m.cols; ++c) out(r, c) = m(idx[r], c);
    return out;
}

}  // namespace

std::vector<DatasetSplit> kfold_splits(const DenseMatrix& x, const DenseMatrix& y, Task task,
                                       std::size_t k, double val_fraction, std::uint64_t seed) {
    if (k < 2) throw std::invalid_argument("kfold_splits: k must be >= 2");
    if (x.rows != y.rows) throw std::invalid_argument("kfold_splits: row count mismatch");
    if (x.rows < k) throw std::invalid_argument("kfold_splits: fewer rows than folds");

    std::vector<std::size_t> order(x.rows);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed, 0x6b666f6cu);
    rng.shuffle(order);

    // fold f takes rows [start_f, start_f + size_f); first (n mod k) folds get
    // one extra row
    std::vector<DatasetSplit> folds;
    const std::size_t n = x.rows;
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        std::size_t size = n / k + (f < n % k ? 1 : 0);
        std::vector<std::size_t> test_idx(order.begin() + start, order.begin() + start + size);
        std::vector<std::size_t> rest;
        rest.reserve(n - size);
        for (std::size_t i = 0; i < n; ++i)
            if (i < start || i >= start + size) rest.push_back(order[i]);
        start += size;

        std::size_t val_size = static_cast<std::size_t>(
            std::floor(val_fraction * static_cast<double>(rest.size()) + 0.5));
        val_size = std::min(val_size, rest.size());
        std::vector<std::size_t> val_idx(rest.end() - static_cast<std::ptrdiff_t>(val_size), rest.end());
        std::vector<std::size_t> train_idx(rest.begin(), rest.end() - static_cast<std::ptrdiff_t>(val_size));
        if (train_idx.empty()) throw std::invalid_argument("kfold_splits: empty training split");

        DatasetSplit split;
        split.task = task;
        split.train_x = take_rows(x, train_idx);
        split.train_y = take_rows(y, train_idx);
        split.val_x = take_rows(x, val_idx);
        split.val_y = take_rows(y, val_idx);
        split.test_x = take_rows(x, test_idx);
        split.test_y = take_rows(y, test_idx);
        folds.push_back(std::move(split));
    }
    return folds;
}

DatasetSplit standardize(DatasetSplit split, bool standardize_targets) {
    split.feature_scaler = fit_scaler(split.train_x);
    apply_scaler(split.feature_scaler, split.train_x);
    apply_scaler(split.feature_scaler, split.val_x);
    apply_scaler(split.feature_scaler, split.test_x);
    split.standardized = true;
    if (standardize_targets && split.task == Task::Regression) {
        split.target_scaler = fit_scaler(split.train_y);
        apply_scaler(split.target_scaler, split.train_y);
        apply_scaler(split.target_scaler, split.val_y);
        apply_scaler(split.target_scaler, split.test_y);
        split.targets_standardized = true;
    }
    return split;
}

double toy_true_function(double x) {
    double t = x - 3.0;
    return t * t * t;
}

namespace {

// Uniform draw over [2,3] u [4.5,6], intervals weighted by length.
double draw_train_domain(Rng& rng) {
    double u = rng.uniform(0.0, 2.5);
    return u < 1.0 ? 2.0 + u : 4.5 + (u - 1.0);
}

void fill_toy(DenseMatrix& x, DenseMatrix& y, Rng& rng, double noise_std,
              const std::function<double(Rng&)>& draw) {
    for (std::size_t r = 0; r < x.rows; ++r) {
        double xi = draw(rng);
        x(r, 0) = xi;
        y(r, 0) = toy_true_function(xi) + noise_std * rng.normal();
    }
}

}  // namespace

DatasetSplit toy_regression(const ToyConfig& cfg) {
    if (cfg.blob_low_count + cfg.blob_high_count > cfg.train_count)
        throw std::invalid_argument("toy_regression: blob counts exceed train_count");

    DatasetSplit split;
    split.task = Task::Regression;

    const std::size_t base = cfg.train_count - cfg.blob_low_count - cfg.blob_high_count;
    split.train_x = DenseMatrix(cfg.train_count, 1);
    split.train_y = DenseMatrix(cfg.train_count, 1);
    Rng train_rng(cfg.seed, 0);
    for (std::size_t r = 0; r < cfg.train_count; ++r) {
        double xi;
        if (r < base) {
            xi = draw_train_domain(train_rng);
        } else if (r < base + cfg.blob_low_count) {
            xi = train_rng.uniform(2.0, 2.5);  // [1.5,2.5] clipped to the train domain
        } else {
            xi = train_rng.uniform(4.5, 6.0);
        }
        split.train_x(r, 0) = xi;
        split.train_y(r, 0) = toy_true_function(xi) + cfg.noise_std * train_rng.normal();
    }

    split.val_x = DenseMatrix(cfg.val_count, 1);
    split.val_y = DenseMatrix(cfg.val_count, 1);
    Rng val_rng(cfg.seed, 1);
    fill_toy(split.val_x, split.val_y, val_rng, cfg.noise_std,
             [](Rng& r) { return draw_train_domain(r); });

    split.test_x = DenseMatrix(cfg.test_count, 1);
    split.test_y = DenseMatrix(cfg.test_count, 1);
    Rng test_rng(cfg.seed, 2);
    fill_toy(split.test_x, split.test_y, test_rng, cfg.noise_std,
             [](Rng& r) { return r.uniform(0.0, 7.0); });

    return split;
}

double destandardize_target(const DatasetSplit& split, double y) {
    if (!split.targets_standardized) return y;
    return y * split.target_scaler.std[0] + split.target_scaler.mean[0];
}

double destandardize_scale(const DatasetSplit& split, double s) {
    if (!split.targets_standardized) return s;
    return s * split.target_scaler.std[0];
}

}  // namespace svne
