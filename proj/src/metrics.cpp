#include "svne/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace svne {

namespace {

constexpr double kTwoPi = 6.283185307179586477;

Vector matrix_row(const DenseMatrix& m, std::size_t r) {
    Vector out(m.cols);
    for (std::size_t c = 0; c < m.cols; ++c) out[c] = m(r, c);
    return out;
}

double clamped_var(double v) { return std::max(v, kVarianceFloor); }

// Averaged raw logits over the ensemble, one row per input.
DenseMatrix mean_logits(const ParticleEnsemble& ensemble, const DenseMatrix& x) {
    const std::size_t n = x.rows;
    const std::size_t k = ensemble.arch.output_dim();
    DenseMatrix logits(n, k);
    const double inv = 1.0 / static_cast<double>(ensemble.count());
    for (std::size_t r = 0; r < n; ++r) {
        Vector xi = matrix_row(x, r);
        for (const FlatParams& p : ensemble.particles) {
            Vector out = forward(ensemble.arch, p, xi);
            for (std::size_t c = 0; c < k; ++c) logits(r, c) += inv * out[c];
        }
    }
    return logits;
}

}  // namespace

RegressionSummary predictive_regression(const ParticleEnsemble& ensemble, const DenseMatrix& x) {
    if (ensemble.arch.head != Head::GaussianRegression)
        throw std::invalid_argument("predictive_regression: regression head required");
    const std::size_t n = x.rows;
    RegressionSummary s;
    s.mean.assign(n, 0.0);
    s.std.assign(n, 0.0);
    const double inv = 1.0 / static_cast<double>(ensemble.count());
    for (std::size_t r = 0; r < n; ++r) {
        Vector xi = matrix_row(x, r);
        double mean = 0.0, second = 0.0;
        for (const FlatParams& p : ensemble.particles) {
            Vector out = forward(ensemble.arch, p, xi);
            double mu = out[0];
            double var = clamped_var(std::exp(out[1]));
            mean += inv * mu;
            second += inv * (var + mu * mu);
        }
        s.mean[r] = mean;
        s.std[r] = std::sqrt(std::max(second - mean * mean, 0.0));
    }
    return s;
}

double nll_regression(const RegressionSummary& summary, const Vector& targets) {
    if (summary.mean.size() != targets.size())
        throw std::invalid_argument("nll_regression: length mismatch");
    double total = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double var = clamped_var(summary.std[i] * summary.std[i]);
        double r = targets[i] - summary.mean[i];
        total += 0.5 * (std::log(var) + r * r / var);
    }
    return total / static_cast<double>(targets.size());
}

double nll_regression_log_mixture(const ParticleEnsemble& ensemble, const DenseMatrix& x,
                                  const Vector& targets) {
    const std::size_t n = x.rows;
    if (targets.size() != n) throw std::invalid_argument("nll_regression_log_mixture: length mismatch");
    const double log_n = std::log(static_cast<double>(ensemble.count()));
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r) {
        Vector xi = matrix_row(x, r);
        // log (1/N sum_i N(y; mu_i, var_i)) via log-sum-exp, constant included
        double max_term = -std::numeric_limits<double>::infinity();
        std::vector<double> terms;
        for (const FlatParams& p : ensemble.particles) {
            Vector out = forward(ensemble.arch, p, xi);
            double var = clamped_var(std::exp(out[1]));
            double d = targets[r] - out[0];
            double t = -0.5 * (std::log(kTwoPi * var) + d * d / var);
            terms.push_back(t);
            max_term = std::max(max_term, t);
        }
        double s = 0.0;
        for (double t : terms) s += std::exp(t - max_term);
        total += -(max_term + std::log(s) - log_n);
    }
    return total / static_cast<double>(n);
}

DenseMatrix predictive_class_probs(const ParticleEnsemble& ensemble, const DenseMatrix& x) {
    DenseMatrix logits = mean_logits(ensemble, x);
    const std::size_t n = logits.rows;
    if (ensemble.arch.head == Head::BinaryClassification) {
        DenseMatrix probs(n, 2);
        for (std::size_t r = 0; r < n; ++r) {
            double p = 1.0 / (1.0 + std::exp(-logits(r, 0)));
            probs(r, 0) = 1.0 - p;
            probs(r, 1) = p;
        }
        return probs;
    }
    if (ensemble.arch.head == Head::Multiclass) {
        const std::size_t k = logits.cols;
        DenseMatrix probs(n, k);
        for (std::size_t r = 0; r < n; ++r) {
            double m = logits(r, 0);
            for (std::size_t c = 1; c < k; ++c) m = std::max(m, logits(r, c));
            double z = 0.0;
            for (std::size_t c = 0; c < k; ++c) z += std::exp(logits(r, c) - m);
            for (std::size_t c = 0; c < k; ++c) probs(r, c) = std::exp(logits(r, c) - m) / z;
        }
        return probs;
    }
    throw std::invalid_argument("predictive_class_probs: classification head required");
}

double nll_classification(const ParticleEnsemble& ensemble, const DenseMatrix& x,
                          const std::vector<int>& labels) {
    if (labels.size() != x.rows) throw std::invalid_argument("nll_classification: length mismatch");
    DenseMatrix logits = mean_logits(ensemble, x);
    double total = 0.0;
    if (ensemble.arch.head == Head::BinaryClassification) {
        for (std::size_t r = 0; r < x.rows; ++r) {
            double z = logits(r, 0);
            double softplus = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
            total += softplus - static_cast<double>(labels[r]) * z;
        }
    } else if (ensemble.arch.head == Head::Multiclass) {
        for (std::size_t r = 0; r < x.rows; ++r) {
            double m = logits(r, 0);
            for (std::size_t c = 1; c < logits.cols; ++c) m = std::max(m, logits(r, c));
            double z = 0.0;
            for (std::size_t c = 0; c < logits.cols; ++c) z += std::exp(logits(r, c) - m);
            total += m + std::log(z) - logits(r, static_cast<std::size_t>(labels[r]));
        }
    } else {
        throw std::invalid_argument("nll_classification: classification head required");
    }
    return total / static_cast<double>(x.rows);
}

double accuracy(const DenseMatrix& probs, const std::vector<int>& labels) {
    if (labels.size() != probs.rows) throw std::invalid_argument("accuracy: length mismatch");
    std::size_t hits = 0;
    for (std::size_t r = 0; r < probs.rows; ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < probs.cols; ++c)
            if (probs(r, c) > probs(r, arg)) arg = c;
        if (static_cast<int>(arg) == labels[r]) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(probs.rows);
}

double mse(const Vector& predictions, const Vector& targets) {
    if (predictions.size() != targets.size()) throw std::invalid_argument("mse: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        double d = predictions[i] - targets[i];
        s += d * d;
    }
    return s / static_cast<double>(targets.size());
}

double ece(const DenseMatrix& probs, const std::vector<int>& labels, std::size_t bins) {
    if (labels.size() != probs.rows) throw std::invalid_argument("ece: length mismatch");
    if (bins == 0) throw std::invalid_argument("ece: bins must be positive");
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    std::vector<std::size_t> counts(bins, 0);
    for (std::size_t r = 0; r < probs.rows; ++r) {
        std::size_t arg = 0;
        for (std::size_t c = 1; c < probs.cols; ++c)
            if (probs(r, c) > probs(r, arg)) arg = c;
        double conf = probs(r, arg);
        std::size_t b = std::min(static_cast<std::size_t>(conf * static_cast<double>(bins)), bins - 1);
        conf_sum[b] += conf;
        acc_sum[b] += (static_cast<int>(arg) == labels[r]) ? 1.0 : 0.0;
        counts[b] += 1;
    }
    double total = 0.0;
    const double n = static_cast<double>(probs.rows);
    for (std::size_t b = 0; b < bins; ++b) {
        if (counts[b] == 0) continue;
        double cb = static_cast<double>(counts[b]);
        total += (cb / n) * std::abs(acc_sum[b] / cb - conf_sum[b] / cb);
    }
    return total;
}

double brier(const DenseMatrix& probs, const std::vector<int>& labels) {
    if (labels.size() != probs.rows) throw std::invalid_argument("brier: length mismatch");
    double total = 0.0;
    for (std::size_t r = 0; r < probs.rows; ++r) {
        for (std::size_t c = 0; c < probs.cols; ++c) {
            double target = (static_cast<int>(c) == labels[r]) ? 1.0 : 0.0;
            double d = probs(r, c) - target;
            total += d * d;
        }
    }
    return total / static_cast<double>(probs.rows);
}

double auroc(const Vector& scores, const std::vector<int>& labels) {
    if (scores.size() != labels.size()) throw std::invalid_argument("auroc: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    std::size_t pos = 0, neg = 0;
    for (int y : labels) (y == 1 ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw std::invalid_argument("auroc: needs both classes");

    // average ranks over tied score groups
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        double avg_rank = 0.5 * static_cast<double>((i + 1) + (j + 1));
        for (std::size_t t = i; t <= j; ++t)
            if (labels[order[t]] == 1) rank_sum_pos += avg_rank;
        i = j + 1;
    }
    double u = rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0;
    return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace svne
