#pragma once

#include <vector>

#include "svne/nn.hpp"
#include "svne/tensor.hpp"

namespace svne {

// Per-point predictive mean and standard deviation of the ensemble mixture:
// mean = avg of member means, var = avg(sigma_i^2 + mu_i^2) - mean^2.
struct RegressionSummary {
    Vector mean;
    Vector std;
};

RegressionSummary predictive_regression(const ParticleEnsemble& ensemble, const DenseMatrix& x);

// Mean Gaussian negative log-likelihood of the targets under the mixture
// moments: 0.5 * (log max(s^2, eps) + (y - mu)^2 / max(s^2, eps)), constant
// omitted.
double nll_regression(const RegressionSummary& summary, const Vector& targets);

// Exact mixture likelihood alternative: -mean log (1/N sum_i N(y; mu_i, s_i^2)).
double nll_regression_log_mixture(const ParticleEnsemble& ensemble, const DenseMatrix& x,
                                  const Vector& targets);

// Class probabilities from ensemble-averaged logits (n x C; the binary head
// is expanded to two columns).
DenseMatrix predictive_class_probs(const ParticleEnsemble& ensemble, const DenseMatrix& x);

// Cross-entropy of the averaged (unnormalized) logits.
double nll_classification(const ParticleEnsemble& ensemble, const DenseMatrix& x,
                          const std::vector<int>& labels);

double accuracy(const DenseMatrix& probs, const std::vector<int>& labels);
double mse(const Vector& predictions, const Vector& targets);

// Expected calibration error over equal-width confidence bins of the
// max-probability class.
double ece(const DenseMatrix& probs, const std::vector<int>& labels, std::size_t bins = 10);

// Sum-over-classes squared error against the one-hot label (range [0, 2]).
double brier(const DenseMatrix& probs, const std::vector<int>& labels);

// Rank-based (Mann-Whitney) AUROC for binary labels; ties contribute 1/2.
double auroc(const Vector& scores, const std::vector<int>& labels);

}  // namespace svne
