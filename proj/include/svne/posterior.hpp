#pragma once

#include "svne/nn.hpp"
#include "svne/tensor.hpp"

namespace svne {

// Isotropic Gaussian prior N(0, precision^-1 I) over the flat parameters.
struct PriorSpec {
    double precision = 1.0;
    void validate() const {
        if (!(precision >= 0.0)) throw std::invalid_argument("PriorSpec: precision must be >= 0");
    }
};

// A minibatch plus the size of the dataset it was drawn from. Gradients and
// curvature are rescaled by dataset_size / batch_size so minibatch estimates
// are unbiased for the full-data log posterior.
struct BatchView {
    DenseMatrix inputs;   // b x m
    DenseMatrix targets;  // b x t
    std::size_t dataset_size = 0;

    std::size_t batch_size() const { return inputs.rows; }
    double rescale() const {
        return batch_size() == 0 ? 0.0
                                 : static_cast<double>(dataset_size) / static_cast<double>(batch_size());
    }
    Vector input_row(std::size_t i) const;
    Vector target_row(std::size_t i) const;
};

// Sum over the batch of per-sample log p(y | g(x)).
double log_likelihood(const MlpArchitecture& arch, const FlatParams& params, const BatchView& batch);

// Sum over the batch of per-sample log-likelihood gradients (no rescale).
Vector grad_log_likelihood_sum(const MlpArchitecture& arch, const FlatParams& params,
                               const BatchView& batch);

// (n/b) * sum-of-batch log-likelihood gradients - precision * params.
Vector grad_log_posterior(const MlpArchitecture& arch, const FlatParams& params,
                          const BatchView& batch, const PriorSpec& prior);

// Constant diagonal curvature contributed by the prior: precision at every
// coordinate of -grad^2 log pi.
Vector prior_hessian_diag(const PriorSpec& prior, std::size_t dim);

}  // namespace svne
