#include "svne/posterior.hpp"

#include <cmath>

namespace svne {

Vector BatchView::input_row(std::size_t i) const {
    Vector x(inputs.cols);
    for (std::size_t j = 0; j < inputs.cols; ++j) x[j] = inputs(i, j);
    return x;
}

Vector BatchView::target_row(std::size_t i) const {
    Vector y(targets.cols);
    for (std::size_t j = 0; j < targets.cols; ++j) y[j] = targets(i, j);
    return y;
}

double log_likelihood(const MlpArchitecture& arch, const FlatParams& params, const BatchView& batch) {
    double total = 0.0;
    for (std::size_t i = 0; i < batch.batch_size(); ++i) {
        Vector out = forward(arch, params, batch.input_row(i));
        total += head_log_likelihood(arch.head, out, batch.target_row(i));
    }
    if (!std::isfinite(total)) throw PoisonedParametersError("log_likelihood: non-finite value");
    return total;
}

Vector grad_log_likelihood_sum(const MlpArchitecture& arch, const FlatParams& params,
                               const BatchView& batch) {
    Vector grad(params.size(), 0.0);
    for (std::size_t i = 0; i < batch.batch_size(); ++i) {
        Vector g = per_sample_grad(arch, params, batch.input_row(i), batch.target_row(i));
        axpy(1.0, g, grad);
    }
    return grad;
}

Vector grad_log_posterior(const MlpArchitecture& arch, const FlatParams& params,
                          const BatchView& batch, const PriorSpec& prior) {
    prior.validate();
    Vector grad = grad_log_likelihood_sum(arch, params, batch);
    const double scale = batch.rescale();
    for (std::size_t i = 0; i < grad.size(); ++i)
        grad[i] = scale * grad[i] - prior.precision * params[i];
    if (!all_finite(grad)) throw PoisonedParametersError("grad_log_posterior: non-finite gradient");
    return grad;
}

Vector prior_hessian_diag(const PriorSpec& prior, std::size_t dim) {
    prior.validate();
    return Vector(dim, prior.precision);
}

}  // namespace svne
