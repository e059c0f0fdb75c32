#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "svne/posterior.hpp"
#include "svne/rng.hpp"
#include "svne/tensor.hpp"

using namespace svne;

namespace {

MlpArchitecture small_net(Head head, std::size_t out) {
    MlpArchitecture arch;
    arch.layer_sizes = {2, 4, out};
    arch.head = head;
    return arch;
}

BatchView random_regression_batch(Rng& rng, std::size_t b, std::size_t n) {
    BatchView batch;
    batch.inputs = oracle::random_matrix(rng, b, 2);
    batch.targets = oracle::random_matrix(rng, b, 1);
    batch.dataset_size = n;
    return batch;
}

}  // namespace

TEST_SUITE("posterior") {

TEST_CASE("gaussian log-likelihood is zero at the mean with unit variance") {
    // bare affine model: mu = x, log-var = 0
    MlpArchitecture arch;
    arch.layer_sizes = {1, 2};
    arch.head = Head::GaussianRegression;
    FlatParams p = {1.0, 0.0, 0.0, 0.0};  // mu row = x, log-var row = 0

    BatchView batch;
    batch.inputs = DenseMatrix(3, 1);
    batch.targets = DenseMatrix(3, 1);
    batch.dataset_size = 3;
    for (std::size_t r = 0; r < 3; ++r) {
        batch.inputs(r, 0) = 0.5 * static_cast<double>(r);
        batch.targets(r, 0) = batch.inputs(r, 0);  // y == predicted mean
    }
    CHECK(log_likelihood(arch, p, batch) == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("binary log-likelihood at logit zero is -log 2 per sample") {
    MlpArchitecture arch;
    arch.layer_sizes = {2, 1};
    arch.head = Head::BinaryClassification;
    FlatParams zeros(arch.param_count(), 0.0);

    BatchView batch;
    batch.inputs = DenseMatrix(4, 2);
    batch.targets = DenseMatrix(4, 1);
    batch.dataset_size = 4;
    for (std::size_t r = 0; r < 4; ++r) batch.targets(r, 0) = r % 2;

    CHECK(log_likelihood(arch, zeros, batch) ==
          doctest::Approx(-4.0 * std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("batch log-likelihood equals a naive per-sample sum") {
    Rng rng(17);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 18);
    BatchView batch = random_regression_batch(rng, 7, 7);

    double naive = 0.0;
    for (std::size_t i = 0; i < batch.batch_size(); ++i)
        naive += head_log_likelihood(arch.head, forward(arch, p, batch.input_row(i)),
                                     batch.target_row(i));
    CHECK(log_likelihood(arch, p, batch) == doctest::Approx(naive).epsilon(1e-12));
}

TEST_CASE("full-batch posterior gradient is the per-sample sum minus the prior pull") {
    Rng rng(19);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 20);
    BatchView batch = random_regression_batch(rng, 6, 6);
    PriorSpec prior{0.7};

    Vector grad = grad_log_posterior(arch, p, batch, prior);
    Vector want(p.size(), 0.0);
    for (std::size_t i = 0; i < batch.batch_size(); ++i)
        axpy(1.0, per_sample_grad(arch, p, batch.input_row(i), batch.target_row(i)), want);
    axpy(-prior.precision, p, want);
    CHECK(oracle::rel_error(grad, want) < 1e-12);
}

TEST_CASE("a huge prior precision dominates the gradient direction") {
    Rng rng(23);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 24);
    BatchView batch = random_regression_batch(rng, 4, 4);

    Vector grad = grad_log_posterior(arch, p, batch, PriorSpec{1e6});
    double cosine = dot(grad, p) / (norm2(grad) * norm2(p));
    CHECK(cosine == doctest::Approx(-1.0).epsilon(1e-3));
}

TEST_CASE("minibatch gradients average to the full-batch gradient") {
    Rng rng(29);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 30);
    const std::size_t n = 6, b = 2;
    BatchView full = random_regression_batch(rng, n, n);
    PriorSpec prior{0.5};

    Vector want = grad_log_posterior(arch, p, full, prior);

    Vector mean(p.size(), 0.0);
    const std::size_t trials = 10000;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    for (std::size_t t = 0; t < trials; ++t) {
        rng.shuffle(idx);
        BatchView mb;
        mb.inputs = DenseMatrix(b, 2);
        mb.targets = DenseMatrix(b, 1);
        mb.dataset_size = n;
        for (std::size_t r = 0; r < b; ++r) {
            for (std::size_t c = 0; c < 2; ++c) mb.inputs(r, c) = full.inputs(idx[r], c);
            mb.targets(r, 0) = full.targets(idx[r], 0);
        }
        axpy(1.0 / static_cast<double>(trials), grad_log_posterior(arch, p, mb, prior), mean);
    }
    CHECK(oracle::rel_error(mean, want, oracle::max_abs(want)) < 0.05);
}

TEST_CASE("posterior gradient matches finite differences of loglik minus the prior energy") {
    Rng rng(31);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 32);
    BatchView batch = random_regression_batch(rng, 5, 5);
    PriorSpec prior{1.3};

    Vector grad = grad_log_posterior(arch, p, batch, prior);
    auto objective = [&](const Vector& phi) {
        return log_likelihood(arch, phi, batch) - 0.5 * prior.precision * dot(phi, phi);
    };
    Vector fd = oracle::fd_gradient(objective, p);
    CHECK(oracle::rel_error(grad, fd) < 1e-4);
}

TEST_CASE("changing the prior precision shifts the gradient by exactly the parameter vector") {
    Rng rng(37);
    auto arch = small_net(Head::GaussianRegression, 2);
    FlatParams p = init_params(arch, 38);
    BatchView batch = random_regression_batch(rng, 5, 5);

    Vector g1 = grad_log_posterior(arch, p, batch, PriorSpec{0.25});
    Vector g2 = grad_log_posterior(arch, p, batch, PriorSpec{2.0});
    Vector diff = sub(g2, g1);
    Vector want = scaled(p, 0.25 - 2.0);
    // the likelihood terms cancel identically; only the last-place rounding
    // of the two prior products remains
    CHECK(oracle::rel_error(diff, want) < 1e-15);
}

TEST_CASE("prior curvature contribution") {
    CHECK(prior_hessian_diag(PriorSpec{0.0}, 4) == Vector(4, 0.0));
    CHECK(prior_hessian_diag(PriorSpec{2.0}, 3) == Vector{2, 2, 2});

    Rng rng(41);
    DenseMatrix psd = oracle::random_psd(rng, 6);
    Vector contrib = prior_hessian_diag(PriorSpec{0.9}, 6);
    for (std::size_t i = 0; i < 6; ++i) psd(i, i) += contrib[i];
    CHECK(symmetric_quadratic_form_check(psd));
}

}  // TEST_SUITE
