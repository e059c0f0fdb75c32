#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <limits>

#include "oracles.hpp"
#include "svne/nn.hpp"
#include "svne/rng.hpp"

using namespace svne;

namespace {

MlpArchitecture tiny_arch(std::vector<std::size_t> sizes, Head head) {
    MlpArchitecture arch;
    arch.layer_sizes = std::move(sizes);
    arch.head = head;
    return arch;
}

Vector random_target(Head head, std::size_t classes, Rng& rng) {
    switch (head) {
        case Head::GaussianRegression: return {rng.normal()};
        case Head::BinaryClassification: return {rng.uniform() < 0.5 ? 0.0 : 1.0};
        case Head::Multiclass: return {static_cast<double>(rng.uniform_index(classes))};
    }
    return {};
}

}  // namespace

TEST_SUITE("nn") {

TEST_CASE("init is deterministic with zero biases") {
    auto arch = tiny_arch({3, 5, 2}, Head::GaussianRegression);
    FlatParams a = init_params(arch, 123);
    FlatParams b = init_params(arch, 123);
    CHECK(a == b);
    FlatParams c = init_params(arch, 124);
    CHECK(a != c);

    for (const LayerSlice& s : layer_slices(arch))
        for (std::size_t i = 0; i < s.fan_out; ++i)
            CHECK(a[s.offset + s.fan_out * s.fan_in + i] == 0.0);
}

TEST_CASE("init weight spread matches the fan-based bound") {
    auto arch = tiny_arch({100, 100, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 9);
    const LayerSlice s = layer_slices(arch)[0];

    double mean = 0.0;
    const std::size_t n = s.fan_out * s.fan_in;  // 10^4 draws
    for (std::size_t i = 0; i < n; ++i) mean += p[s.offset + i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = p[s.offset + i] - mean;
        var += d * d;
    }
    var /= static_cast<double>(n);

    double bound = std::sqrt(6.0 / 200.0);
    double want_std = bound / std::sqrt(3.0);
    CHECK(std::abs(std::sqrt(var) - want_std) / want_std < 0.05);
}

TEST_CASE("forward of the zero network is zero") {
    auto arch = tiny_arch({2, 4, 2}, Head::GaussianRegression);
    FlatParams zeros(arch.param_count(), 0.0);
    Vector out = forward(arch, zeros, {0.3, -0.7});
    CHECK(out == Vector{0, 0});
}

TEST_CASE("forward of a bare affine layer is the hand-computed value") {
    // single affine layer, no hidden nonlinearity: y = 2*3 + 1
    auto arch = tiny_arch({1, 1}, Head::BinaryClassification);
    FlatParams p = {2.0, 1.0};  // W=[[2]], b=[1]
    Vector out = forward(arch, p, {3.0});
    CHECK(out[0] == doctest::Approx(7.0).epsilon(1e-15));
}

TEST_CASE("row-wise forward is consistent with repeated evaluation") {
    auto arch = tiny_arch({3, 6, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 5);
    Rng rng(6);
    for (int t = 0; t < 8; ++t) {
        Vector x = oracle::random_vector(rng, 3);
        Vector a = forward(arch, p, x);
        Vector b = forward_trace(arch, p, x).outputs();
        CHECK(a == b);
    }
}

TEST_CASE("forward rejects poisoned parameters") {
    auto arch = tiny_arch({2, 3, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 1);
    p[0] = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(forward(arch, p, {1.0, 2.0}), PoisonedParametersError);
}

TEST_CASE("layer slices partition the parameter vector") {
    for (auto sizes : {std::vector<std::size_t>{1, 10, 2}, {6, 50, 50, 2}, {4, 2}}) {
        MlpArchitecture arch = tiny_arch(sizes, Head::GaussianRegression);
        arch.head = sizes.back() == 2 ? Head::GaussianRegression : Head::Multiclass;
        auto slices = layer_slices(arch);
        std::size_t offset = 0;
        for (const LayerSlice& s : slices) {
            CHECK(s.offset == offset);
            offset += s.length;
        }
        CHECK(offset == arch.param_count());
    }
}

TEST_CASE("last layer slice sizes") {
    CHECK(last_layer_slice(tiny_arch({1, 10, 2}, Head::GaussianRegression)).length == 22);
    CHECK(last_layer_slice(tiny_arch({6, 50, 50, 2}, Head::GaussianRegression)).length == 102);
}

TEST_CASE("parameters round-trip through per-layer views") {
    auto arch = tiny_arch({3, 7, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 77);
    FlatParams rebuilt(p.size(), 0.0);
    for (const LayerSlice& s : layer_slices(arch))
        for (std::size_t i = 0; i < s.length; ++i) rebuilt[s.offset + i] = p[s.offset + i];
    CHECK(rebuilt == p);
}

TEST_CASE("gradient vanishes at an interpolating optimum") {
    // bare affine model fitting y exactly, with the variance output pushed
    // into the clamped region so its score is exactly zero
    auto arch = tiny_arch({1, 2}, Head::GaussianRegression);
    FlatParams p = {2.0, 0.0, 0.5, -20.0};  // mu = 2x + 0.5, log-var = -20
    Vector x = {1.3};
    Vector y = {2.0 * 1.3 + 0.5};
    Vector g = per_sample_grad(arch, p, x, y);
    CHECK(oracle::max_abs(g) < 1e-8);
}

TEST_CASE("gradient matches finite differences on random tiny nets") {
    Rng rng(31);
    for (int trial = 0; trial < 12; ++trial) {
        Head head = trial % 3 == 0   ? Head::GaussianRegression
                    : trial % 3 == 1 ? Head::BinaryClassification
                                     : Head::Multiclass;
        std::size_t out = head == Head::GaussianRegression ? 2 : head == Head::BinaryClassification ? 1 : 3;
        auto arch = tiny_arch({2, 4, out}, head);
        FlatParams params = init_params(arch, 100 + trial);
        Vector x = oracle::random_vector(rng, 2);
        Vector y = random_target(head, out, rng);

        Vector g = per_sample_grad(arch, params, x, y);
        auto loglik = [&](const Vector& phi) {
            return head_log_likelihood(arch.head, forward(arch, phi, x), y);
        };
        Vector g_fd = oracle::fd_gradient(loglik, params);
        CHECK(oracle::rel_error(g, g_fd) < 1e-4);
    }
}

TEST_CASE("gradient is linear in the output cotangent") {
    auto arch = tiny_arch({2, 5, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 41);
    Vector x = {0.4, -1.1};
    ForwardTrace trace = forward_trace(arch, p, x);
    Vector cot = head_log_likelihood_grad(arch.head, trace.outputs(), {0.7});
    Vector g1 = backprop_params(arch, p, trace, cot);
    Vector g2 = backprop_params(arch, p, trace, scaled(cot, 2.0));
    CHECK(oracle::rel_error(g2, scaled(g1, 2.0)) < 1e-14);
}

TEST_CASE("jacobian of a bare affine model holds the input features") {
    auto arch = tiny_arch({3, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 55);
    Vector x = {0.5, -2.0, 1.5};
    DenseMatrix j = per_sample_output_jacobian(arch, p, x);
    const LayerSlice s = layer_slices(arch)[0];
    for (std::size_t o = 0; o < 2; ++o) {
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t c = 0; c < 2; ++c) {
                double want = (c == o) ? x[i] : 0.0;
                CHECK(j(c, s.offset + o * 3 + i) == doctest::Approx(want).epsilon(1e-15));
            }
        }
        CHECK(j(o, s.offset + 6 + o) == 1.0);  // bias column
    }
}

TEST_CASE("jacobian matches finite differences") {
    Rng rng(61);
    auto arch = tiny_arch({3, 5, 2}, Head::GaussianRegression);
    FlatParams params = init_params(arch, 62);
    Vector x = oracle::random_vector(rng, 3);
    DenseMatrix j = per_sample_output_jacobian(arch, params, x);
    DenseMatrix j_fd = oracle::fd_jacobian(
        [&](const Vector& phi) { return forward(arch, phi, x); }, params, 2);
    CHECK(oracle::rel_error(j, j_fd) < 1e-4);
}

TEST_CASE("zero input and zero biases give zero first-layer weight sensitivities") {
    auto arch = tiny_arch({3, 4, 2}, Head::GaussianRegression);
    FlatParams p = init_params(arch, 8);
    DenseMatrix j = per_sample_output_jacobian(arch, p, {0, 0, 0});
    const LayerSlice s = layer_slices(arch)[0];
    for (std::size_t c = 0; c < 2; ++c)
        for (std::size_t i = 0; i < s.fan_out * s.fan_in; ++i)
            CHECK(j(c, s.offset + i) == 0.0);
}

TEST_CASE("gradient equals jacobian pullback of the head score") {
    Rng rng(71);
    for (int trial = 0; trial < 6; ++trial) {
        auto arch = tiny_arch({2, 4, 2}, Head::GaussianRegression);
        FlatParams params = init_params(arch, 200 + trial);
        Vector x = oracle::random_vector(rng, 2);
        Vector y = {rng.normal()};

        Vector out = forward(arch, params, x);
        Vector cot = head_log_likelihood_grad(arch.head, out, y);
        DenseMatrix j = per_sample_output_jacobian(arch, params, x);

        Vector pullback(params.size(), 0.0);
        for (std::size_t c = 0; c < 2; ++c)
            for (std::size_t p = 0; p < params.size(); ++p) pullback[p] += cot[c] * j(c, p);

        Vector g = per_sample_grad(arch, params, x, y);
        CHECK(oracle::rel_error(g, pullback) < 1e-10);
    }
}

TEST_CASE("binary head at logit zero carries maximum entropy") {
    CHECK(head_log_likelihood(Head::BinaryClassification, {0.0}, {1.0}) ==
          doctest::Approx(-std::log(2.0)).epsilon(1e-15));
    CHECK(head_log_likelihood(Head::BinaryClassification, {0.0}, {0.0}) ==
          doctest::Approx(-std::log(2.0)).epsilon(1e-15));
}

TEST_CASE("checkpoints round-trip bit-exactly") {
    auto arch = tiny_arch({2, 3, 2}, Head::GaussianRegression);
    Checkpoint ckpt;
    ckpt.arch = arch;
    ckpt.seed = 77;
    Rng rng(78);
    for (int i = 0; i < 3; ++i) {
        FlatParams p = init_params(arch, 80 + i);
        for (double& v : p) v += 1e-3 * rng.normal();
        ckpt.particles.push_back(p);
    }

    std::string path = (std::filesystem::temp_directory_path() / "svne_ckpt_test.json").string();
    save_checkpoint(ckpt, path);
    Checkpoint back = load_checkpoint(path);
    std::filesystem::remove(path);

    CHECK(back.arch.layer_sizes == arch.layer_sizes);
    CHECK(back.seed == ckpt.seed);
    REQUIRE(back.particles.size() == ckpt.particles.size());
    for (std::size_t i = 0; i < ckpt.particles.size(); ++i)
        CHECK(back.particles[i] == ckpt.particles[i]);
}

}  // TEST_SUITE
