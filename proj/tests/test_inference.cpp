#include <doctest.h>

#include <cmath>

#include "oracles.hpp"
#include "svne/inference.hpp"
#include "svne/rng.hpp"

using namespace svne;

namespace {

// Closed-form Gaussian target: log pi = -0.5 (x - mean)^T H (x - mean).
ParticleProblem gaussian_problem(const DenseMatrix& precision, const Vector& mean) {
    ParticleProblem p;
    p.dim = mean.size();
    p.grad_log_posterior = [precision, mean](const Vector& x) {
        Vector g = matvec(precision, sub(mean, x));
        return g;
    };
    p.curvature = [precision](const Vector&) { return CurvatureEstimate::full(precision, 0.0); };
    return p;
}

DenseMatrix precision_2d() {
    // inverse of [[1, 0.6], [0.6, 1]]
    DenseMatrix h(2, 2);
    h(0, 0) = h(1, 1) = 1.0 / 0.64;
    h(0, 1) = h(1, 0) = -0.6 / 0.64;
    return h;
}

KernelState manual_identity_kernel(std::size_t n, std::size_t d) {
    KernelState ks;
    ks.count = n;
    ks.dim = d;
    ks.values = DenseMatrix::identity(n);
    ks.grads.assign(n, std::vector<Vector>(n, Vector(d, 0.0)));
    return ks;
}

std::vector<Vector> random_particles(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
    std::vector<Vector> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_vector(rng, d, scale));
    return out;
}

MethodConfig base_config(Method m) {
    MethodConfig cfg;
    cfg.method = m;
    cfg.kernel_metric = KernelMetric::Identity;
    cfg.curvature = CurvatureKind::Full;
    cfg.step_size = 0.1;
    cfg.cg = {200, 1e-12, 0.0};
    return cfg;
}

BatchView regression_batch(Rng& rng, std::size_t b, std::size_t m) {
    BatchView batch;
    batch.inputs = oracle::random_matrix(rng, b, m);
    batch.targets = oracle::random_matrix(rng, b, 1);
    batch.dataset_size = b;
    return batch;
}

}  // namespace

TEST_SUITE("inference") {

TEST_CASE("update direction flattening round-trips") {
    UpdateDirection d;
    d.per_particle = {{1, 2, 3}, {4, 5, 6}};
    Vector flat = d.flat();
    CHECK(flat == Vector{1, 2, 3, 4, 5, 6});
    UpdateDirection back = UpdateDirection::from_flat(flat, 2);
    CHECK(back.per_particle == d.per_particle);
}

TEST_CASE("single-particle transport is the bare gradient") {
    Rng rng(101);
    std::vector<Vector> particles = random_particles(rng, 1, 5);
    std::vector<Vector> grads = {oracle::random_vector(rng, 5)};
    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
    UpdateDirection v = svgd_direction(grads, ks);
    CHECK(oracle::max_abs_diff(v.per_particle[0], grads[0]) == 0.0);
}

TEST_CASE("coincident particles with zero gradients do not move") {
    Vector p{0.3, -0.7};
    KernelState ks = build_kernel_state(MetricOperator::identity(), {p, p});
    std::vector<Vector> grads(2, Vector(2, 0.0));
    UpdateDirection v = svgd_direction(grads, ks);
    CHECK(oracle::max_abs(v.per_particle[0]) == 0.0);
    CHECK(oracle::max_abs(v.per_particle[1]) == 0.0);
}

TEST_CASE("transport direction matches the naive double loop") {
    Rng rng(103);
    auto particles = random_particles(rng, 5, 7);
    std::vector<Vector> grads;
    for (int i = 0; i < 5; ++i) grads.push_back(oracle::random_vector(rng, 7));
    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
    UpdateDirection v = svgd_direction(grads, ks);
    auto naive = oracle::naive_transport_direction(grads, ks);
    for (std::size_t i = 0; i < 5; ++i) CHECK(oracle::rel_error(v.per_particle[i], naive[i]) < 1e-12);
}

TEST_CASE("identity kernel blocks with zero repulsion reduce to per-particle ascent") {
    Rng rng(104);
    KernelState ks = manual_identity_kernel(4, 3);
    std::vector<Vector> grads;
    for (int i = 0; i < 4; ++i) grads.push_back(oracle::random_vector(rng, 3));
    UpdateDirection v = svgd_direction(grads, ks);
    for (std::size_t i = 0; i < 4; ++i)
        CHECK(oracle::max_abs_diff(v.per_particle[i], scaled(grads[i], 0.25)) < 1e-16);
}

TEST_CASE("coupled matvec reduces to the plain product for one particle") {
    Rng rng(105);
    DenseMatrix h = oracle::random_psd(rng, 4);
    auto curv = std::vector<CurvatureEstimate>{CurvatureEstimate::full(h, 0.0)};
    KernelState ks = build_kernel_state(MetricOperator::identity(), random_particles(rng, 1, 4));
    Vector alpha = oracle::random_vector(rng, 4);
    CHECK(oracle::rel_error(svn_hessian_matvec(alpha, ks, curv), matvec(h, alpha)) < 1e-14);
}

TEST_CASE("coupled matvec equals the densely assembled system") {
    Rng rng(106);
    MlpArchitecture arch;
    arch.layer_sizes = {2, 4, 2};
    arch.head = Head::GaussianRegression;
    PriorSpec prior{0.5};

    for (CurvatureKind kind : {CurvatureKind::Full, CurvatureKind::Diagonal, CurvatureKind::Kfac}) {
        const std::size_t n = 3;
        BatchView batch = regression_batch(rng, 6, 2);
        std::vector<Vector> particles;
        std::vector<CurvatureEstimate> curv;
        std::vector<DenseMatrix> mats;
        for (std::size_t i = 0; i < n; ++i) {
            FlatParams p = init_params(arch, 600 + i);
            particles.push_back(p);
            switch (kind) {
                case CurvatureKind::Full: curv.push_back(ggn_full(arch, p, batch, prior)); break;
                case CurvatureKind::Diagonal: curv.push_back(curvature_diagonal(arch, p, batch, prior)); break;
                case CurvatureKind::Kfac: curv.push_back(curvature_kfac(arch, p, batch, prior)); break;
            }
            mats.push_back(curv.back().materialize());
        }
        KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
        DenseMatrix dense = oracle::dense_coupled_system(ks, mats);

        Vector alpha = oracle::random_vector(rng, n * arch.param_count());
        Vector got = svn_hessian_matvec(alpha, ks, curv);
        Vector want = matvec(dense, alpha);
        CHECK(oracle::rel_error(got, want) < 1e-10);
    }
}

TEST_CASE("coupled matvec of zero is zero") {
    Rng rng(107);
    DenseMatrix h = oracle::random_psd(rng, 3);
    std::vector<CurvatureEstimate> curv(2, CurvatureEstimate::full(h, 0.0));
    KernelState ks = build_kernel_state(MetricOperator::identity(), random_particles(rng, 2, 3));
    Vector zero(6, 0.0);
    CHECK(svn_hessian_matvec(zero, ks, curv) == zero);
}

TEST_CASE("coupled operator is symmetric on random probes") {
    Rng rng(108);
    const std::size_t n = 4, d = 5;
    std::vector<CurvatureEstimate> curv;
    for (std::size_t i = 0; i < n; ++i)
        curv.push_back(CurvatureEstimate::full(oracle::random_psd(rng, d), 0.0));
    KernelState ks = build_kernel_state(MetricOperator::identity(), random_particles(rng, n, d));
    for (int trial = 0; trial < 10; ++trial) {
        Vector x = oracle::random_vector(rng, n * d);
        Vector y = oracle::random_vector(rng, n * d);
        double lhs = dot(x, svn_hessian_matvec(y, ks, curv));
        double rhs = dot(svn_hessian_matvec(x, ks, curv), y);
        CHECK(std::abs(lhs - rhs) / std::max(std::abs(lhs), 1.0) < 1e-8);
    }
}

TEST_CASE("single-particle solve inverts the curvature") {
    Rng rng(109);
    DenseMatrix h = precision_2d();
    Vector mean{1.0, -2.0};
    auto problem = gaussian_problem(h, mean);
    std::vector<Vector> particles = {{3.0, 3.0}};
    std::vector<CurvatureEstimate> curv{problem.curvature(particles[0])};
    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);

    UpdateDirection rhs;
    rhs.per_particle = {problem.grad_log_posterior(particles[0])};
    auto solve = solve_full_system(ks, curv, rhs, CgConfig{100, 1e-12, 0.0});

    Vector newton = oracle::dense_solve(h, rhs.per_particle[0]);
    CHECK(oracle::rel_error(solve.alpha[0], newton) < 1e-8);

    // the synthesized direction is exactly the solved coefficient for N = 1
    UpdateDirection v = svn_direction(solve.alpha, ks);
    CHECK(v.per_particle[0] == solve.alpha[0]);
}

TEST_CASE("zero right-hand side produces zero coefficients") {
    Rng rng(110);
    std::vector<CurvatureEstimate> curv(3, CurvatureEstimate::full(oracle::random_psd(rng, 4), 0.0));
    KernelState ks = build_kernel_state(MetricOperator::identity(), random_particles(rng, 3, 4));
    UpdateDirection rhs;
    rhs.per_particle.assign(3, Vector(4, 0.0));
    auto full = solve_full_system(ks, curv, rhs, CgConfig{});
    auto block = solve_block_diagonal(ks, curv, rhs, CgConfig{});
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(full.alpha[i] == Vector(4, 0.0));
        CHECK(block.alpha[i] == Vector(4, 0.0));
    }
}

TEST_CASE("coupled solve agrees with a dense direct solve") {
    Rng rng(111);
    const std::size_t n = 3, d = 20;
    std::vector<CurvatureEstimate> curv;
    std::vector<DenseMatrix> mats;
    for (std::size_t i = 0; i < n; ++i) {
        DenseMatrix h = oracle::random_spd(rng, d);
        mats.push_back(h);
        curv.push_back(CurvatureEstimate::full(h, 0.0));
    }
    auto particles = random_particles(rng, n, d, 0.5);
    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
    UpdateDirection rhs;
    for (std::size_t i = 0; i < n; ++i) rhs.per_particle.push_back(oracle::random_vector(rng, d));

    auto solve = solve_full_system(ks, curv, rhs, CgConfig{400, 1e-12, 0.0});
    DenseMatrix dense = oracle::dense_coupled_system(ks, mats);
    Vector want = oracle::dense_solve(dense, rhs.flat());
    CHECK(oracle::rel_error(UpdateDirection{solve.alpha}.flat(), want) < 1e-6);
}

TEST_CASE("block solve matches the dense per-block oracle") {
    Rng rng(112);
    const std::size_t n = 3, d = 8;
    std::vector<CurvatureEstimate> curv;
    std::vector<DenseMatrix> mats;
    for (std::size_t i = 0; i < n; ++i) {
        DenseMatrix h = oracle::random_spd(rng, d);
        mats.push_back(h);
        curv.push_back(CurvatureEstimate::full(h, 0.0));
    }
    auto particles = random_particles(rng, n, d, 0.5);
    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
    UpdateDirection rhs;
    for (std::size_t i = 0; i < n; ++i) rhs.per_particle.push_back(oracle::random_vector(rng, d));

    auto solve = solve_block_diagonal(ks, curv, rhs, CgConfig{200, 1e-12, 0.0});

    DenseMatrix coupled = oracle::dense_coupled_system(ks, mats);
    for (std::size_t m = 0; m < n; ++m) {
        DenseMatrix block(d, d);
        for (std::size_t r = 0; r < d; ++r)
            for (std::size_t c = 0; c < d; ++c) block(r, c) = coupled(m * d + r, m * d + c);
        Vector want = oracle::dense_solve(block, rhs.per_particle[m]);
        CHECK(oracle::rel_error(solve.alpha[m], want) < 1e-6);
    }
}

TEST_CASE("block solve of one particle equals the coupled solve") {
    Rng rng(113);
    DenseMatrix h = oracle::random_spd(rng, 6);
    std::vector<CurvatureEstimate> curv{CurvatureEstimate::full(h, 0.0)};
    KernelState ks = build_kernel_state(MetricOperator::identity(), random_particles(rng, 1, 6));
    UpdateDirection rhs;
    rhs.per_particle = {oracle::random_vector(rng, 6)};
    auto a = solve_full_system(ks, curv, rhs, CgConfig{100, 1e-12, 0.0});
    auto b = solve_block_diagonal(ks, curv, rhs, CgConfig{100, 1e-12, 0.0});
    CHECK(oracle::rel_error(a.alpha[0], b.alpha[0]) < 1e-10);
}

TEST_CASE("directions are permutation equivariant") {
    Rng rng(114);
    const std::size_t n = 4, d = 6;
    auto particles = random_particles(rng, n, d);
    std::vector<Vector> grads;
    std::vector<CurvatureEstimate> curv;
    for (std::size_t i = 0; i < n; ++i) {
        grads.push_back(oracle::random_vector(rng, d));
        curv.push_back(CurvatureEstimate::full(oracle::random_spd(rng, d), 0.0));
    }
    std::vector<std::size_t> perm{2, 0, 3, 1};

    KernelState ks = build_kernel_state(MetricOperator::identity(), particles);
    UpdateDirection v = svgd_direction(grads, ks);
    auto solve = solve_block_diagonal(ks, curv, v, CgConfig{100, 1e-12, 0.0});
    UpdateDirection w = svn_direction(solve.alpha, ks);

    std::vector<Vector> particles_p(n), grads_p(n);
    std::vector<CurvatureEstimate> curv_p;
    for (std::size_t i = 0; i < n; ++i) {
        particles_p[i] = particles[perm[i]];
        grads_p[i] = grads[perm[i]];
    }
    for (std::size_t i = 0; i < n; ++i) curv_p.push_back(curv[perm[i]]);

    KernelState ks_p = build_kernel_state(MetricOperator::identity(), particles_p);
    UpdateDirection v_p = svgd_direction(grads_p, ks_p);
    auto solve_p = solve_block_diagonal(ks_p, curv_p, v_p, CgConfig{100, 1e-12, 0.0});
    UpdateDirection w_p = svn_direction(solve_p.alpha, ks_p);

    for (std::size_t i = 0; i < n; ++i) {
        CHECK(oracle::rel_error(v_p.per_particle[i], v.per_particle[perm[i]]) < 1e-10);
        CHECK(oracle::rel_error(w_p.per_particle[i], w.per_particle[perm[i]]) < 1e-10);
    }
}

TEST_CASE("zero step size leaves particles unchanged") {
    Rng rng(115);
    auto problem = gaussian_problem(precision_2d(), {1.0, -2.0});
    auto particles = random_particles(rng, 3, 2);
    auto before = particles;
    MethodConfig cfg = base_config(Method::Svn);
    cfg.kernel_metric = KernelMetric::AvgCurvature;
    cfg.step_size = 0.0;
    particle_step(particles, problem, cfg);
    CHECK(particles == before);
}

TEST_CASE("one-particle curvature transport is a newton iteration on a gaussian") {
    DenseMatrix h = precision_2d();
    Vector mean{1.0, -2.0};
    auto problem = gaussian_problem(h, mean);
    std::vector<Vector> particles = {{4.0, 5.0}};

    MethodConfig cfg = base_config(Method::Svn);
    cfg.kernel_metric = KernelMetric::AvgCurvature;
    cfg.step_size = 1.0;

    for (int step = 0; step < 5; ++step) {
        Vector before = particles[0];
        Vector newton = oracle::dense_solve(h, problem.grad_log_posterior(before));
        particle_step(particles, problem, cfg);
        Vector moved = sub(particles[0], before);
        // absolute floor keeps the ratio meaningful once the step is ~0 at the mode
        CHECK(oracle::rel_error(moved, newton, 1e-6) < 1e-6);
    }
    CHECK(oracle::max_abs_diff(particles[0], mean) <= 1e-6);
}

TEST_CASE("network transport steps are deterministic") {
    Rng rng(116);
    MlpArchitecture arch;
    arch.layer_sizes = {2, 4, 2};
    arch.head = Head::GaussianRegression;
    BatchView batch = regression_batch(rng, 5, 2);

    MethodConfig cfg = base_config(Method::Svn);
    cfg.kernel_metric = KernelMetric::AvgCurvature;
    cfg.curvature = CurvatureKind::Full;
    cfg.cg = CgConfig{};
    cfg.particles = 3;
    cfg.seed = 9;

    ParticleEnsemble a = init_ensemble(arch, 3, 9);
    ParticleEnsemble b = init_ensemble(arch, 3, 9);
    for (int s = 0; s < 3; ++s) {
        svn_step(a, batch, cfg);
        svn_step(b, batch, cfg);
    }
    CHECK(a.particles == b.particles);
}

TEST_CASE("ensemble map training is independent and deterministic per particle") {
    Rng rng(117);
    MlpArchitecture arch;
    arch.layer_sizes = {2, 3, 2};
    arch.head = Head::GaussianRegression;
    BatchView batch = regression_batch(rng, 4, 2);
    MethodConfig cfg = base_config(Method::Ensemble);
    cfg.step_size = 1e-2;

    // identical particles stay identical under identical batches
    FlatParams p0 = init_params(arch, 5);
    ParticleEnsemble ens;
    ens.arch = arch;
    ens.particles = {p0, p0, p0};
    AdamState adam;
    for (int s = 0; s < 4; ++s) ensemble_map_step(ens, batch, cfg, adam);
    CHECK(ens.particles[0] == ens.particles[1]);
    CHECK(ens.particles[1] == ens.particles[2]);
}

TEST_CASE("adam update matches the hand-stepped recurrence") {
    MlpArchitecture arch;
    arch.layer_sizes = {1, 2};
    arch.head = Head::GaussianRegression;
    const std::size_t d = arch.param_count();

    // empty batch and unit prior: the objective is the quadratic |phi|^2 / 2
    BatchView batch;
    batch.inputs = DenseMatrix(0, 1);
    batch.targets = DenseMatrix(0, 1);
    batch.dataset_size = 4;

    MethodConfig cfg = base_config(Method::Ensemble);
    cfg.step_size = 0.05;
    cfg.prior_precision = 1.0;

    ParticleEnsemble ens;
    ens.arch = arch;
    ens.particles = {FlatParams{0.4, -1.2, 2.0, 0.7}};
    FlatParams theta = ens.particles[0];

    Vector m(d, 0.0), v(d, 0.0);
    AdamState adam;
    for (std::size_t t = 1; t <= 3; ++t) {
        ensemble_map_step(ens, batch, cfg, adam);
        for (std::size_t i = 0; i < d; ++i) {
            double g = theta[i];  // gradient of the quadratic
            m[i] = 0.9 * m[i] + 0.1 * g;
            v[i] = 0.999 * v[i] + 0.001 * g * g;
            double mhat = m[i] / (1.0 - std::pow(0.9, static_cast<double>(t)));
            double vhat = v[i] / (1.0 - std::pow(0.999, static_cast<double>(t)));
            theta[i] -= 0.05 * mhat / (std::sqrt(vhat) + 1e-8);
        }
        for (std::size_t i = 0; i < d; ++i)
            CHECK(ens.particles[0][i] == doctest::Approx(theta[i]).epsilon(1e-14));
    }
}

TEST_CASE("adam with a zero gradient leaves parameters unchanged") {
    MlpArchitecture arch;
    arch.layer_sizes = {1, 2};
    arch.head = Head::GaussianRegression;
    BatchView batch;
    batch.inputs = DenseMatrix(0, 1);
    batch.targets = DenseMatrix(0, 1);
    batch.dataset_size = 1;

    MethodConfig cfg = base_config(Method::Ensemble);
    cfg.prior_precision = 0.0;

    ParticleEnsemble ens;
    ens.arch = arch;
    ens.particles = {FlatParams{0.3, -0.5, 0.1, 0.9}};
    FlatParams before = ens.particles[0];
    AdamState adam;
    ensemble_map_step(ens, batch, cfg, adam);
    CHECK(ens.particles[0] == before);
}

TEST_CASE("divergent updates back off and eventually raise") {
    auto problem = gaussian_problem(precision_2d(), {0.0, 0.0});
    std::vector<Vector> particles = {{1e300, 1e300}};
    MethodConfig cfg = base_config(Method::Svgd);
    cfg.step_size = 1e280;
    CHECK_THROWS_AS(particle_step(particles, problem, cfg), StepDivergedError);
}

TEST_CASE("training for zero epochs returns the initial ensemble") {
    DatasetSplit data = standardize(toy_regression(ToyConfig{1, 20, 10, 5}), true);
    MlpArchitecture arch;
    arch.layer_sizes = {1, 4, 2};
    arch.head = Head::GaussianRegression;
    MethodConfig cfg = base_config(Method::Svgd);
    cfg.epochs = 0;
    cfg.particles = 2;
    cfg.seed = 3;
    TrainResult r = train(data, arch, cfg);
    CHECK(r.history.empty());
    CHECK(r.best.particles == init_ensemble(arch, 2, 3).particles);
}

TEST_CASE("history has one record per epoch and training is reproducible") {
    DatasetSplit data = standardize(toy_regression(ToyConfig{1, 24, 12, 6}), true);
    MlpArchitecture arch;
    arch.layer_sizes = {1, 4, 2};
    arch.head = Head::GaussianRegression;
    MethodConfig cfg = base_config(Method::Svgd);
    cfg.epochs = 4;
    cfg.batch_size = 8;
    cfg.particles = 3;
    cfg.seed = 11;
    cfg.step_size = 1e-2;

    TrainResult a = train(data, arch, cfg);
    TrainResult b = train(data, arch, cfg);
    REQUIRE(a.history.size() == 4);
    CHECK(a.best.particles == b.best.particles);
    for (std::size_t e = 0; e < 4; ++e) {
        CHECK(a.history[e].epoch == e + 1);
        CHECK(a.history[e].train_loss == b.history[e].train_loss);
        CHECK(a.history[e].val_nll == b.history[e].val_nll);
    }
}

TEST_CASE("training survives a failing step by aborting with history intact") {
    DatasetSplit data = standardize(toy_regression(ToyConfig{1, 16, 8, 4}), true);
    MlpArchitecture arch;
    arch.layer_sizes = {1, 3, 2};
    arch.head = Head::GaussianRegression;
    MethodConfig cfg = base_config(Method::Svgd);
    cfg.epochs = 3;
    cfg.step_size = 1e305;  // guaranteed overflow
    cfg.particles = 2;
    TrainResult r = train(data, arch, cfg);
    CHECK(r.aborted);
    CHECK_FALSE(r.abort_reason.empty());
}

// --- last-layer variant ---------------------------------------------------------

TEST_CASE("last-layer transport equals full transport when the last layer is the whole net") {
    Rng rng(118);
    MlpArchitecture arch;
    arch.layer_sizes = {3, 2};  // single affine layer
    arch.head = Head::GaussianRegression;
    BatchView batch = regression_batch(rng, 6, 3);

    MethodConfig cfg = base_config(Method::Svn);
    cfg.curvature = CurvatureKind::Kfac;
    cfg.kernel_metric = KernelMetric::Identity;
    cfg.cg = CgConfig{};
    cfg.step_size = 0.05;

    ParticleEnsemble a = init_ensemble(arch, 3, 21);
    ParticleEnsemble b = a;
    MethodConfig cfg_ll = cfg;
    cfg_ll.method = Method::LlSvn;

    for (int s = 0; s < 4; ++s) {
        svn_step(a, batch, cfg);
        ll_svn_step(b, batch, cfg_ll);
        REQUIRE(a.particles == b.particles);  // bit-for-bit
    }
}

TEST_CASE("last-layer transport moves early layers exactly along the plain direction") {
    Rng rng(119);
    MlpArchitecture arch;
    arch.layer_sizes = {2, 6, 2};
    arch.head = Head::GaussianRegression;
    BatchView batch = regression_batch(rng, 8, 2);

    MethodConfig cfg = base_config(Method::LlSvn);
    cfg.step_size = 0.05;
    cfg.cg = CgConfig{};

    ParticleEnsemble ens = init_ensemble(arch, 3, 31);
    std::vector<FlatParams> before = ens.particles;

    // expected front movement: eps * the full-network transport direction
    PriorSpec prior{cfg.prior_precision};
    std::vector<Vector> grads;
    for (const FlatParams& p : ens.particles)
        grads.push_back(grad_log_posterior(arch, p, batch, prior));
    KernelState ks = build_kernel_state(MetricOperator::identity(), ens.particles,
                                        {cfg.kernel_bandwidth});
    UpdateDirection v = svgd_direction(grads, ks);

    ll_svn_step(ens, batch, cfg);
    const LayerSlice slice = last_layer_slice(arch);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t t = 0; t < slice.offset; ++t) {
            double want = before[i][t] + cfg.step_size * v.per_particle[i][t];
            CHECK(ens.particles[i][t] == doctest::Approx(want).epsilon(1e-12));
        }
    }
}

TEST_CASE("last-layer subsystem matches an independent dense solve on the slice") {
    Rng rng(120);
    MlpArchitecture arch;
    arch.layer_sizes = {2, 5, 2};
    arch.head = Head::GaussianRegression;
    BatchView batch = regression_batch(rng, 8, 2);

    MethodConfig cfg = base_config(Method::LlSvn);
    cfg.step_size = 0.05;
    cfg.cg = CgConfig{400, 1e-12, 0.0};

    ParticleEnsemble ens = init_ensemble(arch, 3, 41);
    std::vector<FlatParams> before = ens.particles;

    // reproduce the inputs of the slice subsystem
    PriorSpec prior{cfg.prior_precision};
    const LayerSlice slice = last_layer_slice(arch);
    std::vector<Vector> grads, tail;
    for (const FlatParams& p : ens.particles) {
        grads.push_back(grad_log_posterior(arch, p, batch, prior));
        tail.emplace_back(p.begin() + slice.offset, p.begin() + slice.offset + slice.length);
    }
    KernelState ks_full = build_kernel_state(MetricOperator::identity(), ens.particles,
                                             {cfg.kernel_bandwidth});
    UpdateDirection v = svgd_direction(grads, ks_full);

    std::vector<DenseMatrix> slice_mats;
    for (const FlatParams& p : ens.particles) {
        DenseMatrix whole = curvature_kfac(arch, p, batch, prior).materialize();
        DenseMatrix m(slice.length, slice.length);
        for (std::size_t r = 0; r < slice.length; ++r)
            for (std::size_t c = 0; c < slice.length; ++c)
                m(r, c) = whole(slice.offset + r, slice.offset + c);
        slice_mats.push_back(m);
    }
    KernelState ks_tail = build_kernel_state(MetricOperator::identity(), tail,
                                             {cfg.kernel_bandwidth});
    DenseMatrix dense = oracle::dense_coupled_system(ks_tail, slice_mats);
    UpdateDirection rhs;
    for (std::size_t i = 0; i < 3; ++i)
        rhs.per_particle.emplace_back(v.per_particle[i].begin() + slice.offset,
                                      v.per_particle[i].begin() + slice.offset + slice.length);
    Vector alpha = oracle::dense_solve(dense, rhs.flat());
    auto alpha_parts = UpdateDirection::from_flat(alpha, 3).per_particle;

    ll_svn_step(ens, batch, cfg);
    for (std::size_t i = 0; i < 3; ++i) {
        Vector want(slice.length, 0.0);
        for (std::size_t j = 0; j < 3; ++j) axpy(ks_tail.values(j, i), alpha_parts[j], want);
        for (std::size_t t = 0; t < slice.length; ++t) {
            double moved = ens.particles[i][slice.offset + t] - before[i][slice.offset + t];
            CHECK(moved == doctest::Approx(cfg.step_size * want[t]).epsilon(1e-6));
        }
    }
}

}  // TEST_SUITE
