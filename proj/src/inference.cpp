#include "svne/inference.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <limits>
#include <ostream>

#include "svne/metrics.hpp"
#include "svne/rng.hpp"

namespace svne {

void MethodConfig::validate() const {
    if (particles == 0) throw std::invalid_argument("MethodConfig: need at least one particle");
    if (!(step_size >= 0.0)) throw std::invalid_argument("MethodConfig: step_size must be non-negative");
    if (batch_size == 0) throw std::invalid_argument("MethodConfig: batch_size must be positive");
    if (curvature_refresh == 0) throw std::invalid_argument("MethodConfig: curvature_refresh must be positive");
    if (!(prior_precision >= 0.0)) throw std::invalid_argument("MethodConfig: prior_precision must be >= 0");
    if (kernel_bandwidth == KernelBandwidth::Median && kernel_metric != KernelMetric::Identity)
        throw std::invalid_argument("MethodConfig: median bandwidth requires the identity kernel metric");
}

Vector UpdateDirection::flat() const {
    std::size_t total = 0;
    for (const Vector& v : per_particle) total += v.size();
    Vector out;
    out.reserve(total);
    for (const Vector& v : per_particle) out.insert(out.end(), v.begin(), v.end());
    return out;
}

UpdateDirection UpdateDirection::from_flat(const Vector& v, std::size_t n) {
    if (n == 0 || v.size() % n != 0)
        throw std::invalid_argument("UpdateDirection::from_flat: length not divisible by particle count");
    const std::size_t d = v.size() / n;
    UpdateDirection out;
    out.per_particle.assign(n, Vector(d));
    for (std::size_t i = 0; i < n; ++i)
        std::copy(v.begin() + i * d, v.begin() + (i + 1) * d, out.per_particle[i].begin());
    return out;
}

UpdateDirection svgd_direction(const std::vector<Vector>& grads, const KernelState& ks) {
    const std::size_t n = ks.count;
    if (grads.size() != n) throw std::invalid_argument("svgd_direction: gradient count mismatch");
    const double inv_n = 1.0 / static_cast<double>(n);

    UpdateDirection dir;
    dir.per_particle.assign(n, Vector(ks.dim, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        Vector& v = dir.per_particle[i];
        for (std::size_t j = 0; j < n; ++j) {
            axpy(ks.values(j, i), grads[j], v);
            axpy(1.0, ks.grads[j][i], v);
        }
        for (double& e : v) e *= inv_n;
    }
    return dir;
}

Vector svn_hessian_matvec(const Vector& alpha, const KernelState& ks,
                          const std::vector<CurvatureEstimate>& curvatures) {
    const std::size_t n = ks.count;
    const std::size_t d = ks.dim;
    if (alpha.size() != n * d) throw std::invalid_argument("svn_hessian_matvec: length mismatch");
    if (curvatures.size() != n) throw std::invalid_argument("svn_hessian_matvec: curvature count mismatch");

    UpdateDirection a = UpdateDirection::from_flat(alpha, n);
    std::vector<Vector> y(n, Vector(d, 0.0));
    const double inv_n = 1.0 / static_cast<double>(n);

    for (std::size_t p = 0; p < n; ++p) {
        // curvature part: k(p,m) H_p (sum_n k(p,n) alpha_n)
        Vector w(d, 0.0);
        for (std::size_t j = 0; j < n; ++j) axpy(ks.values(p, j), a.per_particle[j], w);
        Vector u = curvatures[p].hvp(w);
        for (std::size_t m = 0; m < n; ++m) axpy(inv_n * ks.values(p, m), u, y[m]);

        // repulsion part: sum_n <grad_p k(p,m), alpha_n> grad_p k(p,n)
        for (std::size_t m = 0; m < n; ++m) {
            const Vector& gpm = ks.grads[p][m];
            for (std::size_t j = 0; j < n; ++j) {
                double c = dot(gpm, a.per_particle[j]);
                if (c != 0.0) axpy(inv_n * c, ks.grads[p][j], y[m]);
            }
        }
    }

    UpdateDirection out;
    out.per_particle = std::move(y);
    return out.flat();
}

SvnSolveResult solve_block_diagonal(const KernelState& ks,
                                    const std::vector<CurvatureEstimate>& curvatures,
                                    const UpdateDirection& v_svgd, const CgConfig& cg) {
    const std::size_t n = ks.count;
    const std::size_t d = ks.dim;
    const double inv_n = 1.0 / static_cast<double>(n);

    SvnSolveResult result;
    result.alpha.assign(n, Vector(d, 0.0));
    for (std::size_t m = 0; m < n; ++m) {
        LinearOperator op{
            d, [&, m](const Vector& x) {
                Vector y(d, 0.0);
                for (std::size_t p = 0; p < n; ++p) {
                    double kpm = ks.values(p, m);
                    Vector u = curvatures[p].hvp(x);
                    axpy(inv_n * kpm * kpm, u, y);
                    const Vector& g = ks.grads[p][m];
                    double c = dot(g, x);
                    if (c != 0.0) axpy(inv_n * c, g, y);
                }
                return y;
            }};
        CgResult r = conjugate_gradient(op, v_svgd.per_particle[m], cg.max_iters, cg.tol, cg.damping);
        result.cg_iterations += r.iterations;
        if (r.status == CgStatus::Breakdown) {
            std::cerr << "[svne] block solve breakdown for particle " << m
                      << "; keeping its input direction\n";
            result.alpha[m] = v_svgd.per_particle[m];
            ++result.fallbacks;
        } else {
            result.alpha[m] = std::move(r.x);
        }
    }
    return result;
}

SvnSolveResult solve_full_system(const KernelState& ks,
                                 const std::vector<CurvatureEstimate>& curvatures,
                                 const UpdateDirection& v_svgd, const CgConfig& cg) {
    const std::size_t n = ks.count;
    const std::size_t d = ks.dim;

    LinearOperator op{n * d, [&](const Vector& x) { return svn_hessian_matvec(x, ks, curvatures); }};
    CgResult r = conjugate_gradient(op, v_svgd.flat(), cg.max_iters, cg.tol, cg.damping);
    if (r.status == CgStatus::Breakdown) {
        std::cerr << "[svne] coupled system breakdown; falling back to block-diagonal solve\n";
        SvnSolveResult fb = solve_block_diagonal(ks, curvatures, v_svgd, cg);
        fb.cg_iterations += r.iterations;
        ++fb.fallbacks;
        return fb;
    }

    SvnSolveResult result;
    result.cg_iterations = r.iterations;
    result.alpha = UpdateDirection::from_flat(r.x, n).per_particle;
    return result;
}

UpdateDirection svn_direction(const std::vector<Vector>& alpha, const KernelState& ks) {
    const std::size_t n = ks.count;
    if (alpha.size() != n) throw std::invalid_argument("svn_direction: alpha count mismatch");
    UpdateDirection dir;
    dir.per_particle.assign(n, Vector(ks.dim, 0.0));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            axpy(ks.values(j, i), alpha[j], dir.per_particle[i]);
    return dir;
}

namespace {

// Commit particles <- particles + eps * direction, halving eps while the
// proposal is non-finite. Five retries, then the step is declared divergent.
std::size_t apply_update(std::vector<Vector>& particles, const UpdateDirection& dir, double eps) {
    std::size_t rejections = 0;
    for (int attempt = 0; attempt <= 5; ++attempt) {
        bool finite = true;
        std::vector<Vector> proposal = particles;
        for (std::size_t i = 0; i < particles.size() && finite; ++i) {
            axpy(eps, dir.per_particle[i], proposal[i]);
            finite = all_finite(proposal[i]);
        }
        if (finite) {
            particles = std::move(proposal);
            return rejections;
        }
        ++rejections;
        eps *= 0.5;
    }
    throw StepDivergedError("particle update stayed non-finite after 5 step-size halvings");
}

MetricOperator resolve_metric(const MethodConfig& cfg, const std::vector<CurvatureEstimate>* curv) {
    if (cfg.kernel_metric == KernelMetric::AvgCurvature) {
        if (curv == nullptr || curv->empty())
            throw std::invalid_argument("curvature metric requested but no estimates available");
        return average_curvature(*curv);
    }
    return MetricOperator::identity();
}

}  // namespace

StepDiagnostics particle_step(std::vector<Vector>& particles, const ParticleProblem& problem,
                              const MethodConfig& cfg,
                              const std::vector<CurvatureEstimate>* cached_curvatures) {
    cfg.validate();
    StepDiagnostics diag;
    const std::size_t n = particles.size();

    std::vector<Vector> grads(n);
    for (std::size_t i = 0; i < n; ++i) grads[i] = problem.grad_log_posterior(particles[i]);

    std::vector<CurvatureEstimate> curv_local;
    const std::vector<CurvatureEstimate>* curv = cached_curvatures;
    if (cfg.needs_curvature() && curv == nullptr) {
        curv_local.reserve(n);
        for (std::size_t i = 0; i < n; ++i) curv_local.push_back(problem.curvature(particles[i]));
        curv = &curv_local;
    }

    MetricOperator metric = resolve_metric(cfg, curv);
    KernelState ks = build_kernel_state(metric, particles, {cfg.kernel_bandwidth});
    UpdateDirection v = svgd_direction(grads, ks);

    if (cfg.method == Method::Svn) {
        SvnSolveResult solve = cfg.svn_system == SvnSystem::Full
                                   ? solve_full_system(ks, *curv, v, cfg.cg)
                                   : solve_block_diagonal(ks, *curv, v, cfg.cg);
        diag.cg_iterations += solve.cg_iterations;
        diag.solver_fallbacks += solve.fallbacks;
        v = svn_direction(solve.alpha, ks);
    }

    diag.rejections += apply_update(particles, v, cfg.step_size);
    return diag;
}

ParticleProblem nn_posterior_problem(const MlpArchitecture& arch, const BatchView& batch,
                                     const MethodConfig& cfg) {
    PriorSpec prior{cfg.prior_precision};
    ParticleProblem problem;
    problem.dim = arch.param_count();
    problem.grad_log_posterior = [arch, batch, prior](const Vector& phi) {
        return grad_log_posterior(arch, phi, batch, prior);
    };
    const CurvatureKind kind = cfg.curvature;
    const std::size_t cap = cfg.full_matrix_cap;
    problem.curvature = [arch, batch, prior, kind, cap](const Vector& phi) {
        switch (kind) {
            case CurvatureKind::Full: return ggn_full(arch, phi, batch, prior, cap);
            case CurvatureKind::Diagonal: return curvature_diagonal(arch, phi, batch, prior);
            case CurvatureKind::Kfac: return curvature_kfac(arch, phi, batch, prior);
        }
        throw std::logic_error("nn_posterior_problem: unknown curvature kind");
    };
    return problem;
}

ParticleEnsemble init_ensemble(const MlpArchitecture& arch, std::size_t count, std::uint64_t seed) {
    arch.validate();
    ParticleEnsemble ens;
    ens.arch = arch;
    Rng base(seed, 0x656e73u);
    for (std::size_t i = 0; i < count; ++i)
        ens.particles.push_back(init_params(arch, base.child(i).next_u64()));
    return ens;
}

StepDiagnostics ensemble_map_step(ParticleEnsemble& ensemble, const BatchView& batch,
                                  const MethodConfig& cfg, AdamState& adam) {
    cfg.validate();
    const std::size_t n = ensemble.count();
    const std::size_t d = ensemble.arch.param_count();
    if (adam.m.empty()) {
        adam.m.assign(n, Vector(d, 0.0));
        adam.v.assign(n, Vector(d, 0.0));
        adam.t = 0;
    }
    adam.t += 1;
    PriorSpec prior{cfg.prior_precision};
    const double bc1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(adam.t));
    const double bc2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(adam.t));

    StepDiagnostics diag;
    for (std::size_t i = 0; i < n; ++i) {
        Vector g = grad_log_posterior(ensemble.arch, ensemble.particles[i], batch, prior);
        for (double& v : g) v = -v;  // minimize the negative log posterior
        Vector& m = adam.m[i];
        Vector& v2 = adam.v[i];
        Vector& phi = ensemble.particles[i];
        for (std::size_t p = 0; p < d; ++p) {
            m[p] = cfg.adam_beta1 * m[p] + (1.0 - cfg.adam_beta1) * g[p];
            v2[p] = cfg.adam_beta2 * v2[p] + (1.0 - cfg.adam_beta2) * g[p] * g[p];
            double mhat = m[p] / bc1;
            double vhat = v2[p] / bc2;
            phi[p] -= cfg.step_size * mhat / (std::sqrt(vhat) + cfg.adam_eps);
        }
        if (!all_finite(phi)) throw StepDivergedError("ensemble_map_step: non-finite parameters");
    }
    return diag;
}

StepDiagnostics svn_step(ParticleEnsemble& ensemble, const BatchView& batch, const MethodConfig& cfg,
                         const std::vector<CurvatureEstimate>* cached_curvatures) {
    ParticleProblem problem = nn_posterior_problem(ensemble.arch, batch, cfg);
    return particle_step(ensemble.particles, problem, cfg, cached_curvatures);
}

namespace {

Vector slice_of(const Vector& v, const LayerSlice& s) {
    return Vector(v.begin() + s.offset, v.begin() + s.offset + s.length);
}

// Last layer's Kronecker block rebased to slice-local coordinates.
CurvatureEstimate last_layer_kfac(const MlpArchitecture& arch, const FlatParams& params,
                                  const BatchView& batch, const PriorSpec& prior) {
    CurvatureEstimate whole = curvature_kfac(arch, params, batch, prior);
    KroneckerBlock blk = whole.blocks().back();
    blk.slice.offset = 0;
    blk.slice.layer_index = 0;
    return CurvatureEstimate::kronecker({blk}, blk.slice.length, prior.precision);
}

}  // namespace

StepDiagnostics ll_svn_step(ParticleEnsemble& ensemble, const BatchView& batch,
                            const MethodConfig& cfg,
                            const std::vector<CurvatureEstimate>* cached_curvatures,
                            std::vector<CurvatureEstimate>* curvature_out) {
    cfg.validate();
    StepDiagnostics diag;
    const std::size_t n = ensemble.count();
    const MlpArchitecture& arch = ensemble.arch;
    const PriorSpec prior{cfg.prior_precision};
    const LayerSlice slice = last_layer_slice(arch);

    // full-network ascent directions under the plain kernel
    std::vector<Vector> grads(n);
    for (std::size_t i = 0; i < n; ++i)
        grads[i] = grad_log_posterior(arch, ensemble.particles[i], batch, prior);
    KernelState ks_full =
        build_kernel_state(MetricOperator::identity(), ensemble.particles, {cfg.kernel_bandwidth});
    UpdateDirection v_svgd = svgd_direction(grads, ks_full);

    // last-layer Newton subsystem
    std::vector<Vector> tail(n);
    UpdateDirection rhs;
    rhs.per_particle.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        tail[i] = slice_of(ensemble.particles[i], slice);
        rhs.per_particle[i] = slice_of(v_svgd.per_particle[i], slice);
    }

    std::vector<CurvatureEstimate> curv_local;
    const std::vector<CurvatureEstimate>* curv = cached_curvatures;
    if (curv == nullptr) {
        curv_local.reserve(n);
        for (std::size_t i = 0; i < n; ++i)
            curv_local.push_back(last_layer_kfac(arch, ensemble.particles[i], batch, prior));
        curv = &curv_local;
    }
    if (curvature_out != nullptr) *curvature_out = *curv;

    MetricOperator metric = resolve_metric(cfg, curv);
    KernelState ks_tail = build_kernel_state(metric, tail, {cfg.kernel_bandwidth});
    SvnSolveResult solve = cfg.svn_system == SvnSystem::Full
                               ? solve_full_system(ks_tail, *curv, rhs, cfg.cg)
                               : solve_block_diagonal(ks_tail, *curv, rhs, cfg.cg);
    diag.cg_iterations += solve.cg_iterations;
    diag.solver_fallbacks += solve.fallbacks;
    UpdateDirection v_tail = svn_direction(solve.alpha, ks_tail);

    // splice: Newton on the last layer, SVGD elsewhere
    UpdateDirection dir = v_svgd;
    for (std::size_t i = 0; i < n; ++i)
        std::copy(v_tail.per_particle[i].begin(), v_tail.per_particle[i].end(),
                  dir.per_particle[i].begin() + slice.offset);

    diag.rejections += apply_update(ensemble.particles, dir, cfg.step_size);
    return diag;
}

// --- training ------------------------------------------------------------------

namespace {

BatchView make_batch(const DenseMatrix& x, const DenseMatrix& y, const std::vector<std::size_t>& rows,
                     std::size_t begin, std::size_t end, std::size_t dataset_size) {
    BatchView batch;
    batch.inputs = DenseMatrix(end - begin, x.cols);
    batch.targets = DenseMatrix(end - begin, y.cols);
    batch.dataset_size = dataset_size;
    for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t c = 0; c < x.cols; ++c) batch.inputs(r - begin, c) = x(rows[r], c);
        for (std::size_t c = 0; c < y.cols; ++c) batch.targets(r - begin, c) = y(rows[r], c);
    }
    return batch;
}

std::vector<int> label_vector(const DenseMatrix& y) {
    std::vector<int> labels(y.rows);
    for (std::size_t r = 0; r < y.rows; ++r) labels[r] = static_cast<int>(y(r, 0));
    return labels;
}

double validation_nll(const ParticleEnsemble& ens, const DatasetSplit& data) {
    if (data.task == Task::Regression) {
        RegressionSummary s = predictive_regression(ens, data.val_x);
        Vector targets(data.val_y.rows);
        for (std::size_t r = 0; r < targets.size(); ++r) targets[r] = data.val_y(r, 0);
        return nll_regression(s, targets);
    }
    return nll_classification(ens, data.val_x, label_vector(data.val_y));
}

}  // namespace

TrainResult train(const DatasetSplit& data, const MlpArchitecture& arch, const MethodConfig& cfg,
                  const EpochHook& after_epoch, std::ostream* log) {
    cfg.validate();
    arch.validate();

    TrainResult result;
    result.best = init_ensemble(arch, cfg.particles, cfg.seed);
    result.last = result.best;
    result.best_val_nll = std::numeric_limits<double>::infinity();
    if (cfg.epochs == 0) return result;

    ParticleEnsemble ens = result.last;
    AdamState adam;
    std::vector<CurvatureEstimate> curvature_cache;
    std::size_t step_counter = 0;

    const std::size_t n_train = data.train_x.rows;
    std::vector<std::size_t> order(n_train);
    for (std::size_t i = 0; i < n_train; ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        EpochRecord record;
        record.epoch = epoch;

        Rng shuffle_rng(cfg.seed, 0x73687566u + epoch);
        shuffle_rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        try {
            for (std::size_t begin = 0; begin < n_train; begin += cfg.batch_size) {
                std::size_t end = std::min(begin + cfg.batch_size, n_train);
                BatchView batch = make_batch(data.train_x, data.train_y, order, begin, end, n_train);

                // pre-step batch loss (mean per-sample negative log-likelihood
                // averaged over particles)
                for (const FlatParams& p : ens.particles)
                    loss_sum += -log_likelihood(arch, p, batch);
                loss_count += batch.batch_size() * ens.count();

                StepDiagnostics diag;
                if (cfg.method == Method::Ensemble) {
                    diag = ensemble_map_step(ens, batch, cfg, adam);
                } else if (cfg.method == Method::LlSvn) {
                    bool refresh = step_counter % cfg.curvature_refresh == 0 || curvature_cache.empty();
                    if (refresh) {
                        diag = ll_svn_step(ens, batch, cfg, nullptr, &curvature_cache);
                    } else {
                        diag = ll_svn_step(ens, batch, cfg, &curvature_cache, nullptr);
                    }
                } else {
                    bool needs = cfg.needs_curvature();
                    bool refresh = step_counter % cfg.curvature_refresh == 0 || curvature_cache.empty();
                    if (needs && refresh) {
                        ParticleProblem problem = nn_posterior_problem(arch, batch, cfg);
                        curvature_cache.clear();
                        curvature_cache.reserve(ens.count());
                        for (const FlatParams& p : ens.particles)
                            curvature_cache.push_back(problem.curvature(p));
                        diag = particle_step(ens.particles, problem, cfg, &curvature_cache);
                    } else {
                        diag = svn_step(ens, batch, cfg, needs ? &curvature_cache : nullptr);
                    }
                }
                record.rejections += diag.rejections;
                record.cg_iterations += diag.cg_iterations;
                ++step_counter;
            }
        } catch (const std::runtime_error& e) {
            result.aborted = true;
            result.abort_reason = e.what();
            result.last = ens;
            if (log) *log << "aborted at epoch " << epoch << ": " << e.what() << "\n";
            return result;
        }

        record.train_loss = loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0;
        record.val_nll = validation_nll(ens, data);
        record.wall_seconds =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        result.history.push_back(record);

        if (record.val_nll < result.best_val_nll) {
            result.best_val_nll = record.val_nll;
            result.best = ens;
            result.best_epoch = epoch;
        }
        if (log)
            *log << "epoch " << epoch << " train_loss " << record.train_loss << " val_nll "
                 << record.val_nll << " rejections " << record.rejections << " cg_iters "
                 << record.cg_iterations << "\n";
        if (after_epoch) after_epoch(epoch, ens);
    }
    result.last = ens;
    return result;
}

std::string method_name(Method m) {
    switch (m) {
        case Method::Ensemble: return "ensemble";
        case Method::Svgd: return "svgd";
        case Method::Svn: return "svn";
        case Method::LlSvn: return "ll_svn";
    }
    return "?";
}

Method method_from_name(const std::string& s) {
    if (s == "ensemble") return Method::Ensemble;
    if (s == "svgd") return Method::Svgd;
    if (s == "svn") return Method::Svn;
    if (s == "ll_svn") return Method::LlSvn;
    throw std::invalid_argument("unknown method: " + s);
}

std::string curvature_kind_name(CurvatureKind c) {
    switch (c) {
        case CurvatureKind::Full: return "full";
        case CurvatureKind::Diagonal: return "diagonal";
        case CurvatureKind::Kfac: return "kfac";
    }
    return "?";
}

CurvatureKind curvature_kind_from_name(const std::string& s) {
    if (s == "full") return CurvatureKind::Full;
    if (s == "diagonal") return CurvatureKind::Diagonal;
    if (s == "kfac") return CurvatureKind::Kfac;
    throw std::invalid_argument("unknown curvature kind: " + s);
}

}  // namespace svne
