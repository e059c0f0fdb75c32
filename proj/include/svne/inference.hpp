#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "svne/curvature.hpp"
#include "svne/data.hpp"
#include "svne/kernels.hpp"
#include "svne/nn.hpp"
#include "svne/posterior.hpp"

namespace svne {

// A particle update stayed non-finite after repeated step-size halving.
struct StepDivergedError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Method { Ensemble, Svgd, Svn, LlSvn };
enum class CurvatureKind { Full, Diagonal, Kfac };
enum class SvnSystem { Full, BlockDiagonal };
enum class KernelMetric { Identity, AvgCurvature };

struct CgConfig {
    std::size_t max_iters = 50;
    double tol = 1e-6;
    double damping = 1e-6;
};

struct MethodConfig {
    Method method = Method::Svn;
    CurvatureKind curvature = CurvatureKind::Full;
    SvnSystem svn_system = SvnSystem::Full;
    KernelMetric kernel_metric = KernelMetric::AvgCurvature;
    KernelBandwidth kernel_bandwidth = KernelBandwidth::DimScaled;
    double step_size = 1e-2;
    std::size_t epochs = 50;
    std::size_t batch_size = 16;
    std::uint64_t seed = 0;
    std::size_t particles = 5;
    double prior_precision = 1.0;
    CgConfig cg;
    std::size_t curvature_refresh = 1;   // recompute curvature every s steps
    std::size_t full_matrix_cap = 5000;  // largest d for materialized matrices
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;

    bool needs_curvature() const {
        return method == Method::Svn || method == Method::LlSvn ||
               kernel_metric == KernelMetric::AvgCurvature;
    }
    void validate() const;
};

struct UpdateDirection {
    std::vector<Vector> per_particle;
    Vector flat() const;
    static UpdateDirection from_flat(const Vector& v, std::size_t n);
};

struct StepDiagnostics {
    std::size_t cg_iterations = 0;
    std::size_t rejections = 0;
    std::size_t solver_fallbacks = 0;

    void merge(const StepDiagnostics& o) {
        cg_iterations += o.cg_iterations;
        rejections += o.rejections;
        solver_fallbacks += o.solver_fallbacks;
    }
};

// Log posterior access for one particle; lets the transport steps run on any
// target, not just network posteriors (tests drive them on closed-form
// Gaussians).
struct ParticleProblem {
    std::size_t dim = 0;
    std::function<Vector(const Vector&)> grad_log_posterior;
    std::function<CurvatureEstimate(const Vector&)> curvature;
};

// --- direction assembly -------------------------------------------------------

// v_i = (1/N) sum_j [ k(phi_j, phi_i) grad_j + grad_{phi_j} k(phi_j, phi_i) ].
UpdateDirection svgd_direction(const std::vector<Vector>& grads, const KernelState& ks);

// Matrix-free product with the kernel-weighted curvature system over all
// particles: block (m, n) is
//   (1/N) sum_p [ k(p,m) k(p,n) H_p + grad_p k(p,n) grad_p k(p,m)^T ],
// which is symmetric PSD under the positive-curvature convention.
Vector svn_hessian_matvec(const Vector& alpha, const KernelState& ks,
                          const std::vector<CurvatureEstimate>& curvatures);

struct SvnSolveResult {
    std::vector<Vector> alpha;
    std::size_t cg_iterations = 0;
    std::size_t fallbacks = 0;
};

// CG on the coupled N*d system; on solver breakdown falls back to the
// block-diagonal solve with a warning on stderr.
SvnSolveResult solve_full_system(const KernelState& ks,
                                 const std::vector<CurvatureEstimate>& curvatures,
                                 const UpdateDirection& v_svgd, const CgConfig& cg);

// Per-particle solves with the diagonal blocks only; a particle whose solve
// breaks down keeps its input direction.
SvnSolveResult solve_block_diagonal(const KernelState& ks,
                                    const std::vector<CurvatureEstimate>& curvatures,
                                    const UpdateDirection& v_svgd, const CgConfig& cg);

// v_i = sum_j k(phi_j, phi_i) alpha_j.
UpdateDirection svn_direction(const std::vector<Vector>& alpha, const KernelState& ks);

// One synchronized transport step (Svgd or Svn per cfg.method) on plain
// particle vectors. Directions are computed from the pre-step state and
// committed at once; non-finite proposals halve the step size up to five
// times before raising StepDivergedError. `cached_curvatures` substitutes
// for fresh estimates when the refresh interval says so.
StepDiagnostics particle_step(std::vector<Vector>& particles, const ParticleProblem& problem,
                              const MethodConfig& cfg,
                              const std::vector<CurvatureEstimate>* cached_curvatures = nullptr);

// --- network-level steps -------------------------------------------------------

ParticleProblem nn_posterior_problem(const MlpArchitecture& arch, const BatchView& batch,
                                     const MethodConfig& cfg);

ParticleEnsemble init_ensemble(const MlpArchitecture& arch, std::size_t count, std::uint64_t seed);

struct AdamState {
    std::vector<Vector> m;
    std::vector<Vector> v;
    std::size_t t = 0;
};

// Independent MAP ascent per particle (Adam on the negative log posterior).
StepDiagnostics ensemble_map_step(ParticleEnsemble& ensemble, const BatchView& batch,
                                  const MethodConfig& cfg, AdamState& adam);

// SVGD/SVN step on the network posterior.
StepDiagnostics svn_step(ParticleEnsemble& ensemble, const BatchView& batch,
                         const MethodConfig& cfg,
                         const std::vector<CurvatureEstimate>* cached_curvatures = nullptr);

// Newton-style update on the last layer only, plain SVGD on the rest. The
// last-layer subsystem uses the layer's Kronecker-factored curvature and the
// kernel restricted to last-layer coordinates; all other coordinates move
// exactly along the full-network SVGD direction.
StepDiagnostics ll_svn_step(ParticleEnsemble& ensemble, const BatchView& batch,
                            const MethodConfig& cfg,
                            const std::vector<CurvatureEstimate>* cached_curvatures = nullptr,
                            std::vector<CurvatureEstimate>* curvature_out = nullptr);

// --- training loop --------------------------------------------------------------

struct EpochRecord {
    std::size_t epoch = 0;
    double train_loss = 0.0;  // mean per-sample negative log-likelihood
    double val_nll = 0.0;
    double wall_seconds = 0.0;
    std::size_t rejections = 0;
    std::size_t cg_iterations = 0;
};

struct TrainResult {
    ParticleEnsemble best;
    std::size_t best_epoch = 0;
    double best_val_nll = 0.0;
    ParticleEnsemble last;
    std::vector<EpochRecord> history;
    bool aborted = false;
    std::string abort_reason;
};

using EpochHook = std::function<void(std::size_t epoch, const ParticleEnsemble&)>;

// Shuffled-minibatch epochs; after each epoch the ensemble's validation NLL
// is recorded and the checkpoint with the lowest one is kept. Step failures
// abort the run but preserve the history gathered so far.
TrainResult train(const DatasetSplit& data, const MlpArchitecture& arch, const MethodConfig& cfg,
                  const EpochHook& after_epoch = nullptr, std::ostream* log = nullptr);

std::string method_name(Method m);
Method method_from_name(const std::string& s);
std::string curvature_kind_name(CurvatureKind c);
CurvatureKind curvature_kind_from_name(const std::string& s);

}  // namespace svne
