#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "svne/tensor.hpp"

namespace svne {

// Raised when a forward/backward pass meets non-finite values, i.e. the
// parameters themselves have gone bad.
struct PoisonedParametersError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Activation { Tanh, Relu };

// Likelihood head attached to the raw network outputs.
//   GaussianRegression:   2 outputs (mean, log-variance), variance floored at
//                         kVarianceFloor inside the likelihood.
//   BinaryClassification: 1 logit.
//   Multiclass:           C logits, softmax likelihood.
enum class Head { GaussianRegression, BinaryClassification, Multiclass };

inline constexpr double kVarianceFloor = 1e-6;

struct MlpArchitecture {
    std::vector<std::size_t> layer_sizes;  // input, hidden..., output
    Activation activation = Activation::Tanh;
    Head head = Head::GaussianRegression;

    std::size_t input_dim() const { return layer_sizes.front(); }
    std::size_t output_dim() const { return layer_sizes.back(); }
    // Affine layers; hidden count may be zero (plain linear model).
    std::size_t num_layers() const { return layer_sizes.size() - 1; }
    std::size_t param_count() const;
    void validate() const;
};

// Parameters live in one flat vector, laid out per layer as the weight
// matrix (out x in, row-major) followed by the biases. The last slice is the
// output layer.
using FlatParams = Vector;

struct LayerSlice {
    std::size_t layer_index = 0;  // 0-based affine layer
    std::size_t offset = 0;
    std::size_t length = 0;
    std::size_t fan_in = 0;
    std::size_t fan_out = 0;
};

std::vector<LayerSlice> layer_slices(const MlpArchitecture& arch);
LayerSlice last_layer_slice(const MlpArchitecture& arch);

// Glorot-uniform weights, zero biases, deterministic per seed.
FlatParams init_params(const MlpArchitecture& arch, std::uint64_t seed);

// Per-sample forward cache: activations[0] is the input, activations[l] the
// post-nonlinearity output of affine layer l (the network output for the
// last layer, which stays linear).
struct ForwardTrace {
    std::vector<Vector> pre_activations;   // one per affine layer
    std::vector<Vector> activations;       // num_layers + 1 entries
    const Vector& outputs() const { return activations.back(); }
};

Vector forward(const MlpArchitecture& arch, const FlatParams& params, const Vector& x);
ForwardTrace forward_trace(const MlpArchitecture& arch, const FlatParams& params, const Vector& x);

// Reverse pass: gradient w.r.t. the flat parameters of
// <output_cotangent, outputs(x)>.
Vector backprop_params(const MlpArchitecture& arch, const FlatParams& params,
                       const ForwardTrace& trace, const Vector& output_cotangent);

// k x d Jacobian of the raw outputs, plus the pre-activation sensitivities
// d(output_c)/d(z_l) per layer (k x layer_width) needed by layer-factored
// curvature.
struct JacobianPack {
    DenseMatrix jacobian;                   // k x d
    std::vector<DenseMatrix> layer_deltas;  // per layer: k x fan_out
};

DenseMatrix per_sample_output_jacobian(const MlpArchitecture& arch, const FlatParams& params,
                                       const Vector& x);
JacobianPack output_jacobian_pack(const MlpArchitecture& arch, const FlatParams& params,
                                  const ForwardTrace& trace);

// --- likelihood head math ----------------------------------------------------
// `target` is the raw target row: one real for regression, a 0/1 label for
// the binary head, a class index for multiclass.

double head_log_likelihood(Head head, const Vector& outputs, const Vector& target);
Vector head_log_likelihood_grad(Head head, const Vector& outputs, const Vector& target);
// Expected negative output-space Hessian of the log-likelihood under the
// model's own predictive distribution (PSD by construction; for the
// classification heads it coincides with the observed one).
DenseMatrix head_output_precision(Head head, const Vector& outputs);
// Sample a target from p(y | outputs).
Vector head_sample(Head head, const Vector& outputs, class Rng& rng);

// Gradient of the per-sample log-likelihood w.r.t. the flat parameters.
Vector per_sample_grad(const MlpArchitecture& arch, const FlatParams& params,
                       const Vector& x, const Vector& target);

// The ensemble state every method updates: N flat parameter vectors sharing
// one architecture.
struct ParticleEnsemble {
    MlpArchitecture arch;
    std::vector<FlatParams> particles;
    std::size_t count() const { return particles.size(); }
};

// --- checkpoints ---------------------------------------------------------------
// JSON document {architecture, seed, particles}; floats written with 17
// significant digits so reload is bit-exact.

struct Checkpoint {
    MlpArchitecture arch;
    std::uint64_t seed = 0;
    std::vector<FlatParams> particles;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

std::string activation_name(Activation a);
std::string head_name(Head h);
Activation activation_from_name(const std::string& s);
Head head_from_name(const std::string& s);

}  // namespace svne
