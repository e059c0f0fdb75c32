#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "svne/nn.hpp"
#include "svne/posterior.hpp"
#include "svne/tensor.hpp"

namespace svne {

// Raised when a full d x d matrix would exceed the configured storage cap;
// callers should switch to the diagonal or layer-factored estimate.
struct CurvatureCapError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// One layer's Kronecker-factored curvature block. `out_factor` couples the
// layer's output units, `in_factor` couples the layer inputs in homogeneous
// coordinates (a trailing 1 absorbs the bias), so in_factor is
// (fan_in + 1) x (fan_in + 1).
struct KroneckerBlock {
    LayerSlice slice;
    DenseMatrix out_factor;
    DenseMatrix in_factor;
};

// PSD curvature approximation of the negative log posterior. The convention
// throughout the project is positive curvature: estimates approximate
// -grad^2 log pi, so they can precondition ascent directions and feed CG
// directly. The prior precision is already folded in.
class CurvatureEstimate {
public:
    enum class Kind { Full, Diagonal, Kronecker };

    static CurvatureEstimate full(DenseMatrix m, double prior_precision);
    static CurvatureEstimate diagonal(Vector d, double prior_precision);
    static CurvatureEstimate kronecker(std::vector<KroneckerBlock> blocks, std::size_t dim,
                                       double prior_precision);

    Kind kind() const { return kind_; }
    std::size_t dim() const { return dim_; }
    double prior_precision() const { return prior_precision_; }

    Vector hvp(const Vector& v) const;
    LinearOperator as_operator() const;
    DenseMatrix materialize(std::size_t cap = 5000) const;

    const DenseMatrix& full_matrix() const;
    const Vector& diagonal_values() const;
    const std::vector<KroneckerBlock>& blocks() const;

private:
    Kind kind_ = Kind::Full;
    std::size_t dim_ = 0;
    double prior_precision_ = 0.0;
    DenseMatrix full_;
    Vector diag_;
    std::vector<KroneckerBlock> blocks_;
};

// (n/b) * sum_i J_i^T Lambda_i J_i + precision*I with Lambda_i the head's
// output-space precision.
CurvatureEstimate ggn_full(const MlpArchitecture& arch, const FlatParams& params,
                           const BatchView& batch, const PriorSpec& prior,
                           std::size_t cap = 5000);

// Monte-Carlo Fisher: scores sampled from the model's own predictive
// distribution, averaged over `samples` draws per point. Provided for
// cross-checks against the deterministic estimate.
CurvatureEstimate fisher_full_mc(const MlpArchitecture& arch, const FlatParams& params,
                                 const BatchView& batch, const PriorSpec& prior,
                                 std::size_t samples, std::uint64_t seed,
                                 std::size_t cap = 5000);

// Diagonal of the scaled GGN plus the prior precision.
CurvatureEstimate curvature_diagonal(const MlpArchitecture& arch, const FlatParams& params,
                                     const BatchView& batch, const PriorSpec& prior);

// Layer-wise Kronecker factors: out_factor from batch-averaged backpropagated
// output precisions, in_factor from batch-averaged outer products of layer
// inputs (homogeneous coordinates). sqrt(prior precision) goes on each
// factor's diagonal.
CurvatureEstimate curvature_kfac(const MlpArchitecture& arch, const FlatParams& params,
                                 const BatchView& batch, const PriorSpec& prior);

// (Q (x) K) x without materializing the Kronecker product: x is reshaped
// row-major to (dim Q) x (dim K), the result is vec_row(Q X K^T).
Vector kron_matvec(const DenseMatrix& q, const DenseMatrix& k, const Vector& x);

// CSV dump of the materialized matrix (layer blocks in place for the
// Kronecker variant) for offline inspection of curvature snapshots.
void dump_curvature(const CurvatureEstimate& estimate, const std::string& path,
                    std::size_t cap = 5000);

}  // namespace svne
