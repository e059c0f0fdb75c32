#pragma once

#include <memory>
#include <vector>

#include "svne/curvature.hpp"
#include "svne/tensor.hpp"

namespace svne {

// Metric for particle distances: plain Euclidean or the ensemble-averaged
// curvature (which bends the kernel towards directions the posterior is
// sharp in).
class MetricOperator {
public:
    static MetricOperator identity();
    static MetricOperator avg_curvature(CurvatureEstimate estimate);

    bool is_identity() const { return !estimate_; }
    const CurvatureEstimate* estimate() const { return estimate_.get(); }

    Vector apply(const Vector& v) const;
    // diff^T M diff, clamped at zero against roundoff.
    double quad(const Vector& diff) const;

private:
    std::shared_ptr<const CurvatureEstimate> estimate_;  // null = identity
};

// Element/factor-wise mean of same-kind estimates.
MetricOperator average_curvature(const std::vector<CurvatureEstimate>& estimates);

enum class KernelBandwidth {
    DimScaled,  // exp(-quad / (2 d)), the default
    Median,     // exp(-quad / h), h = median pairwise quad / log N (identity metric only)
};

struct KernelConfig {
    KernelBandwidth bandwidth = KernelBandwidth::DimScaled;
};

// k(a, b) = exp(-(a-b)^T M (a-b) / (2 d)); always in (0, 1], symmetric.
double kernel_eval(const MetricOperator& m, const Vector& a, const Vector& b);
// grad_a k(a, b) = -(k / d) * M (a - b).
Vector kernel_grad(const MetricOperator& m, const Vector& a, const Vector& b);

// Pairwise kernel values and gradients for one ensemble.
// values(i, j) = k(phi_i, phi_j); grads[i][j] = grad w.r.t. the first
// argument at (phi_i, phi_j). Diagonal is exactly 1 / exactly zero.
struct KernelState {
    std::size_t count = 0;
    std::size_t dim = 0;
    DenseMatrix values;
    std::vector<std::vector<Vector>> grads;
};

KernelState build_kernel_state(const MetricOperator& m, const std::vector<Vector>& particles,
                               const KernelConfig& cfg = {});

}  // namespace svne
