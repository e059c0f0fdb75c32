#include "svne/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace svne {

MetricOperator MetricOperator::identity() { return MetricOperator{}; }

MetricOperator MetricOperator::avg_curvature(CurvatureEstimate estimate) {
    MetricOperator m;
    m.estimate_ = std::make_shared<const CurvatureEstimate>(std::move(estimate));
    return m;
}

Vector MetricOperator::apply(const Vector& v) const {
    return estimate_ ? estimate_->hvp(v) : v;
}

double MetricOperator::quad(const Vector& diff) const {
    double q = estimate_ ? dot(diff, estimate_->hvp(diff)) : dot(diff, diff);
    return std::max(q, 0.0);
}

MetricOperator average_curvature(const std::vector<CurvatureEstimate>& estimates) {
    if (estimates.empty()) throw std::invalid_argument("average_curvature: empty list");
    const auto kind = estimates.front().kind();
    const std::size_t dim = estimates.front().dim();
    for (const auto& e : estimates) {
        if (e.kind() != kind) throw std::invalid_argument("average_curvature: mixed estimate kinds");
        if (e.dim() != dim) throw std::invalid_argument("average_curvature: mixed dimensions");
    }
    const double inv_n = 1.0 / static_cast<double>(estimates.size());
    const double prior = estimates.front().prior_precision();

    switch (kind) {
        case CurvatureEstimate::Kind::Full: {
            DenseMatrix mean(dim, dim);
            for (const auto& e : estimates) axpy(inv_n, e.full_matrix().data, mean.data);
            return MetricOperator::avg_curvature(CurvatureEstimate::full(std::move(mean), prior));
        }
        case CurvatureEstimate::Kind::Diagonal: {
            Vector mean(dim, 0.0);
            for (const auto& e : estimates) axpy(inv_n, e.diagonal_values(), mean);
            return MetricOperator::avg_curvature(CurvatureEstimate::diagonal(std::move(mean), prior));
        }
        case CurvatureEstimate::Kind::Kronecker: {
            std::vector<KroneckerBlock> mean = estimates.front().blocks();
            for (auto& blk : mean) {
                for (double& v : blk.out_factor.data) v *= inv_n;
                for (double& v : blk.in_factor.data) v *= inv_n;
            }
            for (std::size_t e = 1; e < estimates.size(); ++e) {
                const auto& blocks = estimates[e].blocks();
                if (blocks.size() != mean.size())
                    throw std::invalid_argument("average_curvature: mismatched block structure");
                for (std::size_t l = 0; l < blocks.size(); ++l) {
                    axpy(inv_n, blocks[l].out_factor.data, mean[l].out_factor.data);
                    axpy(inv_n, blocks[l].in_factor.data, mean[l].in_factor.data);
                }
            }
            return MetricOperator::avg_curvature(
                CurvatureEstimate::kronecker(std::move(mean), dim, prior));
        }
    }
    throw std::logic_error("average_curvature: unreachable");
}

double kernel_eval(const MetricOperator& m, const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("kernel_eval: dimension mismatch");
    const double q = m.quad(sub(a, b));
    return std::exp(-q / (2.0 * static_cast<double>(a.size())));
}

Vector kernel_grad(const MetricOperator& m, const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw std::invalid_argument("kernel_grad: dimension mismatch");
    Vector diff = sub(a, b);
    const double d = static_cast<double>(a.size());
    const double k = std::exp(-m.quad(diff) / (2.0 * d));
    Vector g = m.apply(diff);
    for (double& v : g) v *= -k / d;
    return g;
}

KernelState build_kernel_state(const MetricOperator& m, const std::vector<Vector>& particles,
                               const KernelConfig& cfg) {
    if (particles.empty()) throw std::invalid_argument("build_kernel_state: no particles");
    const std::size_t n = particles.size();
    const std::size_t dim = particles.front().size();
    for (const Vector& p : particles)
        if (p.size() != dim) throw std::invalid_argument("build_kernel_state: ragged particle dims");

    // Resolve exponent scale: 1/(2d) for the dimension-scaled kernel, 1/h for
    // the median heuristic (h = median pairwise squared distance / log N).
    double inv_scale;
    if (cfg.bandwidth == KernelBandwidth::DimScaled) {
        inv_scale = 1.0 / (2.0 * static_cast<double>(dim));
    } else {
        if (!m.is_identity())
            throw std::invalid_argument("build_kernel_state: median bandwidth requires the identity metric");
        std::vector<double> sq;
        sq.reserve(n * (n - 1) / 2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) sq.push_back(m.quad(sub(particles[i], particles[j])));
        double h = 1.0;
        if (!sq.empty() && n >= 2) {
            std::size_t mid = sq.size() / 2;
            std::nth_element(sq.begin(), sq.begin() + mid, sq.end());
            double med = sq[mid];
            double log_n = std::log(static_cast<double>(n));
            h = (med > 1e-12 && log_n > 0.0) ? med / log_n : 1.0;
        }
        inv_scale = 1.0 / h;
    }

    KernelState ks;
    ks.count = n;
    ks.dim = dim;
    ks.values = DenseMatrix(n, n);
    ks.grads.assign(n, std::vector<Vector>(n));

    for (std::size_t i = 0; i < n; ++i) {
        ks.values(i, i) = 1.0;
        ks.grads[i][i] = Vector(dim, 0.0);
        for (std::size_t j = i + 1; j < n; ++j) {
            Vector diff = sub(particles[i], particles[j]);
            double q = m.quad(diff);
            double k = std::exp(-q * inv_scale);
            ks.values(i, j) = k;
            ks.values(j, i) = k;
            Vector g = m.apply(diff);
            for (double& v : g) v *= -2.0 * inv_scale * k;
            // k depends on (a - b) only, so the mirrored gradient flips sign
            ks.grads[j][i] = scaled(g, -1.0);
            ks.grads[i][j] = std::move(g);
        }
    }
    return ks;
}

}  // namespace svne
