#include "svne/curvature.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "svne/rng.hpp"

namespace svne {

namespace {

void symmetrize(DenseMatrix& m) {
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j) {
            double v = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = v;
            m(j, i) = v;
        }
}

void check_cap(std::size_t dim, std::size_t cap, const char* who) {
    if (dim > cap)
        throw CurvatureCapError(std::string(who) + ": d=" + std::to_string(dim) +
                                " exceeds the full-matrix cap " + std::to_string(cap) +
                                "; use the diagonal or layer-factored estimate");
}

// Maps a slice-local parameter index to (output unit, homogeneous input
// index); the bias column sits at fan_in.
inline void slice_coords(const LayerSlice& s, std::size_t p, std::size_t& o, std::size_t& i) {
    const std::size_t w = s.fan_out * s.fan_in;
    if (p < w) {
        o = p / s.fan_in;
        i = p % s.fan_in;
    } else {
        o = p - w;
        i = s.fan_in;
    }
}

}  // namespace

CurvatureEstimate CurvatureEstimate::full(DenseMatrix m, double prior_precision) {
    if (m.rows != m.cols) throw std::invalid_argument("CurvatureEstimate::full: matrix must be square");
    CurvatureEstimate e;
    e.kind_ = Kind::Full;
    e.dim_ = m.rows;
    e.prior_precision_ = prior_precision;
    e.full_ = std::move(m);
    return e;
}

CurvatureEstimate CurvatureEstimate::diagonal(Vector d, double prior_precision) {
    CurvatureEstimate e;
    e.kind_ = Kind::Diagonal;
    e.dim_ = d.size();
    e.prior_precision_ = prior_precision;
    e.diag_ = std::move(d);
    return e;
}

CurvatureEstimate CurvatureEstimate::kronecker(std::vector<KroneckerBlock> blocks, std::size_t dim,
                                               double prior_precision) {
    CurvatureEstimate e;
    e.kind_ = Kind::Kronecker;
    e.dim_ = dim;
    e.prior_precision_ = prior_precision;
    e.blocks_ = std::move(blocks);
    std::size_t covered = 0;
    for (const auto& b : e.blocks_) covered += b.slice.length;
    if (covered != dim)
        throw std::invalid_argument("CurvatureEstimate::kronecker: blocks must cover the parameter vector");
    return e;
}

Vector kron_matvec(const DenseMatrix& q, const DenseMatrix& k, const Vector& x) {
    const std::size_t a = q.rows;
    const std::size_t b = k.rows;
    if (q.cols != a || k.cols != b) throw std::invalid_argument("kron_matvec: factors must be square");
    if (x.size() != a * b) throw std::invalid_argument("kron_matvec: vector length mismatch");

    // X = reshape_row(x, a x b); Y = Q X K^T; result = vec_row(Y).
    DenseMatrix xm(a, b);
    xm.data = x;
    DenseMatrix y = matmul(matmul(q, xm), transpose(k));
    return y.data;
}

Vector CurvatureEstimate::hvp(const Vector& v) const {
    if (v.size() != dim_) throw std::invalid_argument("CurvatureEstimate::hvp: dimension mismatch");
    switch (kind_) {
        case Kind::Full:
            return matvec(full_, v);
        case Kind::Diagonal: {
            Vector out(dim_);
            for (std::size_t i = 0; i < dim_; ++i) out[i] = diag_[i] * v[i];
            return out;
        }
        case Kind::Kronecker: {
            Vector out(dim_, 0.0);
            for (const KroneckerBlock& blk : blocks_) {
                const LayerSlice& s = blk.slice;
                Vector x(s.fan_out * (s.fan_in + 1), 0.0);
                for (std::size_t p = 0; p < s.length; ++p) {
                    std::size_t o, i;
                    slice_coords(s, p, o, i);
                    x[o * (s.fan_in + 1) + i] = v[s.offset + p];
                }
                Vector y = kron_matvec(blk.out_factor, blk.in_factor, x);
                for (std::size_t p = 0; p < s.length; ++p) {
                    std::size_t o, i;
                    slice_coords(s, p, o, i);
                    out[s.offset + p] = y[o * (s.fan_in + 1) + i];
                }
            }
            return out;
        }
    }
    return {};
}

LinearOperator CurvatureEstimate::as_operator() const {
    CurvatureEstimate copy = *this;
    return {dim_, [copy](const Vector& v) { return copy.hvp(v); }};
}

DenseMatrix CurvatureEstimate::materialize(std::size_t cap) const {
    check_cap(dim_, cap, "CurvatureEstimate::materialize");
    switch (kind_) {
        case Kind::Full:
            return full_;
        case Kind::Diagonal: {
            DenseMatrix m(dim_, dim_);
            for (std::size_t i = 0; i < dim_; ++i) m(i, i) = diag_[i];
            return m;
        }
        case Kind::Kronecker: {
            DenseMatrix m(dim_, dim_);
            for (const KroneckerBlock& blk : blocks_) {
                const LayerSlice& s = blk.slice;
                for (std::size_t p = 0; p < s.length; ++p) {
                    std::size_t po, pi;
                    slice_coords(s, p, po, pi);
                    for (std::size_t q = 0; q < s.length; ++q) {
                        std::size_t qo, qi;
                        slice_coords(s, q, qo, qi);
                        m(s.offset + p, s.offset + q) =
                            blk.out_factor(po, qo) * blk.in_factor(pi, qi);
                    }
                }
            }
            return m;
        }
    }
    return {};
}

const DenseMatrix& CurvatureEstimate::full_matrix() const {
    if (kind_ != Kind::Full) throw std::logic_error("CurvatureEstimate: not a Full estimate");
    return full_;
}

const Vector& CurvatureEstimate::diagonal_values() const {
    if (kind_ != Kind::Diagonal) throw std::logic_error("CurvatureEstimate: not a Diagonal estimate");
    return diag_;
}

const std::vector<KroneckerBlock>& CurvatureEstimate::blocks() const {
    if (kind_ != Kind::Kronecker) throw std::logic_error("CurvatureEstimate: not a Kronecker estimate");
    return blocks_;
}

CurvatureEstimate ggn_full(const MlpArchitecture& arch, const FlatParams& params,
                           const BatchView& batch, const PriorSpec& prior, std::size_t cap) {
    prior.validate();
    const std::size_t d = arch.param_count();
    check_cap(d, cap, "ggn_full");

    DenseMatrix g(d, d);
    const std::size_t k = arch.output_dim();
    for (std::size_t n = 0; n < batch.batch_size(); ++n) {
        ForwardTrace trace = forward_trace(arch, params, batch.input_row(n));
        JacobianPack pack = output_jacobian_pack(arch, params, trace);
        DenseMatrix lam = head_output_precision(arch.head, trace.outputs());
        DenseMatrix lj = matmul(lam, pack.jacobian);  // k x d
        // g += J^T (Lambda J)
        for (std::size_t c = 0; c < k; ++c) {
            const double* jrow = pack.jacobian.data.data() + c * d;
            const double* mrow = lj.data.data() + c * d;
            for (std::size_t p = 0; p < d; ++p) {
                double jp = jrow[p];
                if (jp == 0.0) continue;
                double* grow = g.data.data() + p * d;
                for (std::size_t q = 0; q < d; ++q) grow[q] += jp * mrow[q];
            }
        }
    }

    const double scale = batch.rescale();
    for (double& v : g.data) v *= scale;
    for (std::size_t i = 0; i < d; ++i) g(i, i) += prior.precision;
    symmetrize(g);
    if (!g.all_finite()) throw PoisonedParametersError("ggn_full: non-finite curvature");
    return CurvatureEstimate::full(std::move(g), prior.precision);
}

CurvatureEstimate fisher_full_mc(const MlpArchitecture& arch, const FlatParams& params,
                                 const BatchView& batch, const PriorSpec& prior,
                                 std::size_t samples, std::uint64_t seed, std::size_t cap) {
    prior.validate();
    const std::size_t d = arch.param_count();
    check_cap(d, cap, "fisher_full_mc");

    DenseMatrix f(d, d);
    if (samples > 0) {
        Rng rng(seed, 0x666973u);
        const double inv_samples = 1.0 / static_cast<double>(samples);
        for (std::size_t n = 0; n < batch.batch_size(); ++n) {
            ForwardTrace trace = forward_trace(arch, params, batch.input_row(n));
            for (std::size_t s = 0; s < samples; ++s) {
                Vector y = head_sample(arch.head, trace.outputs(), rng);
                Vector cot = head_log_likelihood_grad(arch.head, trace.outputs(), y);
                Vector score = backprop_params(arch, params, trace, cot);
                for (std::size_t p = 0; p < d; ++p) {
                    double sp = score[p] * inv_samples;
                    if (sp == 0.0) continue;
                    double* frow = f.data.data() + p * d;
                    for (std::size_t q = 0; q < d; ++q) frow[q] += sp * score[q];
                }
            }
        }
        const double scale = batch.rescale();
        for (double& v : f.data) v *= scale;
    }
    for (std::size_t i = 0; i < d; ++i) f(i, i) += prior.precision;
    symmetrize(f);
    return CurvatureEstimate::full(std::move(f), prior.precision);
}

CurvatureEstimate curvature_diagonal(const MlpArchitecture& arch, const FlatParams& params,
                                     const BatchView& batch, const PriorSpec& prior) {
    prior.validate();
    const std::size_t d = arch.param_count();
    Vector diag(d, 0.0);
    const std::size_t k = arch.output_dim();
    for (std::size_t n = 0; n < batch.batch_size(); ++n) {
        ForwardTrace trace = forward_trace(arch, params, batch.input_row(n));
        JacobianPack pack = output_jacobian_pack(arch, params, trace);
        DenseMatrix lam = head_output_precision(arch.head, trace.outputs());
        DenseMatrix lj = matmul(lam, pack.jacobian);
        for (std::size_t c = 0; c < k; ++c) {
            const double* jrow = pack.jacobian.data.data() + c * d;
            const double* mrow = lj.data.data() + c * d;
            for (std::size_t p = 0; p < d; ++p) diag[p] += jrow[p] * mrow[p];
        }
    }
    const double scale = batch.rescale();
    for (double& v : diag) v = scale * v + prior.precision;
    if (!all_finite(diag)) throw PoisonedParametersError("curvature_diagonal: non-finite curvature");
    return CurvatureEstimate::diagonal(std::move(diag), prior.precision);
}

CurvatureEstimate curvature_kfac(const MlpArchitecture& arch, const FlatParams& params,
                                 const BatchView& batch, const PriorSpec& prior) {
    prior.validate();
    const auto slices = layer_slices(arch);
    const std::size_t k = arch.output_dim();
    const std::size_t b = batch.batch_size();

    std::vector<DenseMatrix> out_sums;  // per layer: sum_i R_i^T Lambda_i R_i
    std::vector<DenseMatrix> in_sums;   // per layer: sum_i a~_i a~_i^T
    for (const LayerSlice& s : slices) {
        out_sums.emplace_back(s.fan_out, s.fan_out);
        in_sums.emplace_back(s.fan_in + 1, s.fan_in + 1);
    }

    for (std::size_t n = 0; n < b; ++n) {
        ForwardTrace trace = forward_trace(arch, params, batch.input_row(n));
        JacobianPack pack = output_jacobian_pack(arch, params, trace);
        DenseMatrix lam = head_output_precision(arch.head, trace.outputs());
        for (std::size_t l = 0; l < slices.size(); ++l) {
            const LayerSlice& s = slices[l];
            const DenseMatrix& r = pack.layer_deltas[l];  // k x fan_out
            DenseMatrix lr = matmul(lam, r);
            DenseMatrix& qs = out_sums[l];
            for (std::size_t c = 0; c < k; ++c)
                for (std::size_t o = 0; o < s.fan_out; ++o) {
                    double rc = r(c, o);
                    if (rc == 0.0) continue;
                    for (std::size_t o2 = 0; o2 < s.fan_out; ++o2) qs(o, o2) += rc * lr(c, o2);
                }
            const Vector& in = trace.activations[l];
            DenseMatrix& as = in_sums[l];
            for (std::size_t i = 0; i <= s.fan_in; ++i) {
                double ai = i < s.fan_in ? in[i] : 1.0;
                if (ai == 0.0) continue;
                for (std::size_t j = 0; j <= s.fan_in; ++j)
                    as(i, j) += ai * (j < s.fan_in ? in[j] : 1.0);
            }
        }
    }

    // Scaled so that for a single sample the factor product reproduces the
    // (n/b)-scaled layer block exactly; the sqrt of the prior precision goes
    // on each factor's diagonal.
    const double c = b == 0 ? 0.0 : std::sqrt(static_cast<double>(batch.dataset_size)) / static_cast<double>(b);
    const double root_prior = std::sqrt(prior.precision);
    std::vector<KroneckerBlock> blocks;
    for (std::size_t l = 0; l < slices.size(); ++l) {
        KroneckerBlock blk;
        blk.slice = slices[l];
        blk.out_factor = out_sums[l];
        blk.in_factor = in_sums[l];
        for (double& v : blk.out_factor.data) v *= c;
        for (double& v : blk.in_factor.data) v *= c;
        for (std::size_t i = 0; i < blk.out_factor.rows; ++i) blk.out_factor(i, i) += root_prior;
        for (std::size_t i = 0; i < blk.in_factor.rows; ++i) blk.in_factor(i, i) += root_prior;
        symmetrize(blk.out_factor);
        symmetrize(blk.in_factor);
        if (!blk.out_factor.all_finite() || !blk.in_factor.all_finite())
            throw PoisonedParametersError("curvature_kfac: non-finite factor");
        blocks.push_back(std::move(blk));
    }
    return CurvatureEstimate::kronecker(std::move(blocks), arch.param_count(), prior.precision);
}

void dump_curvature(const CurvatureEstimate& estimate, const std::string& path, std::size_t cap) {
    DenseMatrix m = estimate.materialize(cap);
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("dump_curvature: cannot open " + tmp);
        f.precision(17);
        for (std::size_t i = 0; i < m.rows; ++i) {
            for (std::size_t j = 0; j < m.cols; ++j) {
                if (j) f << ',';
                f << m(i, j);
            }
            f << '\n';
        }
    }
    std::filesystem::rename(tmp, path);
}

}  // namespace svne
