#include "svne/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "svne/rng.hpp"

namespace svne {

DenseMatrix DenseMatrix::identity(std::size_t n) {
    DenseMatrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

bool DenseMatrix::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

LinearOperator LinearOperator::identity(std::size_t n) {
    return {n, [](const Vector& v) { return v; }};
}

LinearOperator LinearOperator::from_matrix(const DenseMatrix& m) {
    if (m.rows != m.cols) throw std::invalid_argument("LinearOperator: matrix must be square");
    return {m.rows, [m](const Vector& v) { return matvec(m, v); }};
}

double dot(const Vector& a, const Vector& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(const Vector& v) { return std::sqrt(dot(v, v)); }

void axpy(double a, const Vector& x, Vector& y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

Vector scaled(const Vector& v, double a) {
    Vector out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = a * v[i];
    return out;
}

Vector add(const Vector& a, const Vector& b) {
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
    return out;
}

Vector sub(const Vector& a, const Vector& b) {
    Vector out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

bool all_finite(const Vector& v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

Vector matvec(const DenseMatrix& m, const Vector& v) {
    if (v.size() != m.cols) throw std::invalid_argument("matvec: dimension mismatch");
    Vector out(m.rows, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.data.data() + i * m.cols;
        double s = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * v[j];
        out[i] = s;
    }
    return out;
}

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
    if (a.cols != b.rows) throw std::invalid_argument("matmul: dimension mismatch");
    DenseMatrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            double aik = a(i, k);
            if (aik == 0.0) continue;
            for (std::size_t j = 0; j < b.cols; ++j) out(i, j) += aik * b(k, j);
        }
    }
    return out;
}

DenseMatrix transpose(const DenseMatrix& m) {
    DenseMatrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

CgResult conjugate_gradient(const LinearOperator& a, const Vector& b,
                            std::size_t max_iters, double tol, double damping) {
    if (b.size() != a.dim) throw std::invalid_argument("conjugate_gradient: rhs dimension mismatch");

    auto apply = [&](const Vector& v) {
        Vector out = a.apply(v);
        if (out.size() != a.dim) throw std::invalid_argument("conjugate_gradient: operator changed dimension");
        if (damping != 0.0) axpy(damping, v, out);
        return out;
    };

    const double bnorm = norm2(b);
    Vector x(a.dim, 0.0);
    if (bnorm == 0.0) return {x, 0.0, 0, CgStatus::Converged};

    Vector r = b;  // r = b - A*0
    Vector p = r;
    double rs = dot(r, r);

    Vector best_x = x;
    double best_res = std::sqrt(rs);
    CgStatus status = CgStatus::MaxIterations;
    std::size_t it = 0;

    while (it < max_iters) {
        ++it;
        Vector ap = apply(p);
        double pap = dot(p, ap);
        if (!std::isfinite(pap) || pap <= 0.0) {
            status = CgStatus::Breakdown;
            break;
        }
        double alpha = rs / pap;
        axpy(alpha, p, x);
        axpy(-alpha, ap, r);
        double rs_new = dot(r, r);
        if (!std::isfinite(rs_new) || !all_finite(x)) {
            status = CgStatus::Breakdown;
            break;
        }
        double res = std::sqrt(rs_new);
        if (res < best_res) {
            best_res = res;
            best_x = x;
        }
        if (res <= tol * bnorm) {
            status = CgStatus::Converged;
            break;
        }
        double beta = rs_new / rs;
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
        rs = rs_new;
    }

    Vector final_r = sub(b, apply(best_x));
    return {std::move(best_x), norm2(final_r), it, status};
}

double weighted_norm_sq(const Vector& v, const LinearOperator& m) {
    if (v.size() != m.dim) throw std::invalid_argument("weighted_norm_sq: dimension mismatch");
    return dot(v, m.apply(v));
}

bool symmetric_quadratic_form_check(const DenseMatrix& m, std::size_t random_probes,
                                    std::uint64_t seed) {
    if (m.rows != m.cols) throw std::invalid_argument("symmetric_quadratic_form_check: matrix must be square");
    const std::size_t n = m.rows;
    if (n == 0) return true;

    double scale = 0.0;  // max row sum
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += std::abs(m(i, j));
        scale = std::max(scale, row);
    }
    const double floor = -1e-8 * std::max(scale, 1e-300);

    auto quotient = [&](const Vector& v) {
        double vv = dot(v, v);
        if (vv == 0.0) return 0.0;
        return dot(v, matvec(m, v)) / vv;
    };

    for (std::size_t i = 0; i < n; ++i) {
        Vector e(n, 0.0);
        e[i] = 1.0;
        if (quotient(e) < floor) return false;
    }
    Rng rng(seed, 0x70736463u);
    for (std::size_t t = 0; t < random_probes; ++t) {
        Vector v(n);
        for (std::size_t i = 0; i < n; ++i) v[i] = rng.normal();
        if (quotient(v) < floor) return false;
    }
    return true;
}

}  // namespace svne
