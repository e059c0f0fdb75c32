#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace svne {

using Vector = std::vector<double>;

// Row-major dense matrix of doubles. All numerics in this project are
// 64-bit; iterative solvers are too sensitive to rounding for anything less.
struct DenseMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    Vector data;  // rows * cols, row-major

    DenseMatrix() = default;
    DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    static DenseMatrix identity(std::size_t n);
    bool all_finite() const;
};

// Matrix-free linear map on R^dim.
struct LinearOperator {
    std::size_t dim = 0;
    std::function<Vector(const Vector&)> apply;

    static LinearOperator identity(std::size_t n);
    static LinearOperator from_matrix(const DenseMatrix& m);
};

// --- small vector helpers ---------------------------------------------------

double dot(const Vector& a, const Vector& b);
double norm2(const Vector& v);
void axpy(double a, const Vector& x, Vector& y);  // y += a*x
Vector scaled(const Vector& v, double a);
Vector add(const Vector& a, const Vector& b);
Vector sub(const Vector& a, const Vector& b);
bool all_finite(const Vector& v);

Vector matvec(const DenseMatrix& m, const Vector& v);
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix transpose(const DenseMatrix& m);

// --- conjugate gradients -----------------------------------------------------

enum class CgStatus { Converged, MaxIterations, Breakdown };

struct CgResult {
    Vector x;           // best iterate seen
    double residual;    // ||A x - b||_2 of the returned iterate
    std::size_t iterations;
    CgStatus status;
};

// CG for symmetric positive (semi)definite operators. Stops at
// ||r|| <= tol * ||b|| or after max_iters, whichever comes first. `damping`
// adds a Tikhonov term to the operator diagonal (apply(v) + damping*v) to
// guard near-singular systems; the solve then targets (A + damping*I)x = b.
// A non-finite or non-positive curvature value along the way reports
// Breakdown and returns the last finite iterate.
CgResult conjugate_gradient(const LinearOperator& a, const Vector& b,
                            std::size_t max_iters, double tol,
                            double damping = 0.0);

// v^T M v through a matrix-free metric.
double weighted_norm_sq(const Vector& v, const LinearOperator& m);

// Probabilistic PSD check: unit vectors plus random Rayleigh quotients; true
// iff the smallest sampled quotient is >= -1e-8 * max-row-sum norm.
bool symmetric_quadratic_form_check(const DenseMatrix& m,
                                    std::size_t random_probes = 128,
                                    std::uint64_t seed = 0);

}  // namespace svne
