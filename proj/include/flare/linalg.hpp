#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "flare/common.hpp"

namespace flare {

using Vector = std::vector<double>;

// Dense row-major matrix of 64-bit floats.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    double* row_ptr(std::size_t i) { return data.data() + i * cols; }
    const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }
    std::span<const double> row(std::size_t i) const { return {row_ptr(i), cols}; }

    static Matrix identity(std::size_t n);
    Matrix transposed() const;
    bool all_finite() const;
};

// C = A * B (dgemm-backed).
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C += alpha * A * op(B); general accumulate form used by the batched network code.
void gemm_acc(Matrix& c, const Matrix& a, const Matrix& b, bool trans_a, bool trans_b,
              double alpha = 1.0, double beta = 1.0);

Vector matvec(const Matrix& a, const Vector& x);
Vector matvec_t(const Matrix& a, const Vector& x);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);
void symmetrize(Matrix& m);
double trace(const Matrix& m);
double frobenius(const Matrix& m);

// Sorted distinct positions into a flat parameter vector.
struct IndexSet {
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
    void validate(std::size_t p) const;
};

// Abstract symmetric positive (semi-)definite operator contract.
class SpdOperator {
public:
    virtual ~SpdOperator() = default;
    virtual std::size_t dim() const = 0;
    virtual void apply(std::span<const double> in, std::span<double> out) const = 0;
};

class DenseSpdOperator final : public SpdOperator {
public:
    explicit DenseSpdOperator(Matrix m) : m_(std::move(m)) {
        if (m_.rows != m_.cols) throw ShapeError("DenseSpdOperator: matrix not square");
    }
    std::size_t dim() const override { return m_.rows; }
    void apply(std::span<const double> in, std::span<double> out) const override;

private:
    Matrix m_;
};

class DiagonalSpdOperator final : public SpdOperator {
public:
    explicit DiagonalSpdOperator(Vector d) : d_(std::move(d)) {}
    std::size_t dim() const override { return d_.size(); }
    void apply(std::span<const double> in, std::span<double> out) const override {
        for (std::size_t i = 0; i < d_.size(); ++i) out[i] = d_[i] * in[i];
    }

private:
    Vector d_;
};

struct CgResult {
    Vector x;
    bool converged = false;
    std::size_t iterations = 0;
    double rel_residual = 0.0;
};

// Conjugate gradients on an SPD operator. Defaults: tol 1e-8, max_iter 10*dim.
CgResult cg_solve(const SpdOperator& op, const Vector& rhs, double tol = 1e-8,
                  std::size_t max_iter = 0);

// Lower-triangular Cholesky factor of an SPD matrix.
Matrix cholesky_factor(const Matrix& m);
// Solve M X = rhs for SPD M via Cholesky.
Matrix cholesky_solve(const Matrix& m, const Matrix& rhs);
// Solve (L L^T) X = rhs given a precomputed lower factor.
Matrix cholesky_solve_factored(const Matrix& lower, const Matrix& rhs);
// Solve L^T x = b (used to draw correlated Gaussians with covariance (L L^T)^-1).
Vector solve_upper_from_lower(const Matrix& lower, const Vector& b);

struct ThinQr {
    Matrix q;  // p x k, orthonormal columns
    Matrix r;  // k x k, upper triangular
};
ThinQr qr_thin(const Matrix& a);

struct SymEig {
    Vector values;   // ascending
    Matrix vectors;  // columns are eigenvectors
};
// Cyclic Jacobi eigendecomposition of a symmetric matrix (desk scale).
SymEig sym_eig(const Matrix& s);

// Singular values of A, descending, via the spectrum of A^T A.
Vector singular_values(const Matrix& a);

// B^T (A A^T)^+ B for full-column-rank A (p x k), via the least-squares route
// X = A^+ B then X^T X.
Matrix pinv_quadratic_form(const Matrix& a, const Matrix& b);

// Min-norm least-squares solution of min ||A X - B||_F; tolerates rank-deficient A.
// Singular values below rel_tol * sigma_max are treated as zero; the default sits
// above the Gram-route noise floor of about 1e-8 * sigma_max.
Matrix lstsq_min_norm(const Matrix& a, const Matrix& b, double rel_tol = 1e-7);

// Maximum squared row norm of the left orthonormal factor of A (thin-QR leverage scores).
double coherence(const Matrix& a);

// sigma_1 / sigma_k of A.
double condition_number(const Matrix& a);

// m distinct uniform indices without replacement from {0..p-1}, sorted.
IndexSet sample_uniform_indices(std::size_t p, std::size_t m, Rng& rng);

}  // namespace flare
