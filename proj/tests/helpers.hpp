#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "flare/linalg.hpp"

namespace testutil {

using flare::Matrix;
using flare::Vector;

inline Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng,
                            double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Matrix m(r, c);
    for (double& v : m.data) v = n(rng);
    return m;
}

inline Matrix random_spd(std::size_t n, std::mt19937_64& rng, double ridge = 0.5) {
    Matrix a = random_matrix(n, n, rng);
    Matrix s(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = i == j ? ridge : 0.0;
            for (std::size_t k = 0; k < n; ++k) acc += a(i, k) * a(j, k);
            s(i, j) = acc;
        }
    return s;
}

// Triple-loop matmul, deliberately independent of the BLAS-backed library path.
inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = a(i, k);
            for (std::size_t j = 0; j < b.cols; ++j) c(i, j) += av * b(k, j);
        }
    return c;
}

inline Matrix naive_transpose(const Matrix& a) {
    Matrix t(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < a.cols; ++j) t(j, i) = a(i, j);
    return t;
}

inline double naive_fro(const Matrix& a) {
    double s = 0.0;
    for (double v : a.data) s += v * v;
    return std::sqrt(s);
}

// Classic cyclic Jacobi on a symmetric matrix; written here so library results
// are checked against a separately coded eigensolver.
struct EigOracle {
    Vector values;   // ascending
    Matrix vectors;  // columns
};

inline EigOracle jacobi_eig_oracle(Matrix s) {
    const std::size_t n = s.rows;
    Matrix v = Matrix::identity(n);
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += s(i, j) * s(i, j);
        if (off < 1e-26) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                if (std::abs(s(p, q)) < 1e-300) continue;
                const double theta = (s(q, q) - s(p, p)) / (2.0 * s(p, q));
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0), sn = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    const double skp = s(k, p), skq = s(k, q);
                    s(k, p) = c * skp - sn * skq;
                    s(k, q) = sn * skp + c * skq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double spk = s(p, k), sqk = s(q, k);
                    s(p, k) = c * spk - sn * sqk;
                    s(q, k) = sn * spk + c * sqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    const double vkp = v(k, p), vkq = v(k, q);
                    v(k, p) = c * vkp - sn * vkq;
                    v(k, q) = sn * vkp + c * vkq;
                }
            }
    }
    EigOracle out;
    out.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) out.values[i] = s(i, i);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return out.values[a] < out.values[b]; });
    EigOracle sorted;
    sorted.values.resize(n);
    sorted.vectors = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
        sorted.values[i] = out.values[order[i]];
        for (std::size_t k = 0; k < n; ++k) sorted.vectors(k, i) = v(k, order[i]);
    }
    return sorted;
}

struct SvdOracle {
    Matrix u, v;    // thin factors, columns correspond to singular values
    Vector sigma;   // descending
};

// SVD through the eigendecomposition of A^T A.
inline SvdOracle svd_oracle(const Matrix& a, double drop_tol = 1e-13) {
    const Matrix ata = naive_matmul(naive_transpose(a), a);
    const EigOracle eig = jacobi_eig_oracle(ata);
    const std::size_t k = a.cols;
    SvdOracle out;
    for (std::size_t idx = k; idx-- > 0;) {
        const double lam = std::max(eig.values[idx], 0.0);
        out.sigma.push_back(std::sqrt(lam));
    }
    out.v = Matrix(k, k);
    for (std::size_t j = 0; j < k; ++j)
        for (std::size_t i = 0; i < k; ++i) out.v(i, j) = eig.vectors(i, k - 1 - j);
    out.u = naive_matmul(a, out.v);
    const double cutoff = out.sigma.empty() ? 0.0 : drop_tol * out.sigma[0];
    for (std::size_t j = 0; j < k; ++j) {
        const double s = out.sigma[j];
        for (std::size_t i = 0; i < a.rows; ++i) out.u(i, j) = s > cutoff ? out.u(i, j) / s : 0.0;
    }
    return out;
}

// Moore-Penrose pseudoinverse from the SVD oracle.
inline Matrix pinv_oracle(const Matrix& a, double drop_tol = 1e-13) {
    const SvdOracle svd = svd_oracle(a, drop_tol);
    const double cutoff = svd.sigma.empty() ? 0.0 : drop_tol * svd.sigma[0];
    Matrix vs(a.cols, a.cols);
    for (std::size_t j = 0; j < a.cols; ++j) {
        const double s = svd.sigma[j];
        const double inv = s > cutoff ? 1.0 / s : 0.0;
        for (std::size_t i = 0; i < a.cols; ++i) vs(i, j) = svd.v(i, j) * inv;
    }
    return naive_matmul(vs, naive_transpose(svd.u));
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace testutil
