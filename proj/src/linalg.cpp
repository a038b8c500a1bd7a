#include "flare/linalg.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace flare {

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix Matrix::transposed() const {
    Matrix t(cols, rows);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) t(j, i) = (*this)(i, j);
    return t;
}

bool Matrix::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void gemm_acc(Matrix& c, const Matrix& a, const Matrix& b, bool trans_a, bool trans_b,
              double alpha, double beta) {
    const std::size_t m = trans_a ? a.cols : a.rows;
    const std::size_t k = trans_a ? a.rows : a.cols;
    const std::size_t kb = trans_b ? b.cols : b.rows;
    const std::size_t n = trans_b ? b.rows : b.cols;
    if (k != kb) throw ShapeError("gemm: inner dimensions differ");
    if (c.rows != m || c.cols != n) throw ShapeError("gemm: output shape mismatch");
    if (m == 0 || n == 0 || k == 0) return;
    cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
                trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
                static_cast<int>(k), alpha, a.data.data(), static_cast<int>(a.cols),
                b.data.data(), static_cast<int>(b.cols), beta, c.data.data(),
                static_cast<int>(c.cols));
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.cols);
    gemm_acc(c, a, b, false, false, 1.0, 0.0);
    return c;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix c(a.cols, b.cols);
    gemm_acc(c, a, b, true, false, 1.0, 0.0);
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    Matrix c(a.rows, b.rows);
    gemm_acc(c, a, b, false, true, 1.0, 0.0);
    return c;
}

Vector matvec(const Matrix& a, const Vector& x) {
    if (x.size() != a.cols) throw ShapeError("matvec: dimension mismatch");
    Vector y(a.rows, 0.0);
    cblas_dgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(a.rows), static_cast<int>(a.cols),
                1.0, a.data.data(), static_cast<int>(a.cols), x.data(), 1, 0.0, y.data(), 1);
    return y;
}

Vector matvec_t(const Matrix& a, const Vector& x) {
    if (x.size() != a.rows) throw ShapeError("matvec_t: dimension mismatch");
    Vector y(a.cols, 0.0);
    cblas_dgemv(CblasRowMajor, CblasTrans, static_cast<int>(a.rows), static_cast<int>(a.cols),
                1.0, a.data.data(), static_cast<int>(a.cols), x.data(), 1, 0.0, y.data(), 1);
    return y;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

void symmetrize(Matrix& m) {
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i + 1; j < m.cols; ++j) {
            const double v = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = v;
            m(j, i) = v;
        }
}

double trace(const Matrix& m) {
    double s = 0.0;
    for (std::size_t i = 0; i < std::min(m.rows, m.cols); ++i) s += m(i, i);
    return s;
}

double frobenius(const Matrix& m) { return norm2(m.data); }

void IndexSet::validate(std::size_t p) const {
    if (indices.empty()) throw InvalidArgument("IndexSet: empty");
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= p) throw InvalidArgument("IndexSet: index out of range");
        if (i > 0 && indices[i] <= indices[i - 1])
            throw InvalidArgument("IndexSet: not strictly increasing");
    }
}

void DenseSpdOperator::apply(std::span<const double> in, std::span<double> out) const {
    if (in.size() != m_.rows) throw ShapeError("DenseSpdOperator::apply: dimension mismatch");
    cblas_dgemv(CblasRowMajor, CblasNoTrans, static_cast<int>(m_.rows),
                static_cast<int>(m_.cols), 1.0, m_.data.data(), static_cast<int>(m_.cols),
                in.data(), 1, 0.0, out.data(), 1);
}

CgResult cg_solve(const SpdOperator& op, const Vector& rhs, double tol, std::size_t max_iter) {
    const std::size_t n = op.dim();
    if (rhs.size() != n) throw ShapeError("cg_solve: rhs length != operator dimension");
    if (tol <= 0.0) throw InvalidArgument("cg_solve: tol must be positive");
    if (max_iter == 0) max_iter = 10 * n;

    CgResult res;
    res.x.assign(n, 0.0);
    const double rhs_norm = norm2(rhs);
    if (rhs_norm == 0.0) {
        res.converged = true;
        return res;
    }

    Vector r = rhs;  // r = b - A*0
    Vector p = r;
    Vector ap(n);
    double rr = dot(r, r);
    for (std::size_t it = 0; it < max_iter; ++it) {
        op.apply(p, ap);
        const double pap = dot(p, ap);
        if (!std::isfinite(pap)) throw NumericalBreakdown("cg_solve: non-finite curvature");
        if (pap <= 0.0) break;  // loss of positive definiteness; return best iterate
        const double alpha = rr / pap;
        for (std::size_t i = 0; i < n; ++i) {
            res.x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        const double rr_new = dot(r, r);
        if (!std::isfinite(rr_new)) throw NumericalBreakdown("cg_solve: non-finite residual");
        res.iterations = it + 1;
        if (std::sqrt(rr_new) <= tol * rhs_norm) {
            rr = rr_new;
            res.converged = true;
            break;
        }
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
    }
    res.rel_residual = std::sqrt(rr) / rhs_norm;
    if (res.rel_residual <= tol) res.converged = true;
    return res;
}

Matrix cholesky_factor(const Matrix& m) {
    if (m.rows != m.cols) throw ShapeError("cholesky: matrix not square");
    const std::size_t n = m.rows;
    Matrix l(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double diag = m(j, j);
        const double* lj = l.row_ptr(j);
        for (std::size_t k = 0; k < j; ++k) diag -= lj[k] * lj[k];
        if (!(diag > 0.0)) throw NotPositiveDefinite("cholesky: non-positive pivot at " + std::to_string(j));
        const double ljj = std::sqrt(diag);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = m(i, j);
            const double* li = l.row_ptr(i);
            for (std::size_t k = 0; k < j; ++k) s -= li[k] * lj[k];
            l(i, j) = s / ljj;
        }
    }
    return l;
}

Matrix cholesky_solve_factored(const Matrix& lower, const Matrix& rhs) {
    const std::size_t n = lower.rows;
    if (rhs.rows != n) throw ShapeError("cholesky_solve: rhs rows mismatch");
    Matrix x = rhs;
    const int nrhs = static_cast<int>(rhs.cols);
    if (nrhs == 0) return x;
    // L Y = rhs, then L^T X = Y; dtrsm works on the full rhs block.
    cblas_dtrsm(CblasRowMajor, CblasLeft, CblasLower, CblasNoTrans, CblasNonUnit,
                static_cast<int>(n), nrhs, 1.0, lower.data.data(), static_cast<int>(lower.cols),
                x.data.data(), nrhs);
    cblas_dtrsm(CblasRowMajor, CblasLeft, CblasLower, CblasTrans, CblasNonUnit,
                static_cast<int>(n), nrhs, 1.0, lower.data.data(), static_cast<int>(lower.cols),
                x.data.data(), nrhs);
    return x;
}

Matrix cholesky_solve(const Matrix& m, const Matrix& rhs) {
    if (m.rows != m.cols) throw ShapeError("cholesky_solve: matrix not square");
    double max_asym = 0.0, max_abs = 0.0;
    for (std::size_t i = 0; i < m.rows; ++i)
        for (std::size_t j = i; j < m.cols; ++j) {
            max_asym = std::max(max_asym, std::abs(m(i, j) - m(j, i)));
            max_abs = std::max(max_abs, std::abs(m(i, j)));
        }
    if (max_asym > 1e-10 * std::max(1.0, max_abs))
        throw InvalidArgument("cholesky_solve: matrix not symmetric");
    return cholesky_solve_factored(cholesky_factor(m), rhs);
}

Vector solve_upper_from_lower(const Matrix& lower, const Vector& b) {
    const std::size_t n = lower.rows;
    if (b.size() != n) throw ShapeError("solve_upper_from_lower: length mismatch");
    Vector x = b;
    cblas_dtrsv(CblasRowMajor, CblasLower, CblasTrans, CblasNonUnit, static_cast<int>(n),
                lower.data.data(), static_cast<int>(lower.cols), x.data(), 1);
    return x;
}

ThinQr qr_thin(const Matrix& a) {
    const std::size_t p = a.rows, k = a.cols;
    if (p < k) throw ShapeError("qr_thin: requires rows >= cols");
    Matrix w = a;
    // Householder reflectors v_j (length p - j) with their squared norms.
    std::vector<Vector> refl(k);
    Vector vtv(k, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
        double nx2 = 0.0;
        for (std::size_t i = j; i < p; ++i) nx2 += w(i, j) * w(i, j);
        if (nx2 == 0.0) continue;
        const double alpha = (w(j, j) >= 0.0 ? -1.0 : 1.0) * std::sqrt(nx2);
        Vector v(p - j);
        v[0] = w(j, j) - alpha;
        for (std::size_t i = j + 1; i < p; ++i) v[i - j] = w(i, j);
        double nv2 = 0.0;
        for (double x : v) nv2 += x * x;
        if (nv2 == 0.0) continue;
        w(j, j) = alpha;
        for (std::size_t i = j + 1; i < p; ++i) w(i, j) = 0.0;
        for (std::size_t c = j + 1; c < k; ++c) {
            double s = 0.0;
            for (std::size_t i = j; i < p; ++i) s += v[i - j] * w(i, c);
            const double tau = 2.0 * s / nv2;
            for (std::size_t i = j; i < p; ++i) w(i, c) -= tau * v[i - j];
        }
        refl[j] = std::move(v);
        vtv[j] = nv2;
    }
    ThinQr out;
    out.r = Matrix(k, k);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = i; j < k; ++j) out.r(i, j) = w(i, j);
    // Q = H_0 ... H_{k-1} applied to the first k identity columns.
    out.q = Matrix(p, k);
    for (std::size_t j = 0; j < k; ++j) out.q(j, j) = 1.0;
    for (std::size_t j = k; j-- > 0;) {
        if (vtv[j] == 0.0) continue;
        const Vector& v = refl[j];
        for (std::size_t c = 0; c < k; ++c) {
            double s = 0.0;
            for (std::size_t i = j; i < p; ++i) s += v[i - j] * out.q(i, c);
            const double tau = 2.0 * s / vtv[j];
            for (std::size_t i = j; i < p; ++i) out.q(i, c) -= tau * v[i - j];
        }
    }
    return out;
}

SymEig sym_eig(const Matrix& s) {
    if (s.rows != s.cols) throw ShapeError("sym_eig: matrix not square");
    const std::size_t n = s.rows;
    Matrix a = s;
    Matrix v = Matrix::identity(n);
    const std::size_t max_sweeps = 64;
    for (std::size_t sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (std::sqrt(off) < 1e-14 * std::max(1.0, frobenius(a))) break;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double sn = t * c;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), aiq = a(i, q);
                    a(i, p) = c * aip - sn * aiq;
                    a(i, q) = sn * aip + c * aiq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a(p, i), aqi = a(q, i);
                    a(p, i) = c * api - sn * aqi;
                    a(q, i) = sn * api + c * aqi;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vip = v(i, p), viq = v(i, q);
                    v(i, p) = c * vip - sn * viq;
                    v(i, q) = sn * vip + c * viq;
                }
            }
    }
    SymEig out;
    out.values.resize(n);
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    std::sort(order.begin(), order.end(),
              [&](std::size_t x, std::size_t y) { return a(x, x) < a(y, y); });
    out.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        out.values[k] = a(order[k], order[k]);
        for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = v(i, order[k]);
    }
    return out;
}

Vector singular_values(const Matrix& a) {
    const Matrix gram = matmul_tn(a, a);
    SymEig e = sym_eig(gram);
    Vector sv(e.values.size());
    for (std::size_t i = 0; i < sv.size(); ++i) {
        const double lam = e.values[e.values.size() - 1 - i];
        sv[i] = lam > 0.0 ? std::sqrt(lam) : 0.0;
    }
    return sv;
}

namespace {

void require_full_column_rank(const Matrix& a, double rel_tol) {
    const Vector sv = singular_values(a);
    if (sv.empty() || sv.front() == 0.0 || sv.back() < rel_tol * sv.front())
        throw RankDeficient("matrix is rank deficient (sigma_min/sigma_max below tolerance)");
}

Matrix solve_upper_tri(const Matrix& r, const Matrix& rhs) {
    const std::size_t k = r.rows;
    Matrix x = rhs;
    for (std::size_t c = 0; c < rhs.cols; ++c)
        for (std::size_t i = k; i-- > 0;) {
            double s = x(i, c);
            for (std::size_t j = i + 1; j < k; ++j) s -= r(i, j) * x(j, c);
            x(i, c) = s / r(i, i);
        }
    return x;
}

}  // namespace

Matrix pinv_quadratic_form(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows) throw ShapeError("pinv_quadratic_form: row counts differ");
    require_full_column_rank(a, 1e-12);
    const ThinQr qr = qr_thin(a);
    const Matrix qtb = matmul_tn(qr.q, b);
    const Matrix x = solve_upper_tri(qr.r, qtb);  // X = A^+ B
    Matrix out = matmul_tn(x, x);
    symmetrize(out);
    return out;
}

Matrix lstsq_min_norm(const Matrix& a, const Matrix& b, double rel_tol) {
    if (a.rows != b.rows) throw ShapeError("lstsq_min_norm: row counts differ");
    // X = V diag(1/sigma) U^T B from the spectrum of A^T A, dropping tiny modes.
    const Matrix gram = matmul_tn(a, a);
    const SymEig e = sym_eig(gram);
    const std::size_t k = a.cols;
    double lam_max = 0.0;
    for (double lam : e.values) lam_max = std::max(lam_max, lam);
    const double lam_cut = rel_tol * rel_tol * lam_max;
    const Matrix atb = matmul_tn(a, b);          // k x l
    const Matrix c = matmul_tn(e.vectors, atb);  // V^T A^T B
    Matrix scaled = c;
    for (std::size_t i = 0; i < k; ++i) {
        const double lam = e.values[i];
        const double inv = (lam > lam_cut && lam > 0.0) ? 1.0 / lam : 0.0;
        for (std::size_t j = 0; j < c.cols; ++j) scaled(i, j) = c(i, j) * inv;
    }
    return matmul(e.vectors, scaled);
}

double coherence(const Matrix& a) {
    if (a.rows < a.cols) throw ShapeError("coherence: requires rows >= cols");
    require_full_column_rank(a, 1e-12);
    const ThinQr qr = qr_thin(a);
    double mu = 0.0;
    for (std::size_t i = 0; i < qr.q.rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < qr.q.cols; ++j) s += qr.q(i, j) * qr.q(i, j);
        mu = std::max(mu, s);
    }
    return mu;
}

double condition_number(const Matrix& a) {
    const Vector sv = singular_values(a);
    if (sv.empty()) throw ShapeError("condition_number: empty matrix");
    if (sv.back() < 1e-14 * sv.front())
        throw RankDeficient("condition_number: sigma_min below 1e-14 * sigma_max");
    return sv.front() / sv.back();
}

IndexSet sample_uniform_indices(std::size_t p, std::size_t m, Rng& rng) {
    if (m < 1 || m > p) throw InvalidArgument("sample_uniform_indices: need 1 <= m <= p");
    // Selection sampling (Knuth 3.4.2 S): uniform without replacement, emitted sorted.
    IndexSet set;
    set.indices.reserve(m);
    std::size_t needed = m;
    for (std::size_t i = 0; i < p && needed > 0; ++i) {
        const std::size_t remaining = p - i;
        std::uniform_int_distribution<std::size_t> u(0, remaining - 1);
        if (u(rng) < needed) {
            set.indices.push_back(i);
            --needed;
        }
    }
    return set;
}

}  // namespace flare
