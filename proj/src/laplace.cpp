#include "flare/laplace.hpp"

#include <cmath>

namespace flare {

void DampedCurvatureOperator::apply(std::span<const double> in, std::span<double> out) const {
    for (std::size_t i = 0; i < h_.rows; ++i) {
        double acc = lambda_ * in[i];
        const double* row = h_.row_ptr(i);
        for (std::size_t j = 0; j < h_.cols; ++j) acc += row[j] * in[j];
        out[i] = acc;
    }
}

PosteriorOperator::PosteriorOperator(PosteriorKind kind, GgnMatrix ggn, double lambda)
    : kind_(kind), ggn_(std::move(ggn)), lambda_(lambda) {
    if (lambda_ <= 0.0) throw InvalidArgument("PosteriorOperator: lambda must be positive");
    if (ggn_.h.rows != ggn_.h.cols) throw ShapeError("PosteriorOperator: GGN not square");
    if (dim() <= kDenseLimit) {
        Matrix damped = ggn_.h;
        for (std::size_t i = 0; i < damped.rows; ++i) damped(i, i) += lambda_;
        chol_ = cholesky_factor(damped);
    }
}

Vector PosteriorOperator::apply(const Vector& v) const {
    if (v.size() != dim()) throw ShapeError("PosteriorOperator: vector length mismatch");
    if (chol_.rows > 0) {
        Matrix rhs(dim(), 1);
        std::copy(v.begin(), v.end(), rhs.data.begin());
        const Matrix x = cholesky_solve_factored(chol_, rhs);
        return Vector(x.data.begin(), x.data.end());
    }
    const DampedCurvatureOperator op(ggn_.h, lambda_);
    const CgResult r = cg_solve(op, v, 1e-10);
    if (!r.converged)
        throw NumericalBreakdown("PosteriorOperator: CG did not converge, rel residual " +
                                 std::to_string(r.rel_residual));
    return r.x;
}

const Matrix& PosteriorOperator::dense() const {
    if (dim() > kDenseLimit)
        throw ResourceLimit("PosteriorOperator::dense: dimension exceeds dense limit " +
                            std::to_string(kDenseLimit));
    if (!dense_) {
        dense_ = cholesky_solve_factored(chol_, Matrix::identity(dim()));
        symmetrize(*dense_);
    }
    return *dense_;
}

const Matrix& PosteriorOperator::factor() const {
    if (chol_.rows == 0)
        throw ResourceLimit("PosteriorOperator::factor: dimension exceeds dense limit " +
                            std::to_string(kDenseLimit));
    return chol_;
}

GgnMatrix assemble_ggn(const DenoiserModel& model, const DiffusionSchedule& schedule,
                       const Dataset& dataset, const IndexSet& index_set, std::size_t n_pairs,
                       std::uint64_t seed) {
    if (n_pairs < 1) throw InvalidArgument("assemble_ggn: need at least one pair");
    index_set.validate(model.param_count());
    const std::size_t m = index_set.size();
    const std::size_t d = model.config.data_dim;
    constexpr std::size_t kMaxDense = 6000;
    if (m > kMaxDense)
        throw ResourceLimit("assemble_ggn: index set of " + std::to_string(m) +
                            " exceeds the dense curvature limit " + std::to_string(kMaxDense));

    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_sample(0, dataset.samples.rows - 1);
    std::uniform_int_distribution<std::size_t> pick_t(1, schedule.total_steps);
    std::normal_distribution<double> gauss(0.0, 1.0);

    GgnMatrix out;
    out.index_set = index_set;
    out.n_pairs = n_pairs;
    out.h = Matrix(m, m);

    // Chunked stacking: H accumulates chunk-wise as G^T G in single dgemm calls.
    const std::size_t chunk = std::max<std::size_t>(1, 256 / d);
    Matrix g(chunk * d, m);
    std::size_t filled = 0;
    auto flush = [&]() {
        if (filled == 0) return;
        Matrix g_view(filled * d, m);
        std::copy_n(g.data.begin(), filled * d * m, g_view.data.begin());
        gemm_acc(out.h, g_view, g_view, true, false, 1.0, 1.0);
        filled = 0;
    };

    Vector x_t(d);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const std::size_t idx = pick_sample(rng);
        const std::size_t t = pick_t(rng);
        const double ab = schedule.bar_alpha[t];
        for (std::size_t j = 0; j < d; ++j)
            x_t[j] = std::sqrt(ab) * dataset.samples(idx, j) + std::sqrt(1.0 - ab) * gauss(rng);
        const Matrix jac = model.param_jacobian_columns(x_t, t, index_set);
        std::copy(jac.data.begin(), jac.data.end(), g.data.begin() + filled * d * m);
        if (++filled == chunk) flush();
    }
    flush();

    const double inv_n = 1.0 / static_cast<double>(n_pairs);
    for (double& v : out.h.data) v *= inv_n;
    symmetrize(out.h);
    return out;
}

PosteriorSummary summarize_posterior(const PosteriorOperator& op, std::size_t power_iters) {
    PosteriorSummary s;
    switch (op.kind()) {
        case PosteriorKind::FullDense: s.kind = "full"; break;
        case PosteriorKind::Subnet: s.kind = "subnet"; break;
        case PosteriorKind::LastLayer: s.kind = "last_layer"; break;
    }
    s.m = op.dim();
    s.lambda = op.lambda();
    s.trace_h = trace(op.ggn());

    Rng rng(12345);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector v(s.m);
    for (double& x : v) x = gauss(rng);
    const DampedCurvatureOperator damped(op.ggn(), op.lambda());
    Vector w(s.m);
    for (std::size_t it = 0; it < power_iters; ++it) {
        damped.apply(v, w);
        const double n = norm2(w);
        for (std::size_t i = 0; i < s.m; ++i) v[i] = w[i] / n;
    }
    damped.apply(v, w);
    s.eig_max = dot(v, w);

    for (double& x : v) x = gauss(rng);
    for (std::size_t it = 0; it < power_iters; ++it) {
        const Vector z = op.apply(v);
        const double n = norm2(z);
        for (std::size_t i = 0; i < s.m; ++i) v[i] = z[i] / n;
    }
    damped.apply(v, w);
    s.eig_min = dot(v, w);
    return s;
}

}  // namespace flare
