#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flare/laplace.hpp"
#include "helpers.hpp"

using namespace flare;
using namespace testutil;

namespace {

DenoiserModel tiny_model(std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden = 4;
    cfg.n_blocks = 1;
    cfg.time_embed_dim = 4;
    cfg.total_steps = 12;
    DenoiserModel m(cfg);
    m.init_params(seed);
    return m;
}

IndexSet full_set(const DenoiserModel& m) {
    IndexSet set;
    set.indices.resize(m.param_count());
    for (std::size_t i = 0; i < set.indices.size(); ++i) set.indices[i] = i;
    return set;
}

GgnMatrix wrap_ggn(Matrix h) {
    GgnMatrix g;
    g.h = std::move(h);
    g.index_set.indices.resize(g.h.rows);
    for (std::size_t i = 0; i < g.h.rows; ++i) g.index_set.indices[i] = i;
    g.n_pairs = 1;
    return g;
}

}  // namespace

TEST_CASE("single-pair GGN is rank one and PSD") {
    const DenoiserModel m = tiny_model();
    const DiffusionSchedule s = cosine_schedule(12);
    const Dataset ds = gen_grid(2, 5);
    const GgnMatrix g = assemble_ggn(m, s, ds, m.last_layer_indices(), 1, 7);
    const SymEig eig = sym_eig(g.h);
    CHECK(eig.values.back() > 0.0);
    // d = 2 outputs stack into at most rank 2; everything below is numerically zero.
    for (std::size_t i = 0; i + 2 < eig.values.size(); ++i)
        CHECK(std::abs(eig.values[i]) < 1e-12 * eig.values.back());
    CHECK(eig.values.front() > -1e-12 * eig.values.back());
}

TEST_CASE("bias-only GGN of any model is the identity") {
    // d(out_k)/d(bias_j) = delta_kj regardless of the other parameters, so the
    // averaged J^T J over the head bias block is exactly I.
    const DenoiserModel m = tiny_model(17);
    const DiffusionSchedule s = cosine_schedule(12);
    const Dataset ds = gen_grid(2, 6);
    IndexSet bias;
    const auto& e = m.params.entry("out.b");
    for (std::size_t i = 0; i < e.length; ++i) bias.indices.push_back(e.offset + i);
    const GgnMatrix g = assemble_ggn(m, s, ds, bias, 16, 9);
    CHECK(max_abs_diff(g.h, Matrix::identity(e.length)) < 1e-12);
}

TEST_CASE("chunked GGN equals the stacked-matrix construction") {
    const DenoiserModel m = tiny_model(23);
    const DiffusionSchedule sch = cosine_schedule(12);
    const Dataset ds = gen_grid(4, 11);
    const IndexSet set = full_set(m);
    const std::size_t n_pairs = 8;
    const GgnMatrix g = assemble_ggn(m, sch, ds, set, n_pairs, 41);

    // Replay the documented draw protocol and build (1/n) J_pop^T J_pop in one shot.
    Rng rng(41);
    std::uniform_int_distribution<std::size_t> pick_sample(0, ds.samples.rows - 1);
    std::uniform_int_distribution<std::size_t> pick_t(1, sch.total_steps);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t d = 2, p = m.param_count();
    Matrix stacked(n_pairs * d, p);
    for (std::size_t i = 0; i < n_pairs; ++i) {
        const std::size_t idx = pick_sample(rng);
        const std::size_t t = pick_t(rng);
        const double ab = sch.bar_alpha[t];
        Vector x(d);
        for (std::size_t j = 0; j < d; ++j)
            x[j] = std::sqrt(ab) * ds.samples(idx, j) + std::sqrt(1.0 - ab) * gauss(rng);
        const Matrix jac = m.param_jacobian(x, t);
        for (std::size_t k = 0; k < d; ++k)
            for (std::size_t c = 0; c < p; ++c) stacked(i * d + k, c) = jac(k, c);
    }
    Matrix oracle = naive_matmul(naive_transpose(stacked), stacked);
    for (double& v : oracle.data) v /= static_cast<double>(n_pairs);
    CHECK(max_abs_diff(g.h, oracle) < 1e-10);
}

TEST_CASE("GGN assembly is deterministic") {
    const DenoiserModel m = tiny_model(29);
    const DiffusionSchedule s = cosine_schedule(12);
    const Dataset ds = gen_grid(2, 3);
    const GgnMatrix a = assemble_ggn(m, s, ds, m.last_layer_indices(), 32, 5);
    const GgnMatrix b = assemble_ggn(m, s, ds, m.last_layer_indices(), 32, 5);
    CHECK(a.h.data == b.h.data);
}

TEST_CASE("posterior_apply with zero curvature is v / lambda") {
    const PosteriorOperator op(PosteriorKind::FullDense, wrap_ggn(Matrix(4, 4)), 2.0);
    const Vector out = op.apply({2.0, -4.0, 6.0, 0.0});
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(-2.0).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(out[3] == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("posterior_apply with diagonal curvature is elementwise") {
    Matrix h(3, 3);
    h(0, 0) = 1.0;
    h(1, 1) = 3.0;
    h(2, 2) = 9.0;
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), 1.0);
    const Vector out = op.apply({2.0, 8.0, 20.0});
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(out[2] == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("posterior_apply matches a dense Cholesky oracle") {
    std::mt19937_64 rng(31);
    Matrix h = random_spd(12, rng);
    const double lambda = 1e-6;
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), lambda);
    Matrix damped = h;
    for (std::size_t i = 0; i < 12; ++i) damped(i, i) += lambda;
    Matrix rhs(12, 1);
    std::normal_distribution<double> n01;
    for (double& v : rhs.data) v = n01(rng);
    const Matrix oracle = cholesky_solve(damped, rhs);
    const Vector got = op.apply(Vector(rhs.data));
    for (std::size_t i = 0; i < 12; ++i)
        CHECK(got[i] == doctest::Approx(oracle(i, 0)).epsilon(1e-8));
}

TEST_CASE("posterior_dense closed forms") {
    const PosteriorOperator zero(PosteriorKind::FullDense, wrap_ggn(Matrix(3, 3)), 2.0);
    Matrix half = Matrix::identity(3);
    for (double& v : half.data) v *= 0.5;
    CHECK(max_abs_diff(zero.dense(), half) < 1e-12);

    const PosteriorOperator eye(PosteriorKind::FullDense, wrap_ggn(Matrix::identity(3)), 1.0);
    CHECK(max_abs_diff(eye.dense(), half) < 1e-12);
}

TEST_CASE("posterior_dense inverts the damped curvature") {
    std::mt19937_64 rng(37);
    Matrix h = random_spd(10, rng);
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), 1e-6);
    Matrix damped = h;
    for (std::size_t i = 0; i < 10; ++i) damped(i, i) += 1e-6;
    const Matrix prod = naive_matmul(damped, op.dense());
    CHECK(max_abs_diff(prod, Matrix::identity(10)) < 1e-8);
}

TEST_CASE("apply composed with the damped curvature is the identity") {
    std::mt19937_64 rng(41);
    Matrix h = random_spd(9, rng);
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), 1e-4);
    const DampedCurvatureOperator damped(h, 1e-4);
    std::normal_distribution<double> n01;
    Vector v(9);
    for (double& x : v) x = n01(rng);
    Vector hv(9);
    damped.apply(v, hv);
    const Vector back = op.apply(hv);
    for (std::size_t i = 0; i < 9; ++i) CHECK(back[i] == doctest::Approx(v[i]).epsilon(1e-8));
}

TEST_CASE("posterior factor draws have the posterior covariance structure") {
    std::mt19937_64 rng(43);
    Matrix h = random_spd(5, rng);
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), 1e-2);
    // L^-T xi has covariance (L L^T)^-1 = dense(); check the trace empirically.
    std::normal_distribution<double> n01;
    const std::size_t draws = 20000;
    double trace_acc = 0.0;
    for (std::size_t s = 0; s < draws; ++s) {
        Vector xi(5);
        for (double& x : xi) x = n01(rng);
        const Vector delta = solve_upper_from_lower(op.factor(), xi);
        for (double v : delta) trace_acc += v * v;
    }
    const double got = trace_acc / static_cast<double>(draws);
    CHECK(got == doctest::Approx(trace(op.dense())).epsilon(0.05));
}

TEST_CASE("posterior summary reports sane spectral extremes") {
    std::mt19937_64 rng(47);
    Matrix h = random_spd(8, rng);
    const PosteriorOperator op(PosteriorKind::Subnet, wrap_ggn(h), 1e-3);
    const PosteriorSummary s = summarize_posterior(op);
    const SymEig eig = sym_eig(h);
    CHECK(s.trace_h == doctest::Approx(trace(h)).epsilon(1e-12));
    CHECK(s.eig_max == doctest::Approx(eig.values.back() + 1e-3).epsilon(1e-3));
    CHECK(s.eig_min == doctest::Approx(eig.values.front() + 1e-3).epsilon(1e-2));
    CHECK(s.m == 8);
}

TEST_CASE("invalid construction is rejected") {
    CHECK_THROWS_AS(PosteriorOperator(PosteriorKind::Subnet, wrap_ggn(Matrix(2, 2)), 0.0),
                    InvalidArgument);
    const DenoiserModel m = tiny_model();
    const DiffusionSchedule s = cosine_schedule(12);
    const Dataset ds = gen_grid(2, 3);
    CHECK_THROWS_AS(assemble_ggn(m, s, ds, m.last_layer_indices(), 0, 1), InvalidArgument);
}
