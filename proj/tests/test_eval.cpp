#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flare/eval.hpp"
#include "helpers.hpp"

using namespace flare;
using namespace testutil;

namespace {

Matrix gaussian_cloud(std::size_t n, std::size_t dim, std::uint64_t seed, double shift0 = 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix m(n, dim);
    for (double& v : m.data) v = gauss(rng);
    for (std::size_t i = 0; i < n; ++i) m(i, 0) += shift0;
    return m;
}

DenoiserModel tiny_model(std::uint64_t seed = 3) {
    ModelConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden = 4;
    cfg.n_blocks = 1;
    cfg.time_embed_dim = 4;
    cfg.total_steps = 8;
    DenoiserModel m(cfg);
    m.init_params(seed);
    return m;
}

PosteriorOperator full_posterior(const DenoiserModel& m, const DiffusionSchedule& s,
                                 const Dataset& ds, double lambda = 1e-2) {
    IndexSet set;
    set.indices.resize(m.param_count());
    for (std::size_t i = 0; i < set.indices.size(); ++i) set.indices[i] = i;
    return PosteriorOperator(PosteriorKind::FullDense, assemble_ggn(m, s, ds, set, 32, 7),
                             lambda);
}

}  // namespace

TEST_CASE("accuracy basics") {
    CHECK(accuracy({0.9, 0.1, 0.8}, {1, 0, 1}) == 1.0);
    CHECK(accuracy({0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}) == 0.5);  // >= 0.5 is class 1
    CHECK(accuracy({0.9, 0.2, 0.6}, {1, 0, 0}) == doctest::Approx(2.0 / 3.0));
    CHECK_THROWS_AS(accuracy({}, {}), InvalidArgument);
    CHECK_THROWS_AS(accuracy({0.5}, {1, 0}), ShapeError);
}

TEST_CASE("roc_auc basics") {
    CHECK(roc_auc({0.9, 0.8}, {0.2, 0.1}) == 1.0);
    CHECK(roc_auc({0.3, 0.7, 0.5}, {0.3, 0.7, 0.5}) == 0.5);
    CHECK(roc_auc({0.8, 0.4}, {0.6, 0.3}) == doctest::Approx(0.75));
    CHECK_THROWS_AS(roc_auc({}, {0.5}), InvalidArgument);
}

TEST_CASE("roc_auc is a rank statistic") {
    Rng rng(4);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector pos(40), neg(35);
    for (double& v : pos) v = gauss(rng) + 0.5;
    for (double& v : neg) v = gauss(rng);
    const double base = roc_auc(pos, neg);
    auto squash = [](Vector v) {
        for (double& x : v) x = std::tanh(3.0 * x) + 10.0;
        return v;
    };
    CHECK(roc_auc(squash(pos), squash(neg)) == doctest::Approx(base).epsilon(1e-14));
}

TEST_CASE("gap_closure sign convention and guard") {
    CHECK(gap_closure(0.50, 0.75) == doctest::Approx(100.0));
    CHECK(gap_closure(0.65, 0.65) == doctest::Approx(0.0));
    CHECK(gap_closure(0.65, 0.80) == doctest::Approx(50.0));
    CHECK(gap_closure(0.5, 0.9) == doctest::Approx(100.0));
    CHECK_THROWS_AS(gap_closure(0.7, 0.5), UndefinedBaseline);
}

TEST_CASE("filter_by_score selection and tie rule") {
    const auto all = filter_by_score({5.0, 1.0, 3.0}, 100.0);
    CHECK(all == std::vector<std::size_t>{0, 1, 2});
    const auto half = filter_by_score({3.0, 1.0, 4.0, 2.0}, 50.0);
    CHECK(half == std::vector<std::size_t>{1, 3});
    const auto ties = filter_by_score({7.0, 7.0, 7.0, 7.0}, 50.0);
    CHECK(ties == std::vector<std::size_t>{0, 1});
    // Idempotent: refiltering retained scores at p = 100 keeps everything.
    CHECK(filter_by_score({1.0, 2.0}, 100.0).size() == 2);
    CHECK_THROWS_AS(filter_by_score({1.0}, 0.0), InvalidArgument);
}

TEST_CASE("discriminator cannot separate identical sets") {
    const Matrix cloud = gaussian_cloud(300, 4, 11);
    Rng rng(5);
    const DiscriminatorResult r = train_discriminator(cloud, cloud, rng);
    CHECK(r.heldout_accuracy == doctest::Approx(0.5).epsilon(0.1));
}

TEST_CASE("discriminator separates a shifted cloud") {
    const Matrix real = gaussian_cloud(300, 4, 12);
    const Matrix fake = gaussian_cloud(300, 4, 13, 5.0);
    Rng rng(6);
    const DiscriminatorResult r = train_discriminator(real, fake, rng);
    CHECK(r.heldout_accuracy > 0.95);
}

TEST_CASE("discriminator training is deterministic and shape-checked") {
    const Matrix real = gaussian_cloud(100, 3, 14);
    const Matrix fake = gaussian_cloud(100, 3, 15, 1.0);
    Rng rng_a(9), rng_b(9);
    const DiscriminatorResult a = train_discriminator(real, fake, rng_a);
    const DiscriminatorResult b = train_discriminator(real, fake, rng_b);
    CHECK(a.clf.params == b.clf.params);
    Rng rng_c(9);
    CHECK_THROWS_AS(train_discriminator(real, gaussian_cloud(10, 2, 1), rng_c), ShapeError);
}

TEST_CASE("bootstrap p is near uniform under the null") {
    const Matrix real = gaussian_cloud(200, 3, 21);
    const Matrix gen = gaussian_cloud(200, 3, 22, 1.0);
    Rng rng(7);
    const DiscriminatorResult d = train_discriminator(real, gen, rng);
    Rng boot(8);
    const double p = bootstrap_p(d.clf, real, gen, gen, 400, boot);
    CHECK(p > 0.2);
}

TEST_CASE("bootstrap rejects when filtering removes the off-manifold half") {
    const Matrix real = gaussian_cloud(200, 3, 31);
    Matrix unfiltered(200, 3);
    const Matrix on = gaussian_cloud(100, 3, 32);
    const Matrix off = gaussian_cloud(100, 3, 33, 6.0);
    std::copy(on.data.begin(), on.data.end(), unfiltered.data.begin());
    std::copy(off.data.begin(), off.data.end(), unfiltered.data.begin() + on.data.size());
    Rng rng(9);
    const DiscriminatorResult d = train_discriminator(real, unfiltered, rng);
    Rng boot(10);
    const double p = bootstrap_p(d.clf, real, on, unfiltered, 1000, boot);
    CHECK(p < 0.01);
    CHECK_THROWS_AS(bootstrap_p(d.clf, real, on, unfiltered, 50, boot), InvalidArgument);
}

TEST_CASE("bootstrap p is stable when B doubles") {
    const Matrix real = gaussian_cloud(150, 2, 41);
    Matrix unfiltered(150, 2);
    const Matrix on = gaussian_cloud(75, 2, 42);
    const Matrix off = gaussian_cloud(75, 2, 43, 2.0);
    std::copy(on.data.begin(), on.data.end(), unfiltered.data.begin());
    std::copy(off.data.begin(), off.data.end(), unfiltered.data.begin() + on.data.size());
    Rng rng(11);
    const DiscriminatorResult d = train_discriminator(real, unfiltered, rng);
    Rng boot_a(12), boot_b(12);
    const double p1 = bootstrap_p(d.clf, real, on, unfiltered, 500, boot_a);
    const double p2 = bootstrap_p(d.clf, real, on, unfiltered, 1000, boot_b);
    CHECK(std::abs(p1 - p2) < 0.02);
}

TEST_CASE("student t CDF against closed forms") {
    CHECK(student_t_cdf(0.0, 5.0) == doctest::Approx(0.5));
    CHECK(student_t_cdf(1.0, 1.0) == doctest::Approx(0.75).epsilon(1e-10));  // Cauchy
    // df = 2 closed form: 1/2 + t / (2 sqrt(2 + t^2)).
    CHECK(student_t_cdf(1.0, 2.0) ==
          doctest::Approx(0.5 + 1.0 / (2.0 * std::sqrt(3.0))).epsilon(1e-10));
    CHECK(student_t_cdf(1.96, 500.0) == doctest::Approx(0.975).epsilon(0.003));
    CHECK(student_t_cdf(-2.0, 7.0) ==
          doctest::Approx(1.0 - student_t_cdf(2.0, 7.0)).epsilon(1e-12));
}

TEST_CASE("cross-term study with zero draws is exactly zero") {
    const DenoiserModel m = tiny_model(51);
    const DiffusionSchedule s = cosine_schedule(8);
    const Dataset ds = gen_grid(2, 5);
    const PosteriorOperator post = full_posterior(m, s, ds);
    Rng rng(13);
    const CrossTermReport r = cross_term_study(m, post, s, 4, 8, {0.01}, rng, 0.0);
    for (double v : r.delta_u_pct) CHECK(v == 0.0);
    CHECK(r.mean == 0.0);
    CHECK(r.max_abs == 0.0);
    CHECK(r.df == 3.0);
}

TEST_CASE("cross-term study reports consistent statistics") {
    const DenoiserModel m = tiny_model(53);
    const DiffusionSchedule s = cosine_schedule(8);
    const Dataset ds = gen_grid(2, 6);
    const PosteriorOperator post = full_posterior(m, s, ds, 10.0);
    Rng rng_a(17), rng_b(17);
    const CrossTermReport a = cross_term_study(m, post, s, 6, 16, {0.005, 0.01}, rng_a);
    const CrossTermReport b = cross_term_study(m, post, s, 6, 16, {0.005, 0.01}, rng_b);
    CHECK(a.delta_u_pct == b.delta_u_pct);  // determinism
    CHECK(a.delta_u_pct.size() == 6);
    CHECK(a.df == 5.0);
    double mean = 0.0;
    for (double v : a.delta_u_pct) mean += v;
    mean /= 6.0;
    CHECK(a.mean == doctest::Approx(mean).epsilon(1e-12));
    CHECK(a.std_error == doctest::Approx(a.stddev / std::sqrt(6.0)).epsilon(1e-12));
    REQUIRE(a.tests.size() == 2);
    // Larger threshold means a smaller t statistic and a smaller lower-tail p.
    CHECK(a.tests[1].t_stat < a.tests[0].t_stat);
    CHECK(a.tests[1].p_value <= a.tests[0].p_value);
    CHECK(a.tests[0].p_value ==
          doctest::Approx(student_t_cdf(a.tests[0].t_stat, 5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(cross_term_study(m, post, s, 6, 4, {0.01}, rng_a), InvalidArgument);
}

TEST_CASE("sketch study recovers exactly at m = p") {
    Rng rng(19);
    std::mt19937_64 gen(19);
    const Matrix j_pop = random_matrix(16, 64, gen);
    const Matrix j_t = random_matrix(2, 64, gen);
    const SketchStudyReport r = sketch_convergence_study(j_pop, j_t, {64}, 3, rng);
    for (double e : r.trial_errors[0]) CHECK(e < 1e-10);
}

TEST_CASE("sketch study rejects a rank-deficient population Jacobian") {
    std::mt19937_64 gen(23);
    Matrix j_pop = random_matrix(4, 32, gen);
    for (std::size_t c = 0; c < 32; ++c) j_pop(3, c) = j_pop(2, c);
    const Matrix j_t = random_matrix(2, 32, gen);
    Rng rng(24);
    CHECK_THROWS_AS(sketch_convergence_study(j_pop, j_t, {8, 16}, 2, rng), RankDeficient);
}

TEST_CASE("coherent instances sketch worse than incoherent ones") {
    std::mt19937_64 gen(29);
    const std::size_t p = 256, nd = 32;
    Matrix j_pop = random_matrix(nd, p, gen);
    // Aligned target: a random combination of population rows.
    Matrix mix = random_matrix(2, nd, gen);
    const Matrix j_t = testutil::naive_matmul(mix, j_pop);

    Matrix j_pop_coherent = j_pop;
    for (std::size_t r = 0; r < nd; ++r) j_pop_coherent(r, 0) *= 100.0;
    Matrix j_t_coherent = testutil::naive_matmul(mix, j_pop_coherent);

    Rng rng_a(31), rng_b(31);
    const SketchStudyReport inc = sketch_convergence_study(j_pop, j_t, {48}, 25, rng_a);
    const SketchStudyReport coh =
        sketch_convergence_study(j_pop_coherent, j_t_coherent, {48}, 25, rng_b);
    CHECK(coh.mu > 0.9);
    CHECK(inc.mu < 0.5);
    CHECK(coh.mean_rel_error[0] > inc.mean_rel_error[0]);
    // The aligned construction has essentially everything in the rowspace.
    CHECK(inc.gamma > 1e3);
    CHECK_FALSE(inc.gamma_flagged);
}

TEST_CASE("sketch error on the benchmark instance decays with m") {
    const SketchInstance inst = sketch_instance(7);
    CHECK(inst.j_pop.rows == 128);
    CHECK(inst.j_pop.cols == 512);
    CHECK(inst.j_t.rows == 4);
    Rng rng = derived_rng(11, 0);
    const SketchStudyReport r = sketch_convergence_study(inst.j_pop, inst.j_t, {32, 64, 128, 256},
                                                         20, rng, inst.rel_tol);
    CHECK(r.mean_rel_error[1] < r.mean_rel_error[0]);
    CHECK(r.mean_rel_error[2] < r.mean_rel_error[1]);
    CHECK(r.mean_rel_error[3] < r.mean_rel_error[2]);
    CHECK(r.slope < -0.25);
    CHECK(r.slope > -1.0);
    CHECK(r.mu < 0.5);       // incoherent by construction
    CHECK(r.gamma > 1e3);    // target almost entirely in the rowspace
    CHECK_FALSE(r.gamma_flagged);

    // Full index set reproduces the population solve exactly.
    Rng frng = derived_rng(11, 1);
    const SketchStudyReport full =
        sketch_convergence_study(inst.j_pop, inst.j_t, {512}, 2, frng, inst.rel_tol);
    CHECK(full.mean_rel_error[0] < 1e-10);
}

TEST_CASE("lemma 1 dual-route agreement over random trials") {
    Rng rng(41);
    CHECK(lemma1_check(100, rng) < 1e-8);
    CHECK_THROWS_AS(lemma1_check(0, rng), InvalidArgument);
}

TEST_CASE("prop 1 is exact for the linear head") {
    const DenoiserModel m = tiny_model(43);
    const DiffusionSchedule s = cosine_schedule(8);
    const Dataset ds = gen_grid(2, 7);
    const GgnMatrix g = assemble_ggn(m, s, ds, m.last_layer_indices(), 32, 9);
    const PosteriorOperator post(PosteriorKind::LastLayer, g, 1e-2);
    const Vector x = {0.3, -0.7};
    Rng rng(44);
    const double err = prop1_mc_check(m, post, s, x, 5, 4096, 1.0, rng);
    CHECK(err < 0.05);
}

TEST_CASE("prop 1 holds approximately for the nonlinear model at small scale") {
    const DenoiserModel m = tiny_model(47);
    const DiffusionSchedule s = cosine_schedule(8);
    const Dataset ds = gen_grid(2, 8);
    const PosteriorOperator post = full_posterior(m, s, ds, 1.0);
    const Vector x = {0.5, 0.1};
    Rng rng(45);
    const double err = prop1_mc_check(m, post, s, x, 5, 4096, 1e-4, rng);
    CHECK(err < 0.10);
    CHECK_THROWS_AS(prop1_mc_check(m, post, s, x, 5, 1, 1.0, rng), InvalidArgument);
}

TEST_CASE("svg emitters produce well-formed documents") {
    const std::string line = svg_line_plot_loglog({{10, 100, 1000}}, {{0.1, 0.03, 0.01}},
                                                  {"series"}, "error vs m");
    CHECK(line.find("<svg") == 0);
    CHECK(line.find("</svg>") != std::string::npos);
    CHECK(line.find("polyline") != std::string::npos);
    const std::string scatter = svg_scatter({0, 1, 2}, {1, 0, 2}, {0.1, 0.5, 0.9}, "scores");
    CHECK(scatter.find("circle") != std::string::npos);
    CHECK_THROWS_AS(svg_scatter({0}, {1, 2}, {0.5}, "bad"), InvalidArgument);
}
