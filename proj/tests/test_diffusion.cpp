#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flare/diffusion.hpp"

using namespace flare;

TEST_CASE("cosine schedule bar_alpha is strictly decreasing") {
    for (std::size_t t_total : {2ul, 10ul, 600ul, 800ul}) {
        const DiffusionSchedule s = cosine_schedule(t_total);
        CHECK(s.bar_alpha[t_total] < s.bar_alpha[1]);
        for (std::size_t t = 1; t <= t_total; ++t) {
            CHECK(s.bar_alpha[t] < s.bar_alpha[t - 1]);
            CHECK(s.bar_alpha[t] > 0.0);
        }
    }
}

TEST_CASE("cosine schedule a_t = 1/sqrt(1 - beta_t) exactly") {
    const DiffusionSchedule s = cosine_schedule(100);
    for (std::size_t t = 1; t <= 100; ++t)
        CHECK(s.a[t] == 1.0 / std::sqrt(1.0 - s.beta[t]));
}

TEST_CASE("cosine schedule at T = 600 stays in range and tilde_beta_1 = 0") {
    const DiffusionSchedule s = cosine_schedule(600);
    for (std::size_t t = 1; t <= 600; ++t) {
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] <= 0.999);
        CHECK(s.tilde_beta[t] >= 0.0);
        CHECK(s.a[t] >= 1.0);
        CHECK(s.b[t] > 0.0);
    }
    CHECK(s.tilde_beta[1] == 0.0);
}

TEST_CASE("schedule identities hold exactly") {
    const DiffusionSchedule s = cosine_schedule(250);
    for (std::size_t t = 1; t <= 250; ++t) {
        CHECK(s.alpha[t] == 1.0 - s.beta[t]);
        CHECK(s.bar_alpha[t] == s.bar_alpha[t - 1] * s.alpha[t]);
        CHECK(s.b[t] ==
              doctest::Approx(s.beta[t] / (std::sqrt(s.alpha[t]) * std::sqrt(1.0 - s.bar_alpha[t])))
                  .epsilon(1e-15));
        CHECK(s.tilde_beta[t] ==
              doctest::Approx((1.0 - s.bar_alpha[t - 1]) / (1.0 - s.bar_alpha[t]) * s.beta[t])
                  .epsilon(1e-15));
    }
}

TEST_CASE("schedule hash distinguishes different schedules") {
    CHECK(cosine_schedule(100).hash() == cosine_schedule(100).hash());
    CHECK(cosine_schedule(100).hash() != cosine_schedule(101).hash());
}

TEST_CASE("forward_noising limits") {
    const DiffusionSchedule s = cosine_schedule(50);
    const Vector x0 = {1.5, -2.0};
    const Vector eps = {0.3, 0.7};
    const Vector at0 = forward_noising(s, x0, 0, eps);
    CHECK(at0 == x0);
    const Vector from_zero = forward_noising(s, {0.0, 0.0}, 20, eps);
    const double c1 = std::sqrt(1.0 - s.bar_alpha[20]);
    CHECK(from_zero[0] == c1 * eps[0]);
    CHECK(from_zero[1] == c1 * eps[1]);
}

TEST_CASE("forward_noising hand-evaluated value") {
    // bar_alpha = 0.25, x0 = 2, eps = 0: sqrt(0.25) * 2 = 1.
    DiffusionSchedule s;
    s.total_steps = 1;
    s.bar_alpha = {1.0, 0.25};
    const Vector out = forward_noising(s, {2.0}, 1, {0.0});
    CHECK(out[0] == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("ddpm_step with zero prediction scales by a_t") {
    DiffusionSchedule s;
    s.total_steps = 1;
    s.a = {0.0, 1.7};
    s.b = {0.0, 0.9};
    const Vector out = ddpm_step(s, {2.0, -1.0}, 1, {0.0, 0.0}, {0.0, 0.0});
    CHECK(out[0] == doctest::Approx(3.4).epsilon(1e-15));
    CHECK(out[1] == doctest::Approx(-1.7).epsilon(1e-15));
}

TEST_CASE("ddpm_step hand evaluation") {
    DiffusionSchedule s;
    s.total_steps = 1;
    s.a = {0.0, 2.0};
    s.b = {0.0, 1.0};
    const Vector out = ddpm_step(s, {1.0}, 1, {0.5}, {0.0});
    CHECK(out[0] == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("ddim_step with zero prediction is geometric scaling") {
    const DiffusionSchedule s = cosine_schedule(40);
    const std::size_t t = 17;
    const Vector out = ddim_step(s, {3.0}, t, {0.0});
    CHECK(out[0] == doctest::Approx(std::sqrt(s.bar_alpha[t - 1] / s.bar_alpha[t]) * 3.0)
                        .epsilon(1e-14));
}

TEST_CASE("ddim_step with equal bar_alpha is a no-op") {
    DiffusionSchedule s;
    s.total_steps = 1;
    s.bar_alpha = {0.4, 0.4};
    const Vector out = ddim_step(s, {1.25}, 1, {0.5});
    CHECK(out[0] == doctest::Approx(1.25).epsilon(1e-14));
}

TEST_CASE("ddim_step hand-evaluated value") {
    DiffusionSchedule s;
    s.total_steps = 1;
    s.bar_alpha = {0.64, 0.25};
    const double x0_hat = (1.0 - 0.5 * std::sqrt(0.75)) / 0.5;
    const double expected = 0.8 * x0_hat + std::sqrt(0.36) * 0.5;
    const Vector out = ddim_step(s, {1.0}, 1, {0.5});
    CHECK(out[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("noise realization is reproducible and eta_1 is zero") {
    const DiffusionSchedule s = cosine_schedule(30);
    const NoiseRealization a = make_noise_realization(s, 4, 99);
    const NoiseRealization b = make_noise_realization(s, 4, 99);
    CHECK(a.x_init == b.x_init);
    for (std::size_t t = 1; t <= 30; ++t) CHECK(a.eta[t] == b.eta[t]);
    for (double v : a.eta[1]) CHECK(v == 0.0);
}

TEST_CASE("ddim trajectory with zero model is closed-form scaling of x_T") {
    const DiffusionSchedule s = cosine_schedule(25);
    const NoiseRealization noise = make_noise_realization(s, 3, 5);
    const EpsFn zero_model = [](const Vector& x, std::size_t) { return Vector(x.size(), 0.0); };
    const auto traj = sample_trajectory(zero_model, s, SamplerKind::Ddim, noise);
    REQUIRE(traj.size() == 26);
    const double scale = std::sqrt(s.bar_alpha[0] / s.bar_alpha[25]);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(traj.back()[i] == doctest::Approx(scale * noise.x_init[i]).epsilon(1e-10));
}

TEST_CASE("ddpm trajectory is bit-reproducible with a shared noise realization") {
    const DiffusionSchedule s = cosine_schedule(16);
    const NoiseRealization noise = make_noise_realization(s, 2, 8);
    const EpsFn model = [](const Vector& x, std::size_t t) {
        Vector out(x.size());
        for (std::size_t i = 0; i < x.size(); ++i)
            out[i] = 0.1 * x[i] + 0.01 * static_cast<double>(t);
        return out;
    };
    const auto a = sample_trajectory(model, s, SamplerKind::Ddpm, noise);
    const auto b = sample_trajectory(model, s, SamplerKind::Ddpm, noise);
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("oracle denoiser DDIM recovers x0") {
    const DiffusionSchedule s = cosine_schedule(64);
    const Vector x0 = {0.8, -0.3, 0.5};
    Rng rng(3);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector eps(3);
    for (double& v : eps) v = gauss(rng);
    NoiseRealization noise;
    noise.x_init = forward_noising(s, x0, 64, eps);
    noise.eta.assign(65, Vector(3, 0.0));
    const EpsFn oracle = [&](const Vector& x, std::size_t t) {
        Vector out(3);
        const double c0 = std::sqrt(s.bar_alpha[t]);
        const double c1 = std::sqrt(1.0 - s.bar_alpha[t]);
        for (std::size_t i = 0; i < 3; ++i) out[i] = (x[i] - c0 * x0[i]) / c1;
        return out;
    };
    const auto traj = sample_trajectory(oracle, s, SamplerKind::Ddim, noise);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(traj.back()[i] == doctest::Approx(x0[i]).epsilon(1e-8));
}

TEST_CASE("non-finite states raise NumericalBreakdown") {
    const DiffusionSchedule s = cosine_schedule(8);
    const NoiseRealization noise = make_noise_realization(s, 1, 2);
    const EpsFn bad = [](const Vector& x, std::size_t) {
        return Vector(x.size(), 1e308);
    };
    CHECK_THROWS_AS(sample_trajectory(bad, s, SamplerKind::Ddpm, noise), NumericalBreakdown);
}
