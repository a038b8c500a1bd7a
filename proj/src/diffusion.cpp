#include "flare/diffusion.hpp"

#include <cmath>
#include <cstring>
#include <numbers>

namespace flare {

std::uint64_t DiffusionSchedule::hash() const {
    // FNV-1a over the raw coefficient bytes.
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const Vector& v) {
        for (double x : v) {
            std::uint64_t bits;
            std::memcpy(&bits, &x, sizeof(bits));
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 1099511628211ull;
            }
        }
    };
    mix(beta);
    mix(bar_alpha);
    return h;
}

DiffusionSchedule cosine_schedule(std::size_t total_steps) {
    if (total_steps < 2) throw InvalidArgument("cosine_schedule: need T >= 2");
    const double s = 0.008;
    const double tf = static_cast<double>(total_steps);
    auto f = [&](double t) {
        const double arg = ((t / tf) + s) / (1.0 + s) * (std::numbers::pi / 2.0);
        const double c = std::cos(arg);
        return c * c;
    };
    DiffusionSchedule sch;
    sch.total_steps = total_steps;
    const std::size_t n = total_steps + 1;
    sch.beta.assign(n, 0.0);
    sch.alpha.assign(n, 0.0);
    sch.bar_alpha.assign(n, 0.0);
    sch.a.assign(n, 0.0);
    sch.b.assign(n, 0.0);
    sch.tilde_beta.assign(n, 0.0);
    sch.bar_alpha[0] = 1.0;
    const double f0 = f(0.0);
    double prev = 1.0;
    for (std::size_t t = 1; t <= total_steps; ++t) {
        const double target = f(static_cast<double>(t)) / f0;
        double beta_t = 1.0 - target / prev;
        beta_t = std::clamp(beta_t, 1e-8, 0.999);
        sch.beta[t] = beta_t;
        sch.alpha[t] = 1.0 - beta_t;
        // bar_alpha rebuilt as the cumulative product so the identities stay exact
        // after clipping.
        sch.bar_alpha[t] = sch.bar_alpha[t - 1] * sch.alpha[t];
        prev = sch.bar_alpha[t];
        sch.a[t] = 1.0 / std::sqrt(sch.alpha[t]);
        sch.b[t] = beta_t / (std::sqrt(sch.alpha[t]) * std::sqrt(1.0 - sch.bar_alpha[t]));
        sch.tilde_beta[t] =
            (1.0 - sch.bar_alpha[t - 1]) / (1.0 - sch.bar_alpha[t]) * beta_t;
    }
    return sch;
}

Vector forward_noising(const DiffusionSchedule& s, const Vector& x0, std::size_t t,
                       const Vector& eps) {
    if (eps.size() != x0.size()) throw ShapeError("forward_noising: eps/x0 size mismatch");
    const double ab = t == 0 ? 1.0 : s.bar_alpha[t];
    const double c0 = std::sqrt(ab);
    const double c1 = std::sqrt(1.0 - ab);
    Vector out(x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) out[i] = c0 * x0[i] + c1 * eps[i];
    return out;
}

NoiseRealization make_noise_realization(const DiffusionSchedule& s, std::size_t dim,
                                        std::uint64_t seed) {
    NoiseRealization nr;
    nr.seed = seed;
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    nr.x_init.resize(dim);
    for (double& v : nr.x_init) v = gauss(rng);
    nr.eta.assign(s.total_steps + 1, Vector());
    for (std::size_t t = s.total_steps; t >= 1; --t) {
        nr.eta[t].assign(dim, 0.0);
        const double sd = std::sqrt(s.tilde_beta[t]);
        if (sd > 0.0)
            for (double& v : nr.eta[t]) v = sd * gauss(rng);
    }
    return nr;
}

Vector ddpm_step(const DiffusionSchedule& s, const Vector& x_t, std::size_t t,
                 const Vector& eps_hat, const Vector& eta_t) {
    Vector out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i)
        out[i] = s.a[t] * x_t[i] - s.b[t] * eps_hat[i] + eta_t[i];
    return out;
}

Vector ddim_step(const DiffusionSchedule& s, const Vector& x_t, std::size_t t,
                 const Vector& eps_hat) {
    const double ab_t = s.bar_alpha[t];
    const double ab_prev = s.bar_alpha[t - 1];
    const double inv_sqrt_ab = 1.0 / std::sqrt(ab_t);
    const double sq_one_minus = std::sqrt(1.0 - ab_t);
    Vector out(x_t.size());
    for (std::size_t i = 0; i < x_t.size(); ++i) {
        const double x0_hat = (x_t[i] - sq_one_minus * eps_hat[i]) * inv_sqrt_ab;
        out[i] = std::sqrt(ab_prev) * x0_hat + std::sqrt(1.0 - ab_prev) * eps_hat[i];
    }
    return out;
}

std::vector<Vector> sample_trajectory(const EpsFn& eps_fn, const DiffusionSchedule& s,
                                      SamplerKind kind, const NoiseRealization& noise) {
    if (noise.eta.size() != s.total_steps + 1)
        throw ShapeError("sample_trajectory: noise realization does not match schedule");
    std::vector<Vector> traj;
    traj.reserve(s.total_steps + 1);
    Vector x = noise.x_init;
    traj.push_back(x);
    static const Vector kEmpty;
    for (std::size_t t = s.total_steps; t >= 1; --t) {
        const Vector eps_hat = eps_fn(x, t);
        switch (kind) {
            case SamplerKind::Ddpm:
                x = ddpm_step(s, x, t, eps_hat, noise.eta[t]);
                break;
            case SamplerKind::MeanPath: {
                Vector zero(x.size(), 0.0);
                x = ddpm_step(s, x, t, eps_hat, zero);
                break;
            }
            case SamplerKind::Ddim:
                x = ddim_step(s, x, t, eps_hat);
                break;
        }
        for (double v : x)
            if (!std::isfinite(v)) throw NumericalBreakdown("sample_trajectory: non-finite state");
        traj.push_back(x);
    }
    return traj;
}

}  // namespace flare
