#pragma once

#include <functional>

#include "flare/linalg.hpp"

namespace flare {

// Per-step schedule coefficients, indexed t = 1..T (index 0 unused except
// bar_alpha[0] = 1, the convention that makes tilde_beta[1] = 0).
struct DiffusionSchedule {
    std::size_t total_steps = 0;
    Vector beta, alpha, bar_alpha, a, b, tilde_beta;

    std::uint64_t hash() const;
};

DiffusionSchedule cosine_schedule(std::size_t total_steps);

// x_t = sqrt(bar_alpha_t) x0 + sqrt(1 - bar_alpha_t) eps
Vector forward_noising(const DiffusionSchedule& s, const Vector& x0, std::size_t t,
                       const Vector& eps);

// Every non-parametric random input of one reverse trajectory, regenerable from
// its seed: x_T and eta_t for t = T..1 (eta_1 is identically zero).
struct NoiseRealization {
    std::uint64_t seed = 0;
    Vector x_init;                 // x_T
    std::vector<Vector> eta;       // eta[t] for t = 1..T (index 0 unused)
};

NoiseRealization make_noise_realization(const DiffusionSchedule& s, std::size_t dim,
                                        std::uint64_t seed);

using EpsFn = std::function<Vector(const Vector& x, std::size_t t)>;

// x_{t-1} = a_t x_t - b_t eps_hat + eta_t
Vector ddpm_step(const DiffusionSchedule& s, const Vector& x_t, std::size_t t,
                 const Vector& eps_hat, const Vector& eta_t);

// Deterministic DDIM step (eta = 0).
Vector ddim_step(const DiffusionSchedule& s, const Vector& x_t, std::size_t t,
                 const Vector& eps_hat);

enum class SamplerKind { Ddpm, Ddim, MeanPath };

// Full reverse path {x_T, ..., x_0}; trajectory[0] = x_T, trajectory[T] = x_0.
std::vector<Vector> sample_trajectory(const EpsFn& eps_fn, const DiffusionSchedule& s,
                                      SamplerKind kind, const NoiseRealization& noise);

}  // namespace flare
