#pragma once

#include <map>
#include <string>

#include "flare/linalg.hpp"

namespace flare {

// Seeded synthetic benchmark with its generator configuration recorded so
// tests can reconstruct the noiseless signal sample-by-sample.
struct Dataset {
    std::string name;
    std::size_t dim = 0;
    Matrix samples;                              // n x dim
    std::map<std::string, double> config;        // scalar generator settings + seed
    Matrix signal_params;                        // per-sample latent parameters (may be 0 x 0)
};

struct GridConfig {
    double sigma = 0.05;  // per-mode standard deviation
};

struct BimodalSineConfig {
    double noise_sigma = 0.1;
    std::size_t length = 10;
};

struct ChirpConfig {
    double amp_lo = 0.6, amp_hi = 1.4;
    double f0_lo = 0.5, f0_hi = 1.0;
    double k_lo = 2.0, k_hi = 5.0;
    double noise_sigma = 0.02;
    std::size_t length = 80;
};

struct DampedSineConfig {
    double amp_lo = 0.6, amp_hi = 1.4;
    double f_lo = 1.0, f_hi = 2.0;
    double decay_lo = 0.5, decay_hi = 2.0;
    double noise_sigma = 0.02;
    std::size_t length = 40;
};

// 3x3 Gaussian mixture on {-1,0,1}^2; round-robin mode assignment.
Dataset gen_grid(std::size_t n_per_mode, std::uint64_t seed, const GridConfig& cfg = {});

// Balanced mixture of +-sin(2 pi tau) on an endpoint-inclusive grid, length 10.
Dataset gen_bimodal_sine(std::size_t n, std::uint64_t seed, const BimodalSineConfig& cfg = {});

// Chirps A sin(2 pi (f0 tau + k tau^2 / 2)), length 80; (A, f0, k) kept per sample.
Dataset gen_chirp(std::size_t n, std::uint64_t seed, const ChirpConfig& cfg = {});

// Damped sinusoids A e^{-d tau} sin(2 pi f tau + phi), length 40; params kept per sample.
Dataset gen_damped_sine(std::size_t n, std::uint64_t seed, const DampedSineConfig& cfg = {});

Dataset generate_dataset(const std::string& name, std::size_t n, std::uint64_t seed);

// Grid position t/(L-1) on [0,1].
inline double grid_tau(std::size_t t, std::size_t length) {
    return length > 1 ? static_cast<double>(t) / static_cast<double>(length - 1) : 0.0;
}

}  // namespace flare
