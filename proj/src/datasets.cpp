#include "flare/datasets.hpp"

#include <cmath>
#include <numbers>

namespace flare {

namespace {
constexpr double kTwoPi = 2.0 * std::numbers::pi;
}

Dataset gen_grid(std::size_t n_per_mode, std::uint64_t seed, const GridConfig& cfg) {
    if (n_per_mode < 1) throw InvalidArgument("gen_grid: n_per_mode must be >= 1");
    const double centers[3] = {-1.0, 0.0, 1.0};
    const std::size_t n = 9 * n_per_mode;
    Dataset ds;
    ds.name = "grid";
    ds.dim = 2;
    ds.samples = Matrix(n, 2);
    ds.signal_params = Matrix(n, 2);  // mode center per sample
    ds.config = {{"sigma", cfg.sigma}, {"seed", static_cast<double>(seed)}};
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t mode = i % 9;
        const double cx = centers[mode % 3];
        const double cy = centers[mode / 3];
        ds.samples(i, 0) = cx + cfg.sigma * gauss(rng);
        ds.samples(i, 1) = cy + cfg.sigma * gauss(rng);
        ds.signal_params(i, 0) = cx;
        ds.signal_params(i, 1) = cy;
    }
    return ds;
}

Dataset gen_bimodal_sine(std::size_t n, std::uint64_t seed, const BimodalSineConfig& cfg) {
    if (n < 2) throw InvalidArgument("gen_bimodal_sine: n must be >= 2");
    const std::size_t l = cfg.length;
    Dataset ds;
    ds.name = "sine";
    ds.dim = l;
    ds.samples = Matrix(n, l);
    ds.signal_params = Matrix(n, 1);  // branch sign
    ds.config = {{"noise_sigma", cfg.noise_sigma}, {"seed", static_cast<double>(seed)}};
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) {
        const double sign = coin(rng) ? 1.0 : -1.0;
        ds.signal_params(i, 0) = sign;
        for (std::size_t t = 0; t < l; ++t) {
            const double tau = grid_tau(t, l);
            ds.samples(i, t) = sign * std::sin(kTwoPi * tau) + cfg.noise_sigma * gauss(rng);
        }
    }
    return ds;
}

Dataset gen_chirp(std::size_t n, std::uint64_t seed, const ChirpConfig& cfg) {
    if (n < 1) throw InvalidArgument("gen_chirp: n must be >= 1");
    const std::size_t l = cfg.length;
    Dataset ds;
    ds.name = "chirp";
    ds.dim = l;
    ds.samples = Matrix(n, l);
    ds.signal_params = Matrix(n, 3);  // A, f0, k
    ds.config = {{"noise_sigma", cfg.noise_sigma}, {"seed", static_cast<double>(seed)}};
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u_amp(cfg.amp_lo, cfg.amp_hi);
    std::uniform_real_distribution<double> u_f0(cfg.f0_lo, cfg.f0_hi);
    std::uniform_real_distribution<double> u_k(cfg.k_lo, cfg.k_hi);
    for (std::size_t i = 0; i < n; ++i) {
        const double amp = u_amp(rng), f0 = u_f0(rng), k = u_k(rng);
        ds.signal_params(i, 0) = amp;
        ds.signal_params(i, 1) = f0;
        ds.signal_params(i, 2) = k;
        for (std::size_t t = 0; t < l; ++t) {
            const double tau = grid_tau(t, l);
            ds.samples(i, t) = amp * std::sin(kTwoPi * (f0 * tau + 0.5 * k * tau * tau)) +
                               cfg.noise_sigma * gauss(rng);
        }
    }
    return ds;
}

Dataset gen_damped_sine(std::size_t n, std::uint64_t seed, const DampedSineConfig& cfg) {
    if (n < 1) throw InvalidArgument("gen_damped_sine: n must be >= 1");
    const std::size_t l = cfg.length;
    Dataset ds;
    ds.name = "damped";
    ds.dim = l;
    ds.samples = Matrix(n, l);
    ds.signal_params = Matrix(n, 4);  // A, f, d, phi
    ds.config = {{"noise_sigma", cfg.noise_sigma}, {"seed", static_cast<double>(seed)}};
    Rng rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> u_amp(cfg.amp_lo, cfg.amp_hi);
    std::uniform_real_distribution<double> u_f(cfg.f_lo, cfg.f_hi);
    std::uniform_real_distribution<double> u_d(cfg.decay_lo, cfg.decay_hi);
    std::uniform_real_distribution<double> u_phi(0.0, kTwoPi);
    for (std::size_t i = 0; i < n; ++i) {
        const double amp = u_amp(rng), f = u_f(rng), d = u_d(rng), phi = u_phi(rng);
        ds.signal_params(i, 0) = amp;
        ds.signal_params(i, 1) = f;
        ds.signal_params(i, 2) = d;
        ds.signal_params(i, 3) = phi;
        for (std::size_t t = 0; t < l; ++t) {
            const double tau = grid_tau(t, l);
            ds.samples(i, t) = amp * std::exp(-d * tau) * std::sin(kTwoPi * f * tau + phi) +
                               cfg.noise_sigma * gauss(rng);
        }
    }
    return ds;
}

Dataset generate_dataset(const std::string& name, std::size_t n, std::uint64_t seed) {
    if (name == "grid") return gen_grid(n, seed);
    if (name == "sine") return gen_bimodal_sine(n, seed);
    if (name == "chirp") return gen_chirp(n, seed);
    if (name == "damped") return gen_damped_sine(n, seed);
    throw InvalidArgument("unknown dataset: " + name);
}

}  // namespace flare
