#pragma once

#include <span>
#include <string>
#include <vector>

#include "flare/diffusion.hpp"
#include "flare/linalg.hpp"

namespace flare {

struct LayoutEntry {
    std::string name;
    std::size_t offset = 0;
    std::size_t length = 0;
};

// Flat 64-bit parameter store with a named layout; the final head is always
// the last entry.
struct ParamVector {
    Vector values;
    std::vector<LayoutEntry> layout;

    std::size_t size() const { return values.size(); }
    const LayoutEntry& entry(const std::string& name) const;
    std::span<double> span_of(const std::string& name);
    std::span<const double> span_of(const std::string& name) const;
};

struct ModelConfig {
    std::size_t data_dim = 0;
    std::size_t hidden = 32;
    std::size_t n_blocks = 2;
    std::size_t time_embed_dim = 32;
    std::size_t total_steps = 0;

    bool operator==(const ModelConfig&) const = default;
};

ModelConfig preset_model_config(const std::string& dataset_name);

struct Batch {
    Matrix x0;                   // B x d
    std::vector<std::size_t> t;  // B entries in [1, T]
    Matrix eps;                  // B x d
};

struct LossGrad {
    double loss = 0.0;
    Vector grad;
};

// Epsilon-prediction network: sinusoidal time embedding, linear input lift,
// FiLM-residual blocks (two linears with SiLU, per-block scale/shift from the
// time embedding), final linear head.
class DenoiserModel {
public:
    explicit DenoiserModel(ModelConfig cfg);

    void init_params(std::uint64_t seed);

    Vector forward(const Vector& x, std::size_t t) const;
    // Rows are independent samples; t may differ per row.
    Matrix forward_batch(const Matrix& x, std::span<const std::size_t> t) const;

    // Row k = gradient of output coordinate k w.r.t. all parameters.
    Matrix param_jacobian(const Vector& x, std::size_t t) const;
    Matrix param_jacobian_columns(const Vector& x, std::size_t t, const IndexSet& set) const;

    IndexSet last_layer_indices() const;
    std::size_t param_count() const { return params.size(); }
    std::size_t last_layer_count() const {
        return config.hidden * config.data_dim + config.data_dim;
    }

    Matrix time_embedding(std::span<const std::size_t> t) const;

    ModelConfig config;
    ParamVector params;
};

// Mean over the batch of w(t) ||eps_theta(x_t, t) - eps||^2 / d with
// x_t = sqrt(bar_alpha) x0 + sqrt(1 - bar_alpha) eps, plus its exact gradient.
LossGrad loss_and_grad(const DenoiserModel& model, const DiffusionSchedule& schedule,
                       const Batch& batch, bool log_snr_weight = false);

}  // namespace flare
