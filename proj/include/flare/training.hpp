#pragma once

#include "flare/datasets.hpp"
#include "flare/denoiser.hpp"

namespace flare {

struct TrainConfig {
    double lr = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    std::size_t batch = 512;
    std::size_t steps = 20000;
    double grad_clip = 1.0;
    double ema_decay = 0.999;
    bool log_snr_weight = false;
    std::uint64_t seed = 0;
};

struct AdamState {
    Vector m, v;
    std::size_t skipped = 0;

    explicit AdamState(std::size_t p) : m(p, 0.0), v(p, 0.0) {}
};

struct EmaState {
    Vector shadow;
    double decay = 0.999;
};

// One AdamW update with bias correction, decoupled weight decay, cosine decay of
// the learning rate from config.lr to 0 over config.steps, and global-norm
// clipping applied to the gradient first. step_index is 0-based.
void adamw_step(Vector& params, const Vector& grad, AdamState& state, const TrainConfig& config,
                std::size_t step_index);

void ema_update(EmaState& ema, const Vector& params);

struct TrainResult {
    DenoiserModel model;      // raw final parameters
    DenoiserModel ema_model;  // EMA parameters, the evaluation point
    Vector loss_history;      // one entry per step
    std::size_t skipped_steps = 0;
};

TrainResult train(DenoiserModel model, const Dataset& dataset, const DiffusionSchedule& schedule,
                  const TrainConfig& config);

// Mean eps-prediction MSE over freshly noised pairs, for post-training checks.
double eval_eps_mse(const DenoiserModel& model, const Dataset& dataset,
                    const DiffusionSchedule& schedule, std::size_t n_pairs, std::uint64_t seed);

}  // namespace flare
