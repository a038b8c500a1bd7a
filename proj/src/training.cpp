#include "flare/training.hpp"

#include <cmath>
#include <numbers>

namespace flare {

void adamw_step(Vector& params, const Vector& grad, AdamState& state, const TrainConfig& config,
                std::size_t step_index) {
    const std::size_t p = params.size();
    if (grad.size() != p || state.m.size() != p)
        throw ShapeError("adamw_step: parameter/gradient/state sizes differ");
    for (double g : grad)
        if (!std::isfinite(g)) {
            ++state.skipped;
            return;
        }
    double gnorm2 = 0.0;
    for (double g : grad) gnorm2 += g * g;
    const double gnorm = std::sqrt(gnorm2);
    const double clip_scale =
        (config.grad_clip > 0.0 && gnorm > config.grad_clip) ? config.grad_clip / gnorm : 1.0;

    const double progress =
        config.steps > 0
            ? static_cast<double>(step_index) / static_cast<double>(config.steps)
            : 0.0;
    const double lr = config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));

    const double t = static_cast<double>(step_index + 1);
    const double bc1 = 1.0 - std::pow(config.beta1, t);
    const double bc2 = 1.0 - std::pow(config.beta2, t);
    const double eps = 1e-8;
    for (std::size_t i = 0; i < p; ++i) {
        const double g = clip_scale * grad[i];
        state.m[i] = config.beta1 * state.m[i] + (1.0 - config.beta1) * g;
        state.v[i] = config.beta2 * state.v[i] + (1.0 - config.beta2) * g * g;
        const double m_hat = state.m[i] / bc1;
        const double v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (std::sqrt(v_hat) + eps) + config.weight_decay * params[i]);
    }
}

void ema_update(EmaState& ema, const Vector& params) {
    if (ema.shadow.size() != params.size())
        throw ShapeError("ema_update: shadow/parameter sizes differ");
    for (std::size_t i = 0; i < params.size(); ++i)
        ema.shadow[i] = ema.decay * ema.shadow[i] + (1.0 - ema.decay) * params[i];
}

TrainResult train(DenoiserModel model, const Dataset& dataset, const DiffusionSchedule& schedule,
                  const TrainConfig& config) {
    if (dataset.dim != model.config.data_dim)
        throw ShapeError("train: dataset dim does not match model");
    if (schedule.total_steps != model.config.total_steps)
        throw InvalidArgument("train: schedule does not match model step count");

    AdamState state(model.param_count());
    EmaState ema{model.params.values, config.ema_decay};
    Vector losses;
    losses.reserve(config.steps);

    Rng rng(config.seed);
    std::uniform_int_distribution<std::size_t> pick_sample(0, dataset.samples.rows - 1);
    std::uniform_int_distribution<std::size_t> pick_t(1, schedule.total_steps);
    std::normal_distribution<double> gauss(0.0, 1.0);

    const std::size_t d = dataset.dim;
    Batch batch;
    batch.x0 = Matrix(config.batch, d);
    batch.eps = Matrix(config.batch, d);
    batch.t.resize(config.batch);

    for (std::size_t step = 0; step < config.steps; ++step) {
        for (std::size_t r = 0; r < config.batch; ++r) {
            const std::size_t idx = pick_sample(rng);
            for (std::size_t j = 0; j < d; ++j) batch.x0(r, j) = dataset.samples(idx, j);
            batch.t[r] = pick_t(rng);
            for (std::size_t j = 0; j < d; ++j) batch.eps(r, j) = gauss(rng);
        }
        const LossGrad lg = loss_and_grad(model, schedule, batch, config.log_snr_weight);
        losses.push_back(lg.loss);
        adamw_step(model.params.values, lg.grad, state, config, step);
        ema_update(ema, model.params.values);
    }

    TrainResult out{model, model, std::move(losses), state.skipped};
    out.ema_model.params.values = ema.shadow;
    return out;
}

double eval_eps_mse(const DenoiserModel& model, const Dataset& dataset,
                    const DiffusionSchedule& schedule, std::size_t n_pairs, std::uint64_t seed) {
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_sample(0, dataset.samples.rows - 1);
    std::uniform_int_distribution<std::size_t> pick_t(1, schedule.total_steps);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const std::size_t d = dataset.dim;
    Matrix x(n_pairs, d), eps(n_pairs, d);
    std::vector<std::size_t> ts(n_pairs);
    for (std::size_t r = 0; r < n_pairs; ++r) {
        const std::size_t idx = pick_sample(rng);
        ts[r] = pick_t(rng);
        const double ab = schedule.bar_alpha[ts[r]];
        for (std::size_t j = 0; j < d; ++j) {
            eps(r, j) = gauss(rng);
            x(r, j) = std::sqrt(ab) * dataset.samples(idx, j) + std::sqrt(1.0 - ab) * eps(r, j);
        }
    }
    const Matrix pred = model.forward_batch(x, ts);
    double acc = 0.0;
    for (std::size_t i = 0; i < pred.data.size(); ++i) {
        const double r = pred.data[i] - eps.data[i];
        acc += r * r;
    }
    return acc / (static_cast<double>(n_pairs) * static_cast<double>(d));
}

}  // namespace flare
