#pragma once

#include "flare/diffusion.hpp"
#include "flare/laplace.hpp"

namespace flare {

enum class EstimatorKind { Flare, LastLayer, FullFisher, PredictiveVariance };

const char* estimator_name(EstimatorKind kind);
EstimatorKind estimator_from_posterior(const PosteriorOperator& op);

struct EpistemicTrajectory {
    std::vector<Vector> states;  // x_T .. x_0
    Matrix sigma_ep0;            // d x d epistemic covariance at t = 0
    Vector trace_contrib;        // indexed 1..T: per-step contribution to tr(sigma_ep0),
                                 // discount to t = 0 already applied
    double trace_ep0 = 0.0;
    double aleatoric_total = 0.0;  // discounted sum of tilde_beta * d; zero under DDIM
    EstimatorKind estimator = EstimatorKind::Flare;
    std::uint64_t noise_seed = 0;
};

struct UncertaintyScore {
    std::size_t sample_id = 0;
    double score = 0.0;  // tr(sigma_ep0) / d
    double raw_trace = 0.0;
};

// b^2 J Sigma J^T through the posterior operator.
Matrix one_step_projection(const Matrix& j_cols, const PosteriorOperator& posterior, double b_t);

// a_t^2 sigma_prev + delta, re-symmetrized.
Matrix propagate(const Matrix& sigma_prev, double a_t, const Matrix& delta);

// Closed-form sum over steps s = 1..jacobians.size() of
// (prod_{j<s} a_j)^2 b_s^2 J_s Sigma J_s^T; oracle for the recursion.
Matrix unrolled_accumulation(const DiffusionSchedule& schedule,
                             const std::vector<Matrix>& jacobians,
                             const PosteriorOperator& posterior);

// Reverse sampling with the epistemic recursion accumulated along the realized
// path. Scoring-time samplers: Ddpm injects noise.eta; MeanPath and Ddim both
// follow the noiseless mean update, differing only in whether the aleatoric
// budget is accounted (Ddim reports zero).
struct SampleScore {
    Vector x0;
    EpistemicTrajectory traj;
};

SampleScore flare_sample(const DenoiserModel& model, const DiffusionSchedule& schedule,
                         const PosteriorOperator& posterior, SamplerKind sampler,
                         const NoiseRealization& noise);

// Matrix-free trace of sigma_ep0: per step solve (H + lambda I) z = g_{t,k} by
// CG and accumulate b_t^2 sum_k g^T z with the a^2 discount.
struct StreamingTraceResult {
    Vector x0;
    Vector trace_series;  // discounted contribution per step, indexed 1..T
    double trace_total = 0.0;
};

StreamingTraceResult streaming_trace(const DenoiserModel& model, const DiffusionSchedule& schedule,
                                     const PosteriorOperator& posterior, SamplerKind sampler,
                                     const NoiseRealization& noise);

SampleScore llla_rollout(const DenoiserModel& model, const DiffusionSchedule& schedule,
                         const PosteriorOperator& last_layer_posterior,
                         const NoiseRealization& noise);

// Diagonal total-variance recursion over S last-layer posterior draws:
// Var_{t-1} = a^2 Var_t + b^2 Var(eps) - 2ab Cov(x_t, eps_t) + tilde_beta.
struct PredictiveVarianceResult {
    Vector x0;
    Vector var0;          // per-dimension total variance at t = 0
    double score = 0.0;   // mean of var0
};

PredictiveVarianceResult predictive_variance_rollout(const DenoiserModel& model,
                                                     const DiffusionSchedule& schedule,
                                                     const PosteriorOperator& last_layer_posterior,
                                                     std::size_t s_draws,
                                                     const NoiseRealization& noise, Rng& rng);

// Fig. 5 style sweep: one FLARE posterior per keep fraction, shared noise
// realizations across fractions.
struct KeepFractionRow {
    double fraction = 0.0;
    std::size_t m = 0;
    double mean_trace = 0.0;  // mean over samples of tr(sigma_ep0) / d
};

std::vector<KeepFractionRow> keep_fraction_sweep(const DenoiserModel& model,
                                                 const DiffusionSchedule& schedule,
                                                 const Dataset& dataset,
                                                 const std::vector<double>& fractions,
                                                 std::size_t n_samples, std::size_t ggn_pairs,
                                                 double lambda, std::uint64_t seed);

}  // namespace flare
