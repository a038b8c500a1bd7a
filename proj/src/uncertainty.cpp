#include "flare/uncertainty.hpp"

#include <cmath>

namespace flare {

const char* estimator_name(EstimatorKind kind) {
    switch (kind) {
        case EstimatorKind::Flare: return "flare";
        case EstimatorKind::LastLayer: return "llla";
        case EstimatorKind::FullFisher: return "full_fisher";
        case EstimatorKind::PredictiveVariance: return "bayesdiff_style";
    }
    return "unknown";
}

EstimatorKind estimator_from_posterior(const PosteriorOperator& op) {
    switch (op.kind()) {
        case PosteriorKind::Subnet: return EstimatorKind::Flare;
        case PosteriorKind::LastLayer: return EstimatorKind::LastLayer;
        case PosteriorKind::FullDense: return EstimatorKind::FullFisher;
    }
    return EstimatorKind::Flare;
}

Matrix one_step_projection(const Matrix& j_cols, const PosteriorOperator& posterior, double b_t) {
    if (j_cols.cols != posterior.dim())
        throw ShapeError("one_step_projection: Jacobian columns do not match posterior dim");
    const std::size_t d = j_cols.rows, m = j_cols.cols;
    Matrix sig_jt(m, d);
    if (m <= PosteriorOperator::kDenseLimit) {
        gemm_acc(sig_jt, posterior.dense(), j_cols, false, true, 1.0, 0.0);
    } else {
        Vector col(m);
        for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t j = 0; j < m; ++j) col[j] = j_cols(k, j);
            const Vector z = posterior.apply(col);
            for (std::size_t j = 0; j < m; ++j) sig_jt(j, k) = z[j];
        }
    }
    Matrix out(d, d);
    gemm_acc(out, j_cols, sig_jt, false, false, b_t * b_t, 0.0);
    symmetrize(out);
    return out;
}

Matrix propagate(const Matrix& sigma_prev, double a_t, const Matrix& delta) {
    if (sigma_prev.rows != delta.rows || sigma_prev.cols != delta.cols)
        throw ShapeError("propagate: shape mismatch");
    Matrix out = sigma_prev;
    const double a2 = a_t * a_t;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        out.data[i] = a2 * out.data[i] + delta.data[i];
    symmetrize(out);
    return out;
}

Matrix unrolled_accumulation(const DiffusionSchedule& schedule,
                             const std::vector<Matrix>& jacobians,
                             const PosteriorOperator& posterior) {
    if (jacobians.empty()) throw InvalidArgument("unrolled_accumulation: no Jacobians");
    const std::size_t d = jacobians.front().rows;
    Matrix out(d, d);
    double discount = 1.0;  // (prod_{j<s} a_j)^2, s ascending
    for (std::size_t s = 1; s <= jacobians.size(); ++s) {
        const Matrix delta = one_step_projection(jacobians[s - 1], posterior, schedule.b[s]);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            out.data[i] += discount * delta.data[i];
        discount *= schedule.a[s] * schedule.a[s];
    }
    symmetrize(out);
    return out;
}

namespace {

Vector scoring_step(const DiffusionSchedule& s, const Vector& x, std::size_t t,
                    const Vector& eps_hat, SamplerKind sampler, const NoiseRealization& noise) {
    if (sampler == SamplerKind::Ddpm) return ddpm_step(s, x, t, eps_hat, noise.eta[t]);
    const Vector zero(x.size(), 0.0);
    return ddpm_step(s, x, t, eps_hat, zero);
}

}  // namespace

SampleScore flare_sample(const DenoiserModel& model, const DiffusionSchedule& schedule,
                         const PosteriorOperator& posterior, SamplerKind sampler,
                         const NoiseRealization& noise) {
    const std::size_t d = model.config.data_dim;
    const std::size_t t_total = schedule.total_steps;
    if (noise.eta.size() != t_total + 1)
        throw ShapeError("flare_sample: noise realization does not match schedule");

    SampleScore out;
    EpistemicTrajectory& traj = out.traj;
    traj.estimator = estimator_from_posterior(posterior);
    traj.noise_seed = noise.seed;
    traj.trace_contrib.assign(t_total + 1, 0.0);
    traj.sigma_ep0 = Matrix(d, d);
    Vector raw_alea(t_total + 1, 0.0);

    Vector x = noise.x_init;
    traj.states.reserve(t_total + 1);
    traj.states.push_back(x);
    Matrix sigma(d, d);
    for (std::size_t t = t_total; t >= 1; --t) {
        const Vector eps_hat = model.forward(x, t);
        const Matrix jac = model.param_jacobian_columns(x, t, posterior.index_set());
        const Matrix delta = one_step_projection(jac, posterior, schedule.b[t]);
        sigma = propagate(sigma, schedule.a[t], delta);
        traj.trace_contrib[t] = trace(delta);
        if (sampler != SamplerKind::Ddim)
            raw_alea[t] = static_cast<double>(d) * schedule.tilde_beta[t];
        x = scoring_step(schedule, x, t, eps_hat, sampler, noise);
        for (double v : x)
            if (!std::isfinite(v)) throw NumericalBreakdown("flare_sample: non-finite state");
        traj.states.push_back(x);
    }

    // Fold the (prod_{j<s} a_j)^2 discount into the stored per-step contributions.
    double discount = 1.0;
    for (std::size_t s = 1; s <= t_total; ++s) {
        traj.trace_contrib[s] *= discount;
        traj.aleatoric_total += discount * raw_alea[s];
        discount *= schedule.a[s] * schedule.a[s];
    }
    traj.sigma_ep0 = sigma;
    traj.trace_ep0 = trace(sigma);
    out.x0 = x;
    return out;
}

StreamingTraceResult streaming_trace(const DenoiserModel& model, const DiffusionSchedule& schedule,
                                     const PosteriorOperator& posterior, SamplerKind sampler,
                                     const NoiseRealization& noise) {
    const std::size_t d = model.config.data_dim;
    const std::size_t t_total = schedule.total_steps;
    const DampedCurvatureOperator damped(posterior.ggn(), posterior.lambda());

    StreamingTraceResult out;
    out.trace_series.assign(t_total + 1, 0.0);
    Vector x = noise.x_init;
    Vector g(posterior.dim());
    for (std::size_t t = t_total; t >= 1; --t) {
        const Vector eps_hat = model.forward(x, t);
        const Matrix jac = model.param_jacobian_columns(x, t, posterior.index_set());
        double u_sum = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            for (std::size_t j = 0; j < g.size(); ++j) g[j] = jac(k, j);
            const CgResult r = cg_solve(damped, g, 1e-10);
            if (!r.converged)
                throw NumericalBreakdown("streaming_trace: CG stalled at step " +
                                         std::to_string(t));
            u_sum += dot(g, r.x);
        }
        out.trace_series[t] = schedule.b[t] * schedule.b[t] * u_sum;
        x = scoring_step(schedule, x, t, eps_hat, sampler, noise);
    }
    double discount = 1.0;
    for (std::size_t s = 1; s <= t_total; ++s) {
        out.trace_series[s] *= discount;
        out.trace_total += out.trace_series[s];
        discount *= schedule.a[s] * schedule.a[s];
    }
    out.x0 = x;
    return out;
}

SampleScore llla_rollout(const DenoiserModel& model, const DiffusionSchedule& schedule,
                         const PosteriorOperator& last_layer_posterior,
                         const NoiseRealization& noise) {
    if (last_layer_posterior.kind() != PosteriorKind::LastLayer)
        throw InvalidArgument("llla_rollout: posterior is not last-layer");
    return flare_sample(model, schedule, last_layer_posterior, SamplerKind::Ddpm, noise);
}

PredictiveVarianceResult predictive_variance_rollout(const DenoiserModel& model,
                                                     const DiffusionSchedule& schedule,
                                                     const PosteriorOperator& last_layer_posterior,
                                                     std::size_t s_draws,
                                                     const NoiseRealization& noise, Rng& rng) {
    if (s_draws < 2) throw InvalidArgument("predictive_variance_rollout: need S >= 2");
    const std::size_t d = model.config.data_dim;
    const std::size_t m = last_layer_posterior.dim();
    const IndexSet& set = last_layer_posterior.index_set();
    const Matrix& l = last_layer_posterior.factor();

    // theta^(s) = theta_hat + delta with delta ~ N(0, (H + lambda I)^-1), drawn once.
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<DenoiserModel> draws(s_draws, model);
    for (std::size_t s = 0; s < s_draws; ++s) {
        Vector xi(m);
        for (double& v : xi) v = gauss(rng);
        const Vector delta = solve_upper_from_lower(l, xi);
        for (std::size_t j = 0; j < m; ++j)
            draws[s].params.values[set.indices[j]] += delta[j];
    }

    Vector x = noise.x_init;
    std::vector<Vector> xs(s_draws, noise.x_init);
    Vector var(d, 0.0);
    Vector eps_mean(d), cov(d), var_eps(d);
    Matrix eps_s(s_draws, d);
    for (std::size_t t = schedule.total_steps; t >= 1; --t) {
        for (std::size_t s = 0; s < s_draws; ++s) {
            const Vector e = draws[s].forward(xs[s], t);
            for (std::size_t j = 0; j < d; ++j) eps_s(s, j) = e[j];
        }
        for (std::size_t j = 0; j < d; ++j) {
            double me = 0.0, mx = 0.0;
            for (std::size_t s = 0; s < s_draws; ++s) {
                me += eps_s(s, j);
                mx += xs[s][j];
            }
            me /= static_cast<double>(s_draws);
            mx /= static_cast<double>(s_draws);
            double ve = 0.0, cv = 0.0;
            for (std::size_t s = 0; s < s_draws; ++s) {
                ve += (eps_s(s, j) - me) * (eps_s(s, j) - me);
                cv += (xs[s][j] - mx) * (eps_s(s, j) - me);
            }
            var_eps[j] = ve / static_cast<double>(s_draws - 1);
            cov[j] = cv / static_cast<double>(s_draws - 1);
        }
        const double a = schedule.a[t], b = schedule.b[t];
        for (std::size_t j = 0; j < d; ++j)
            var[j] = a * a * var[j] + b * b * var_eps[j] - 2.0 * a * b * cov[j] +
                     schedule.tilde_beta[t];
        const Vector eps_hat = model.forward(x, t);
        x = ddpm_step(schedule, x, t, eps_hat, noise.eta[t]);
        for (std::size_t s = 0; s < s_draws; ++s) {
            const Vector e(eps_s.row_ptr(s), eps_s.row_ptr(s) + d);
            xs[s] = ddpm_step(schedule, xs[s], t, e, noise.eta[t]);
        }
    }

    PredictiveVarianceResult out;
    out.x0 = x;
    out.var0 = var;
    double acc = 0.0;
    for (double v : var) acc += v;
    out.score = acc / static_cast<double>(d);
    return out;
}

std::vector<KeepFractionRow> keep_fraction_sweep(const DenoiserModel& model,
                                                 const DiffusionSchedule& schedule,
                                                 const Dataset& dataset,
                                                 const std::vector<double>& fractions,
                                                 std::size_t n_samples, std::size_t ggn_pairs,
                                                 double lambda, std::uint64_t seed) {
    const std::size_t p = model.param_count();
    const std::size_t d = model.config.data_dim;
    std::vector<KeepFractionRow> rows;
    for (std::size_t fi = 0; fi < fractions.size(); ++fi) {
        const double frac = fractions[fi];
        if (frac <= 0.0 || frac > 1.0)
            throw InvalidArgument("keep_fraction_sweep: fraction outside (0, 1]");
        KeepFractionRow row;
        row.fraction = frac;
        row.m = std::min<std::size_t>(p, static_cast<std::size_t>(std::ceil(frac * p)));
        Rng idx_rng = derived_rng(seed, 1000 + fi);
        const IndexSet set = sample_uniform_indices(p, row.m, idx_rng);
        const GgnMatrix ggn = assemble_ggn(model, schedule, dataset, set, ggn_pairs, seed + 1);
        const PosteriorOperator posterior(
            row.m == p ? PosteriorKind::FullDense : PosteriorKind::Subnet, ggn, lambda);
        double acc = 0.0;
        for (std::size_t i = 0; i < n_samples; ++i) {
            // Shared across fractions: the realization depends only on (seed, i).
            const NoiseRealization noise =
                make_noise_realization(schedule, d, derived_rng(seed, i)());
            const SampleScore s = flare_sample(model, schedule, posterior, SamplerKind::Ddpm, noise);
            acc += s.traj.trace_ep0 / static_cast<double>(d);
        }
        row.mean_trace = acc / static_cast<double>(n_samples);
        rows.push_back(row);
    }
    return rows;
}

}  // namespace flare
