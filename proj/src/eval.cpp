#include "flare/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace flare {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }
double silu(double z) { return z * sigmoid(z); }
double silu_grad(double z) {
    const double s = sigmoid(z);
    return s * (1.0 + z * (1.0 - s));
}

}  // namespace

Discriminator::Discriminator(std::size_t in, std::size_t h) : in_dim(in), hidden(h) {
    params.assign(param_count(), 0.0);
}

std::size_t Discriminator::param_count() const {
    return hidden * in_dim + hidden + hidden * hidden + hidden + hidden + 1;
}

namespace {

struct DiscLayout {
    std::size_t w1, b1, w2, b2, w3, b3;
};

DiscLayout disc_layout(const Discriminator& d) {
    DiscLayout l;
    l.w1 = 0;
    l.b1 = l.w1 + d.hidden * d.in_dim;
    l.w2 = l.b1 + d.hidden;
    l.b2 = l.w2 + d.hidden * d.hidden;
    l.w3 = l.b2 + d.hidden;
    l.b3 = l.w3 + d.hidden;
    return l;
}

// Logits for a batch; optionally fills the activation caches for backprop.
Vector disc_logits(const Discriminator& d, const Matrix& x, Matrix* z1_out = nullptr,
                   Matrix* a1_out = nullptr, Matrix* z2_out = nullptr, Matrix* a2_out = nullptr) {
    const DiscLayout l = disc_layout(d);
    const std::size_t n = x.rows, h = d.hidden;
    Matrix w1(h, d.in_dim), w2(h, h);
    std::copy_n(d.params.data() + l.w1, h * d.in_dim, w1.data.data());
    std::copy_n(d.params.data() + l.w2, h * h, w2.data.data());

    Matrix z1(n, h);
    gemm_acc(z1, x, w1, false, true, 1.0, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) z1(i, j) += d.params[l.b1 + j];
    Matrix a1(n, h);
    for (std::size_t i = 0; i < z1.data.size(); ++i) a1.data[i] = silu(z1.data[i]);

    Matrix z2(n, h);
    gemm_acc(z2, a1, w2, false, true, 1.0, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) z2(i, j) += d.params[l.b2 + j];
    Matrix a2(n, h);
    for (std::size_t i = 0; i < z2.data.size(); ++i) a2.data[i] = silu(z2.data[i]);

    Vector z(n, d.params[l.b3]);
    for (std::size_t i = 0; i < n; ++i)
        z[i] += dot(a2.row(i), {d.params.data() + l.w3, h});

    if (z1_out) *z1_out = std::move(z1);
    if (a1_out) *a1_out = std::move(a1);
    if (z2_out) *z2_out = std::move(z2);
    if (a2_out) *a2_out = std::move(a2);
    return z;
}

// Mean binary cross-entropy with logits and its gradient.
double disc_loss_grad(const Discriminator& d, const Matrix& x, const std::vector<int>& labels,
                      Vector& grad) {
    const DiscLayout l = disc_layout(d);
    const std::size_t n = x.rows, h = d.hidden;
    Matrix z1, a1, z2, a2;
    const Vector z = disc_logits(d, x, &z1, &a1, &z2, &a2);

    grad.assign(d.params.size(), 0.0);
    double loss = 0.0;
    Vector dz(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double y = static_cast<double>(labels[i]);
        // softplus(z) - y z, computed stably.
        loss += std::max(z[i], 0.0) + std::log1p(std::exp(-std::abs(z[i]))) - y * z[i];
        dz[i] = (sigmoid(z[i]) - y) / static_cast<double>(n);
    }
    loss /= static_cast<double>(n);

    // Output layer.
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < h; ++j) grad[l.w3 + j] += dz[i] * a2(i, j);
        grad[l.b3] += dz[i];
    }
    // Hidden layer 2.
    Matrix da2(n, h);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < h; ++j) da2(i, j) = dz[i] * d.params[l.w3 + j];
    Matrix dz2(n, h);
    for (std::size_t i = 0; i < dz2.data.size(); ++i)
        dz2.data[i] = da2.data[i] * silu_grad(z2.data[i]);
    {
        Matrix gw2(h, h);
        gemm_acc(gw2, dz2, a1, true, false, 1.0, 0.0);
        std::copy_n(gw2.data.data(), h * h, grad.data() + l.w2);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < h; ++j) grad[l.b2 + j] += dz2(i, j);
    }
    // Hidden layer 1.
    Matrix w2(h, h);
    std::copy_n(d.params.data() + l.w2, h * h, w2.data.data());
    Matrix da1(n, h);
    gemm_acc(da1, dz2, w2, false, false, 1.0, 0.0);
    Matrix dz1(n, h);
    for (std::size_t i = 0; i < dz1.data.size(); ++i)
        dz1.data[i] = da1.data[i] * silu_grad(z1.data[i]);
    {
        Matrix gw1(h, d.in_dim);
        gemm_acc(gw1, dz1, x, true, false, 1.0, 0.0);
        std::copy_n(gw1.data.data(), h * d.in_dim, grad.data() + l.w1);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < h; ++j) grad[l.b1 + j] += dz1(i, j);
    }
    return loss;
}

}  // namespace

double Discriminator::score(std::span<const double> x) const {
    Matrix row(1, in_dim);
    std::copy(x.begin(), x.end(), row.data.begin());
    return sigmoid(disc_logits(*this, row)[0]);
}

Vector Discriminator::score_batch(const Matrix& x) const {
    Vector z = disc_logits(*this, x);
    for (double& v : z) v = sigmoid(v);
    return z;
}

DiscriminatorResult train_discriminator(const Matrix& real, const Matrix& generated, Rng& rng,
                                        const DiscriminatorConfig& config) {
    if (real.rows == 0 || generated.rows == 0)
        throw InvalidArgument("train_discriminator: empty sample set");
    if (real.cols != generated.cols)
        throw ShapeError("train_discriminator: real and generated dims differ");
    const std::size_t dim = real.cols;

    // Stratified 70/30 split. With equal counts the same permutation is used
    // for both sets, so a sample duplicated across the two sets lands on one
    // side of the split together with its twin; that keeps the held-out
    // accuracy at chance when the sets coincide instead of biasing it through
    // memorized training twins.
    std::vector<std::size_t> real_order(real.rows), gen_order(generated.rows);
    std::iota(real_order.begin(), real_order.end(), 0);
    std::iota(gen_order.begin(), gen_order.end(), 0);
    std::shuffle(real_order.begin(), real_order.end(), rng);
    if (generated.rows == real.rows)
        gen_order = real_order;
    else
        std::shuffle(gen_order.begin(), gen_order.end(), rng);
    const std::size_t real_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.train_fraction * real.rows));
    const std::size_t gen_train = std::max<std::size_t>(
        1, static_cast<std::size_t>(config.train_fraction * generated.rows));
    const std::size_t n_train = real_train + gen_train;
    const std::size_t n_held = (real.rows - real_train) + (generated.rows - gen_train);

    Matrix x_train(n_train, dim), x_held(n_held, dim);
    std::vector<int> y_train(n_train), y_held(n_held);
    std::size_t ti = 0, hi = 0;
    for (std::size_t i = 0; i < real.rows; ++i) {
        const auto src = real.row(real_order[i]);
        if (i < real_train) {
            std::copy(src.begin(), src.end(), x_train.row_ptr(ti));
            y_train[ti++] = 1;
        } else {
            std::copy(src.begin(), src.end(), x_held.row_ptr(hi));
            y_held[hi++] = 1;
        }
    }
    for (std::size_t i = 0; i < generated.rows; ++i) {
        const auto src = generated.row(gen_order[i]);
        if (i < gen_train) {
            std::copy(src.begin(), src.end(), x_train.row_ptr(ti));
            y_train[ti++] = 0;
        } else {
            std::copy(src.begin(), src.end(), x_held.row_ptr(hi));
            y_held[hi++] = 0;
        }
    }

    DiscriminatorResult out;
    out.clf = Discriminator(dim, 64);
    // Uniform +-1/sqrt(fan_in) init, biases zero.
    const DiscLayout l = disc_layout(out.clf);
    auto init_block = [&](std::size_t offset, std::size_t count, std::size_t fan_in) {
        std::uniform_real_distribution<double> u(-1.0 / std::sqrt(double(fan_in)),
                                                 1.0 / std::sqrt(double(fan_in)));
        for (std::size_t i = 0; i < count; ++i) out.clf.params[offset + i] = u(rng);
    };
    init_block(l.w1, out.clf.hidden * dim, dim);
    init_block(l.w2, out.clf.hidden * out.clf.hidden, out.clf.hidden);
    init_block(l.w3, out.clf.hidden, out.clf.hidden);

    TrainConfig opt;
    opt.lr = config.lr;
    opt.weight_decay = config.weight_decay;
    opt.steps = config.steps;
    opt.grad_clip = 5.0;
    AdamState state(out.clf.params.size());
    Vector grad;
    std::normal_distribution<double> jitter(0.0, 1.0);
    Matrix x_step = x_train;
    for (std::size_t step = 0; step < config.steps; ++step) {
        if (config.input_jitter > 0.0) {
            for (std::size_t i = 0; i < x_step.data.size(); ++i)
                x_step.data[i] = x_train.data[i] + config.input_jitter * jitter(rng);
        }
        disc_loss_grad(out.clf, x_step, y_train, grad);
        adamw_step(out.clf.params, grad, state, opt, step);
    }

    out.heldout_scores = out.clf.score_batch(x_held);
    out.heldout_labels = std::move(y_held);
    out.heldout_accuracy = accuracy(out.heldout_scores, out.heldout_labels);
    return out;
}

DiscriminatorResult train_discriminator(const Dataset& real, const Matrix& generated, Rng& rng,
                                        const DiscriminatorConfig& config) {
    return train_discriminator(real.samples, generated, rng, config);
}

double accuracy(const Vector& scores, const std::vector<int>& labels, double threshold) {
    if (scores.empty()) throw InvalidArgument("accuracy: empty inputs");
    if (scores.size() != labels.size()) throw ShapeError("accuracy: length mismatch");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const int predicted = scores[i] >= threshold ? 1 : 0;
        if (predicted == labels[i]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(scores.size());
}

double roc_auc(const Vector& pos_scores, const Vector& neg_scores) {
    if (pos_scores.empty() || neg_scores.empty()) throw InvalidArgument("roc_auc: empty side");
    // Rank-sum with midranks for ties.
    struct Entry {
        double score;
        int is_pos;
    };
    std::vector<Entry> all;
    all.reserve(pos_scores.size() + neg_scores.size());
    for (double s : pos_scores) all.push_back({s, 1});
    for (double s : neg_scores) all.push_back({s, 0});
    std::sort(all.begin(), all.end(), [](const Entry& a, const Entry& b) { return a.score < b.score; });
    double rank_sum_pos = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].score == all[i].score) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // average of ranks i+1..j
        for (std::size_t k = i; k < j; ++k)
            if (all[k].is_pos) rank_sum_pos += midrank;
        i = j;
    }
    const double n_pos = static_cast<double>(pos_scores.size());
    const double n_neg = static_cast<double>(neg_scores.size());
    return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double gap_closure(double acc_filtered, double acc_unfiltered) {
    const double base = std::abs(0.5 - acc_unfiltered);
    if (base == 0.0) throw UndefinedBaseline("gap_closure: unfiltered accuracy is exactly 0.5");
    return 100.0 * (base - std::abs(0.5 - acc_filtered)) / base;
}

std::vector<std::size_t> filter_by_score(const Vector& scores, double percentile) {
    if (percentile <= 0.0 || percentile > 100.0)
        throw InvalidArgument("filter_by_score: percentile outside (0, 100]");
    const std::size_t n = scores.size();
    const std::size_t keep = static_cast<std::size_t>(percentile / 100.0 * n);
    std::vector<std::size_t> ids(n);
    std::iota(ids.begin(), ids.end(), 0);
    std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
        return scores[a] != scores[b] ? scores[a] < scores[b] : a < b;
    });
    ids.resize(keep);
    std::sort(ids.begin(), ids.end());
    return ids;
}

namespace {

Matrix resample_rows(const Matrix& m, Rng& rng) {
    Matrix out(m.rows, m.cols);
    std::uniform_int_distribution<std::size_t> u(0, m.rows - 1);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const auto src = m.row(u(rng));
        std::copy(src.begin(), src.end(), out.row_ptr(i));
    }
    return out;
}

double disc_accuracy_pair(const Discriminator& clf, const Vector& real_scores,
                          const Matrix& generated) {
    const Vector gen_scores = clf.score_batch(generated);
    std::size_t correct = 0;
    for (double s : real_scores) correct += s >= 0.5 ? 1 : 0;
    for (double s : gen_scores) correct += s < 0.5 ? 1 : 0;
    return static_cast<double>(correct) /
           static_cast<double>(real_scores.size() + gen_scores.size());
}

}  // namespace

double bootstrap_p(const Discriminator& clf, const Matrix& real, const Matrix& gen_filtered,
                   const Matrix& gen_unfiltered, std::size_t b_resamples, Rng& rng) {
    if (b_resamples < 100) throw InvalidArgument("bootstrap_p: need at least 100 resamples");
    const Vector real_scores = clf.score_batch(real);
    std::size_t at_or_below_zero = 0;
    std::size_t valid = 0;
    for (std::size_t b = 0; b < b_resamples; ++b) {
        const Matrix f = resample_rows(gen_filtered, rng);
        const Matrix u = resample_rows(gen_unfiltered, rng);
        const double acc_f = disc_accuracy_pair(clf, real_scores, f);
        const double acc_u = disc_accuracy_pair(clf, real_scores, u);
        if (std::abs(0.5 - acc_u) == 0.0) continue;  // baseline undefined this draw
        ++valid;
        if (gap_closure(acc_f, acc_u) <= 0.0) ++at_or_below_zero;
    }
    if (valid == 0) return 1.0;
    return (1.0 + static_cast<double>(at_or_below_zero)) / (1.0 + static_cast<double>(valid));
}

// ---------------------------------------------------------------------------
// Student's t distribution via the regularized incomplete beta function.

namespace {

double beta_continued_fraction(double a, double b, double x) {
    // Lentz's algorithm for the continued fraction of I_x(a, b).
    constexpr double tiny = 1e-300;
    constexpr double eps = 1e-14;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) break;
    }
    return h;
}

double reg_inc_beta(double a, double b, double x) {
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double ln_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) +
                            a * std::log(x) + b * std::log1p(-x);
    const double front = std::exp(ln_front);
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
    return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

}  // namespace

double student_t_cdf(double t, double df) {
    if (df <= 0.0) throw InvalidArgument("student_t_cdf: df must be positive");
    const double x = df / (df + t * t);
    const double half_tail = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
    return t >= 0.0 ? 1.0 - half_tail : half_tail;
}

// ---------------------------------------------------------------------------
// Cross-term Monte Carlo study.

CrossTermReport cross_term_study(const DenoiserModel& model, const PosteriorOperator& posterior,
                                 const DiffusionSchedule& schedule, std::size_t n_paths,
                                 std::size_t s_draws, const std::vector<double>& thresholds,
                                 Rng& rng, double draw_scale) {
    const std::size_t p = model.param_count();
    const std::size_t d = model.config.data_dim;
    const std::size_t t_steps = schedule.total_steps;
    if (posterior.index_set().size() != p)
        throw InvalidArgument("cross_term_study: posterior must cover every parameter");
    if (p > 4096) throw ResourceLimit("cross_term_study: model too large for a dense posterior");
    if (s_draws < 8) throw InvalidArgument("cross_term_study: need at least 8 draws");
    if (n_paths < 2) throw InvalidArgument("cross_term_study: need at least 2 paths");

    const Matrix sigma = posterior.dense();
    const Matrix factor = posterior.factor();  // lower Cholesky of the precision

    CrossTermReport report;
    std::normal_distribution<double> gauss(0.0, 1.0);
    DenoiserModel perturbed = model;

    for (std::size_t path = 0; path < n_paths; ++path) {
        const NoiseRealization noise = make_noise_realization(schedule, d, rng());

        // Base trajectory at theta-hat with the Jacobian along it.
        std::vector<Vector> base_states(t_steps + 1);  // index t holds x_t
        std::vector<Matrix> jac(t_steps + 1);
        std::vector<Vector> diag_proj(t_steps + 1, Vector(d, 0.0));  // diag(J Sigma J^T)
        base_states[t_steps] = noise.x_init;
        for (std::size_t t = t_steps; t >= 1; --t) {
            const Vector& x = base_states[t];
            jac[t] = model.param_jacobian(x, t);
            const Matrix js = matmul(jac[t], sigma);
            for (std::size_t j = 0; j < d; ++j) diag_proj[t][j] = dot(js.row(j), jac[t].row(j));
            const Vector eps_hat = model.forward(x, t);
            base_states[t - 1] = ddpm_step(schedule, x, t, eps_hat, noise.eta[t]);
        }

        // Perturbed trajectories sharing the aleatoric realization.
        std::vector<Matrix> x_draws(t_steps + 1, Matrix(s_draws, d));
        std::vector<Matrix> lin_draws(t_steps + 1, Matrix(s_draws, d));
        Vector xi(p), dtheta;
        for (std::size_t s = 0; s < s_draws; ++s) {
            for (double& v : xi) v = gauss(rng);
            dtheta = solve_upper_from_lower(factor, xi);
            for (double& v : dtheta) v *= draw_scale;
            for (std::size_t k = 0; k < p; ++k)
                perturbed.params.values[k] = model.params.values[k] + dtheta[k];
            Vector x = noise.x_init;
            for (std::size_t t = t_steps; t >= 1; --t) {
                std::copy(x.begin(), x.end(), x_draws[t].row_ptr(s));
                const Vector jd = matvec(jac[t], dtheta);
                std::copy(jd.begin(), jd.end(), lin_draws[t].row_ptr(s));
                const Vector eps_hat = perturbed.forward(x, t);
                x = ddpm_step(schedule, x, t, eps_hat, noise.eta[t]);
            }
        }

        // Dimensionwise covariance estimates and the two recursions.
        Vector var_no(d, 0.0), var_with(d, 0.0);
        for (std::size_t t = t_steps; t >= 1; --t) {
            const double a = schedule.a[t], b = schedule.b[t];
            Vector cov(d, 0.0);
            for (std::size_t j = 0; j < d; ++j) {
                double mean_x = 0.0, mean_l = 0.0;
                for (std::size_t s = 0; s < s_draws; ++s) {
                    mean_x += x_draws[t](s, j);
                    mean_l += lin_draws[t](s, j);
                }
                mean_x /= static_cast<double>(s_draws);
                mean_l /= static_cast<double>(s_draws);
                double acc = 0.0;
                for (std::size_t s = 0; s < s_draws; ++s)
                    acc += (x_draws[t](s, j) - mean_x) * (lin_draws[t](s, j) - mean_l);
                cov[j] = acc / static_cast<double>(s_draws - 1);
            }
            for (std::size_t j = 0; j < d; ++j) {
                const double shared = b * b * diag_proj[t][j];
                var_no[j] = a * a * var_no[j] + shared;
                var_with[j] = a * a * var_with[j] + shared - 2.0 * a * b * cov[j];
            }
        }
        double u_no = 0.0, u_with = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            u_no += var_no[j];
            u_with += var_with[j];
        }
        if (u_no <= 0.0) throw NumericalBreakdown("cross_term_study: non-positive base score");
        report.delta_u_pct.push_back(100.0 * (u_with - u_no) / u_no);
    }

    const double n = static_cast<double>(n_paths);
    double mean = 0.0;
    for (double v : report.delta_u_pct) mean += v;
    mean /= n;
    double ss = 0.0, max_abs = 0.0;
    for (double v : report.delta_u_pct) {
        ss += (v - mean) * (v - mean);
        max_abs = std::max(max_abs, std::abs(v));
    }
    report.mean = mean;
    report.stddev = std::sqrt(ss / (n - 1.0));
    report.max_abs = max_abs;
    report.std_error = report.stddev / std::sqrt(n);
    report.df = n - 1.0;
    for (double tau : thresholds) {
        ThresholdTest test;
        test.tau = tau;
        test.t_stat = report.std_error > 0.0 ? (mean - tau) / report.std_error
                                             : (mean < tau ? -1e300 : 1e300);
        test.p_value = report.std_error > 0.0 ? student_t_cdf(test.t_stat, report.df)
                                              : (mean < tau ? 0.0 : 1.0);
        report.tests.push_back(test);
    }
    return report;
}

// ---------------------------------------------------------------------------
// Sketch convergence and the two theory checks.

SketchStudyReport sketch_convergence_study(const Matrix& j_pop, const Matrix& j_t,
                                           const std::vector<std::size_t>& m_grid,
                                           std::size_t trials, Rng& rng, double rel_tol) {
    if (j_pop.cols != j_t.cols) throw ShapeError("sketch_convergence_study: column mismatch");
    if (m_grid.empty() || trials < 1)
        throw InvalidArgument("sketch_convergence_study: empty study");
    const std::size_t p = j_pop.cols;
    for (std::size_t i = 1; i < m_grid.size(); ++i)
        if (m_grid[i] <= m_grid[i - 1])
            throw InvalidArgument("sketch_convergence_study: m grid must ascend");
    if (m_grid.back() > p) throw InvalidArgument("sketch_convergence_study: m exceeds p");

    const Matrix a = j_pop.transposed();  // p x nd
    const Matrix b = j_t.transposed();    // p x d
    {
        const Vector sv = singular_values(a);
        if (sv.front() == 0.0 || sv.back() / sv.front() < 1e-7)
            throw RankDeficient("sketch_convergence_study: population Jacobian rank-deficient");
    }

    SketchStudyReport report;
    report.m_grid = m_grid;
    report.mu = coherence(a);
    report.kappa = condition_number(a);
    {
        const ThinQr qr = qr_thin(a);
        const Matrix jq = matmul(j_t, qr.q);
        const double in_span = frobenius(jq) * frobenius(jq);
        const double total = frobenius(j_t) * frobenius(j_t);
        const double out_span = std::max(total - in_span, 0.0);
        report.gamma = out_span > 0.0 ? in_span / out_span : 1e300;
        report.gamma_flagged = report.gamma < 1e-3;
    }

    const Matrix x_star = lstsq_min_norm(a, b, rel_tol);
    const Matrix v_exact = matmul_tn(x_star, x_star);
    const double tr_exact = trace(v_exact);
    if (tr_exact <= 0.0) throw RankDeficient("sketch_convergence_study: exact trace is zero");

    for (std::size_t mi = 0; mi < m_grid.size(); ++mi) {
        const std::size_t m = m_grid[mi];
        Vector errors;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            Rng trial_rng = derived_rng(rng(), trial);
            const IndexSet set = sample_uniform_indices(p, m, trial_rng);
            Matrix a_sub(m, a.cols), b_sub(m, b.cols);
            for (std::size_t i = 0; i < m; ++i) {
                const auto ra = a.row(set.indices[i]);
                const auto rb = b.row(set.indices[i]);
                std::copy(ra.begin(), ra.end(), a_sub.row_ptr(i));
                std::copy(rb.begin(), rb.end(), b_sub.row_ptr(i));
            }
            const Matrix x_tilde = lstsq_min_norm(a_sub, b_sub, rel_tol);
            const Matrix v_tilde = matmul_tn(x_tilde, x_tilde);
            errors.push_back(std::abs(tr_exact - trace(v_tilde)) / tr_exact);
        }
        double mean = 0.0;
        for (double e : errors) mean += e;
        report.mean_rel_error.push_back(mean / static_cast<double>(trials));
        report.trial_errors.push_back(std::move(errors));
    }

    // Least-squares slope of log(mean error) vs log(m).
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double k = static_cast<double>(m_grid.size());
    for (std::size_t i = 0; i < m_grid.size(); ++i) {
        const double lx = std::log(static_cast<double>(m_grid[i]));
        const double ly = std::log(std::max(report.mean_rel_error[i], 1e-300));
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    report.slope = (k * sxy - sx * sy) / (k * sxx - sx * sx);
    return report;
}

SketchInstance sketch_instance(std::uint64_t seed) {
    const std::size_t p = 512, nd = 128, d = 4, rank = 8, n_spike = 8;
    const double tail = 1e-4;      // plateau level of the trailing spectrum
    const double eta = 0.02;       // residual energy relative to the in-span part
    const double spike_weight = 0.5;
    Rng rng = derived_rng(seed, 0);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const auto randn = [&](std::size_t r, std::size_t c) {
        Matrix m(r, c);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) m(i, j) = gauss(rng);
        return m;
    };

    // a = J_pop^T with prescribed spectrum: k^{-1/2} over the leading block,
    // then a flat tail far below the truncation cutoff but above the global
    // rank guard.
    const Matrix u = qr_thin(randn(p, nd)).q;
    const Matrix v = qr_thin(randn(nd, nd)).q;
    Matrix a(p, nd);
    Vector sv(nd);
    for (std::size_t k = 0; k < nd; ++k)
        sv[k] = k < rank ? 1.0 / std::sqrt(double(k + 1)) : tail;
    for (std::size_t i = 0; i < p; ++i)
        for (std::size_t j = 0; j < nd; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < nd; ++k) s += u(i, k) * sv[k] * v(j, k);
            a(i, j) = s;
        }

    // Target columns: in-span component plus a small residual, half dense and
    // half concentrated on a few fixed coordinates so the subsample either
    // sees those rows or misses them outright.
    const Matrix coef = randn(nd, d);
    const Matrix in_span = matmul(a, coef);  // p x d
    Matrix noise = randn(p, d);
    for (std::size_t j = 0; j < d; ++j) {
        double dense_sq = 0.0;
        for (std::size_t i = 0; i < p; ++i) dense_sq += noise(i, j) * noise(i, j);
        Vector spike(p, 0.0);
        double spike_sq = 0.0;
        for (std::size_t s = 0; s < n_spike; ++s) {
            const std::size_t i = (37 * (s + 1) + 11 * j) % p;
            spike[i] = gauss(rng);
            spike_sq += spike[i] * spike[i];
        }
        const double rescale = std::sqrt(spike_weight * dense_sq / spike_sq);
        for (std::size_t i = 0; i < p; ++i)
            noise(i, j) = std::sqrt(1.0 - spike_weight) * noise(i, j) + rescale * spike[i];
    }
    Matrix bt(p, d);
    for (std::size_t j = 0; j < d; ++j) {
        double span_sq = 0.0, noise_sq = 0.0;
        for (std::size_t i = 0; i < p; ++i) {
            span_sq += in_span(i, j) * in_span(i, j);
            noise_sq += noise(i, j) * noise(i, j);
        }
        const double scale = eta * std::sqrt(span_sq / noise_sq);
        for (std::size_t i = 0; i < p; ++i) bt(i, j) = in_span(i, j) + scale * noise(i, j);
    }

    SketchInstance inst;
    inst.j_pop = a.transposed();
    inst.j_t = bt.transposed();
    inst.rel_tol = 1e-2;  // sits inside the gap between 1/sqrt(8) and 1e-4
    return inst;
}

double unroll_check(std::size_t trials, Rng& rng) {
    if (trials < 1) throw InvalidArgument("unroll_check: need at least one trial");
    std::normal_distribution<double> gauss(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        Rng trial_rng = derived_rng(rng(), trial);
        const std::size_t d = 1 + trial_rng() % 4;
        const std::size_t p = 2 + trial_rng() % 31;
        const std::size_t total_steps = 2 + trial_rng() % 7;
        const DiffusionSchedule schedule = cosine_schedule(total_steps);

        Matrix a(p, p);
        for (double& v : a.data) v = gauss(trial_rng);
        Matrix h = matmul_tn(a, a);
        for (double& v : h.data) v /= static_cast<double>(p);
        GgnMatrix ggn;
        ggn.h = std::move(h);
        ggn.index_set.indices.resize(p);
        std::iota(ggn.index_set.indices.begin(), ggn.index_set.indices.end(), 0);
        ggn.n_pairs = p;
        const PosteriorOperator posterior(PosteriorKind::FullDense, std::move(ggn), 1e-2);

        std::vector<Matrix> jacobians;
        for (std::size_t s = 0; s < total_steps; ++s) {
            Matrix j(d, p);
            for (double& v : j.data) v = gauss(trial_rng);
            jacobians.push_back(std::move(j));
        }

        Matrix sigma(d, d);
        for (std::size_t t = total_steps; t >= 1; --t)
            sigma = propagate(sigma, schedule.a[t],
                              one_step_projection(jacobians[t - 1], posterior, schedule.b[t]));
        const Matrix unrolled = unrolled_accumulation(schedule, jacobians, posterior);

        double diff = 0.0;
        for (std::size_t i = 0; i < sigma.data.size(); ++i) {
            const double e = sigma.data[i] - unrolled.data[i];
            diff += e * e;
        }
        const double denom = std::max(frobenius(unrolled), 1e-300);
        worst = std::max(worst, std::sqrt(diff) / denom);
    }
    return worst;
}

double lemma1_check(std::size_t trials, Rng& rng) {
    if (trials < 1) throw InvalidArgument("lemma1_check: need at least one trial");
    std::normal_distribution<double> gauss(0.0, 1.0);
    double worst = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
        std::uniform_int_distribution<std::size_t> pu(8, 40);
        const std::size_t p = pu(rng);
        std::uniform_int_distribution<std::size_t> ku(2, p - 1);
        const std::size_t k = ku(rng);
        std::uniform_int_distribution<std::size_t> du(1, 6);
        const std::size_t d = du(rng);
        Matrix a(p, k), b(p, d);
        for (double& v : a.data) v = gauss(rng);
        for (double& v : b.data) v = gauss(rng);

        // Eigendecomposition route for B^T (A A^T)^+ B.
        const Matrix aat = matmul_nt(a, a);
        const SymEig eig = sym_eig(aat);
        const double eig_max = eig.values.back();
        Matrix pinv(p, p);
        for (std::size_t e = 0; e < p; ++e) {
            const double lam = eig.values[e];
            if (lam <= 1e-12 * eig_max) continue;
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < p; ++j)
                    pinv(i, j) += eig.vectors(i, e) * eig.vectors(j, e) / lam;
        }
        const Matrix svd_route = matmul_tn(b, matmul(pinv, b));
        const Matrix ls_route = pinv_quadratic_form(a, b);
        Matrix diff = svd_route;
        for (std::size_t i = 0; i < diff.data.size(); ++i) diff.data[i] -= ls_route.data[i];
        const double denom = std::max(frobenius(svd_route), 1e-300);
        worst = std::max(worst, frobenius(diff) / denom);
    }
    return worst;
}

double prop1_mc_check(const DenoiserModel& model, const PosteriorOperator& posterior,
                      const DiffusionSchedule& schedule, const Vector& x_t, std::size_t t,
                      std::size_t s_draws, double sigma_scale, Rng& rng) {
    if (s_draws < 2) throw InvalidArgument("prop1_mc_check: need at least 2 draws");
    if (sigma_scale < 0.0) throw InvalidArgument("prop1_mc_check: negative scale");
    const std::size_t d = model.config.data_dim;
    const IndexSet& set = posterior.index_set();
    const std::size_t m = set.size();
    const double a = schedule.a[t], b = schedule.b[t];
    const double draw_scale = std::sqrt(sigma_scale);

    const Matrix jac = model.param_jacobian_columns(x_t, t, set);
    const Matrix sigma = posterior.dense();
    const Matrix js = matmul(jac, sigma);
    double analytic = 0.0;
    for (std::size_t j = 0; j < d; ++j) analytic += dot(js.row(j), jac.row(j));
    analytic *= b * b * sigma_scale;
    if (analytic == 0.0) return 0.0;

    const Matrix factor = posterior.factor();
    std::normal_distribution<double> gauss(0.0, 1.0);
    DenoiserModel perturbed = model;
    Matrix means(s_draws, d);
    Vector xi(m);
    for (std::size_t s = 0; s < s_draws; ++s) {
        for (double& v : xi) v = gauss(rng);
        Vector dtheta = solve_upper_from_lower(factor, xi);
        for (std::size_t k = 0; k < m; ++k)
            perturbed.params.values[set.indices[k]] =
                model.params.values[set.indices[k]] + draw_scale * dtheta[k];
        const Vector eps_hat = perturbed.forward(x_t, t);
        for (std::size_t j = 0; j < d; ++j) means(s, j) = a * x_t[j] - b * eps_hat[j];
    }
    double mc_trace = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::size_t s = 0; s < s_draws; ++s) mean += means(s, j);
        mean /= static_cast<double>(s_draws);
        double acc = 0.0;
        for (std::size_t s = 0; s < s_draws; ++s)
            acc += (means(s, j) - mean) * (means(s, j) - mean);
        mc_trace += acc / static_cast<double>(s_draws - 1);
    }
    return std::abs(mc_trace - analytic) / analytic;
}

// ---------------------------------------------------------------------------
// SVG emission.

namespace {

struct SvgFrame {
    double width = 640, height = 440;
    double left = 70, right = 20, top = 40, bottom = 50;
    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;

    double px(double x) const {
        return left + (x - x_min) / (x_max - x_min) * (width - left - right);
    }
    double py(double y) const {
        return height - bottom - (y - y_min) / (y_max - y_min) * (height - top - bottom);
    }
};

const char* kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

void svg_header(std::ostringstream& out, const SvgFrame& f, const std::string& title) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.width << "\" height=\""
        << f.height << "\" viewBox=\"0 0 " << f.width << " " << f.height << "\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << f.width / 2 << "\" y=\"24\" text-anchor=\"middle\" "
        << "font-family=\"sans-serif\" font-size=\"15\">" << title << "</text>\n";
    out << "<rect x=\"" << f.left << "\" y=\"" << f.top << "\" width=\""
        << f.width - f.left - f.right << "\" height=\"" << f.height - f.top - f.bottom
        << "\" fill=\"none\" stroke=\"#333\"/>\n";
}

}  // namespace

std::string svg_line_plot_loglog(const std::vector<Vector>& xs, const std::vector<Vector>& ys,
                                 const std::vector<std::string>& labels,
                                 const std::string& title) {
    if (xs.size() != ys.size() || xs.empty())
        throw InvalidArgument("svg_line_plot_loglog: series mismatch");
    SvgFrame f;
    f.x_min = 1e300;
    f.x_max = -1e300;
    f.y_min = 1e300;
    f.y_max = -1e300;
    for (std::size_t s = 0; s < xs.size(); ++s) {
        for (double v : xs[s]) {
            const double lv = std::log10(std::max(v, 1e-300));
            f.x_min = std::min(f.x_min, lv);
            f.x_max = std::max(f.x_max, lv);
        }
        for (double v : ys[s]) {
            const double lv = std::log10(std::max(v, 1e-300));
            f.y_min = std::min(f.y_min, lv);
            f.y_max = std::max(f.y_max, lv);
        }
    }
    if (f.x_max <= f.x_min) f.x_max = f.x_min + 1.0;
    if (f.y_max <= f.y_min) f.y_max = f.y_min + 1.0;

    std::ostringstream out;
    svg_header(out, f, title);
    for (std::size_t s = 0; s < xs.size(); ++s) {
        const char* color = kSeriesColors[s % 6];
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < xs[s].size(); ++i)
            out << f.px(std::log10(std::max(xs[s][i], 1e-300))) << ","
                << f.py(std::log10(std::max(ys[s][i], 1e-300))) << " ";
        out << "\"/>\n";
        if (s < labels.size())
            out << "<text x=\"" << f.width - f.right - 150 << "\" y=\"" << f.top + 18 + 16 * s
                << "\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" << color << "\">"
                << labels[s] << "</text>\n";
    }
    out << "<text x=\"" << f.width / 2 << "\" y=\"" << f.height - 12
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">"
        << "log10 x</text>\n";
    out << "</svg>\n";
    return out.str();
}

std::string svg_scatter(const Vector& x, const Vector& y, const Vector& color_score,
                        const std::string& title) {
    if (x.size() != y.size() || x.size() != color_score.size())
        throw InvalidArgument("svg_scatter: length mismatch");
    SvgFrame f;
    f.x_min = 1e300;
    f.x_max = -1e300;
    f.y_min = 1e300;
    f.y_max = -1e300;
    for (double v : x) {
        f.x_min = std::min(f.x_min, v);
        f.x_max = std::max(f.x_max, v);
    }
    for (double v : y) {
        f.y_min = std::min(f.y_min, v);
        f.y_max = std::max(f.y_max, v);
    }
    if (f.x_max <= f.x_min) f.x_max = f.x_min + 1.0;
    if (f.y_max <= f.y_min) f.y_max = f.y_min + 1.0;
    double s_min = 1e300, s_max = -1e300;
    for (double v : color_score) {
        s_min = std::min(s_min, v);
        s_max = std::max(s_max, v);
    }
    if (s_max <= s_min) s_max = s_min + 1.0;

    std::ostringstream out;
    svg_header(out, f, title);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double u = (color_score[i] - s_min) / (s_max - s_min);
        const int r = static_cast<int>(40 + 200 * u);
        const int b = static_cast<int>(240 - 200 * u);
        out << "<circle cx=\"" << f.px(x[i]) << "\" cy=\"" << f.py(y[i])
            << "\" r=\"2.5\" fill=\"rgb(" << r << ",60," << b << ")\" fill-opacity=\"0.7\"/>\n";
    }
    out << "</svg>\n";
    return out.str();
}

}  // namespace flare
