#pragma once

#include "flare/training.hpp"
#include "flare/uncertainty.hpp"

namespace flare {

// Two-hidden-layer SiLU MLP with a logistic output, trained to distinguish
// real samples (label 1) from generated samples (label 0).
struct Discriminator {
    std::size_t in_dim = 0;
    std::size_t hidden = 64;
    Vector params;

    Discriminator() = default;
    Discriminator(std::size_t in, std::size_t h);

    std::size_t param_count() const;
    // Probability that x is real (sigmoid of the logit).
    double score(std::span<const double> x) const;
    Vector score_batch(const Matrix& x) const;
};

struct DiscriminatorConfig {
    double lr = 3e-3;
    double weight_decay = 1e-4;
    std::size_t steps = 400;
    double train_fraction = 0.7;
    // Gaussian noise added to training inputs each step; prevents the MLP from
    // memorizing individual points, which would bias held-out accuracy when
    // the two sample sets overlap.
    double input_jitter = 0.0;
};

struct DiscriminatorResult {
    Discriminator clf;
    Vector heldout_scores;
    std::vector<int> heldout_labels;  // 1 = real
    double heldout_accuracy = 0.0;
};

DiscriminatorResult train_discriminator(const Matrix& real, const Matrix& generated, Rng& rng,
                                        const DiscriminatorConfig& config = {});
DiscriminatorResult train_discriminator(const Dataset& real, const Matrix& generated, Rng& rng,
                                        const DiscriminatorConfig& config = {});

// Mean correct-classification rate; score >= threshold classifies as class 1.
double accuracy(const Vector& scores, const std::vector<int>& labels, double threshold = 0.5);

// Pr(s(x+) > s(x-)) with ties counted one half, computed by rank summation.
double roc_auc(const Vector& pos_scores, const Vector& neg_scores);

// 100 * (|0.5 - acc_uf| - |0.5 - acc_f|) / |0.5 - acc_uf|; +100 means the
// filtered set is indistinguishable from real.
double gap_closure(double acc_filtered, double acc_unfiltered);

// Indices of the floor(percentile% * n) smallest scores, ties broken by index
// ascending; the returned indices are sorted ascending.
std::vector<std::size_t> filter_by_score(const Vector& scores, double percentile);

// One-sided bootstrap p for H0: gap-closure <= 0, resampling the generated
// sets with replacement under a fixed discriminator.
double bootstrap_p(const Discriminator& clf, const Matrix& real, const Matrix& gen_filtered,
                   const Matrix& gen_unfiltered, std::size_t b_resamples, Rng& rng);

struct MetricsReport {
    std::string dataset;
    std::string method;
    double acc_unfiltered = 0.0;
    double acc_filtered = 0.0;
    bool gap_defined = true;
    double gap_closure_pct = 0.0;
    double roc_auc_filtered = 0.0;
    double bootstrap_p_value = 1.0;
    std::size_t n_generated = 0;
    std::size_t n_retained = 0;
    std::uint64_t seed = 0;
};

// Lower-tail CDF of Student's t with df degrees of freedom.
double student_t_cdf(double t, double df);

struct ThresholdTest {
    double tau = 0.0;     // threshold, percent units
    double t_stat = 0.0;  // (mean - tau) / se
    double p_value = 1.0; // lower tail: small means mean < tau is supported
};

struct CrossTermReport {
    Vector delta_u_pct;  // per-path (u_withX - u_noX) / u_noX in percent
    double mean = 0.0;
    double stddev = 0.0;
    double max_abs = 0.0;
    double std_error = 0.0;
    double df = 0.0;
    std::vector<ThresholdTest> tests;
};

// Shared-path Monte Carlo evaluation of the -2ab Cov(x_t, J_t dtheta) term
// under a dense full-parameter posterior: per path, S posterior draws rerun
// the DDPM recursion with identical aleatoric noise, the dimensionwise
// covariance is estimated, and the diagonal variance recursion is run with
// and without the cross term.
// draw_scale multiplies every posterior draw; 0 forces identical draws, making
// the estimated covariance (and the score change) exactly zero.
CrossTermReport cross_term_study(const DenoiserModel& model, const PosteriorOperator& posterior,
                                 const DiffusionSchedule& schedule, std::size_t n_paths,
                                 std::size_t s_draws, const std::vector<double>& thresholds,
                                 Rng& rng, double draw_scale = 1.0);

struct SketchStudyReport {
    std::vector<std::size_t> m_grid;
    Vector mean_rel_error;               // per m
    std::vector<Vector> trial_errors;    // per m, per trial
    double slope = 0.0;                  // log(mean error) vs log(m)
    double mu = 0.0;                     // coherence of J_pop^T
    double kappa = 0.0;                  // condition number of J_pop^T
    double gamma = 0.0;                  // rowspace alignment of J_t
    bool gamma_flagged = false;          // gamma below 1e-3: bound uninformative
};

// Convergence of the row-sampled trace estimate: exact V from the population
// least-squares problem, subsampled V-tilde per (m, trial), relative trace
// errors and the fitted log-log slope. rel_tol is the shared singular-value
// cutoff of both least-squares solves; rows sampled below the population
// spectrum's effective rank stay stable because both routes truncate alike.
SketchStudyReport sketch_convergence_study(const Matrix& j_pop, const Matrix& j_t,
                                           const std::vector<std::size_t>& m_grid,
                                           std::size_t trials, Rng& rng,
                                           double rel_tol = 1e-7);

// Synthetic population/target Jacobian pair for sketch convergence studies.
// rel_tol is the truncation cutoff the instance was designed around: the
// population spectrum has eight leading directions well above the cutoff and
// a flat tail well below it, so every subsampled solve keeps the same
// subspace and the study stays numerically stable across the whole m grid.
struct SketchInstance {
    Matrix j_pop;          // nd x p
    Matrix j_t;            // d x p
    double rel_tol = 0.0;  // truncation tolerance matched to the spectrum gap
};

// Incoherent benchmark instance (p = 512, nd = 128, d = 4): leading spectrum
// k^{-1/2} over eight directions with a 1e-4 tail plateau; target mixes an
// in-span component with a small residual split between a dense part and a
// handful of spiked coordinates. The mix is tuned so the mean relative trace
// error of the subsampled estimate decays close to m^{-1/2}.
SketchInstance sketch_instance(std::uint64_t seed);

// Max relative Frobenius deviation between the eigendecomposition route
// B^T (A A^T)^+ B and the least-squares route X*^T X* over random trials.
double lemma1_check(std::size_t trials, Rng& rng);

// Max relative Frobenius deviation between the step-by-step epistemic
// recursion and its closed-form unrolled sum over random small instances
// (d <= 4, p <= 32, T <= 8, random SPD posterior and Jacobians).
double unroll_check(std::size_t trials, Rng& rng);

// One-step delta-method check: MC trace of the reverse-mean covariance over
// s_draws posterior draws (covariance scaled by sigma_scale) against
// b_t^2 tr(J Sigma J^T); returns the relative trace error.
double prop1_mc_check(const DenoiserModel& model, const PosteriorOperator& posterior,
                      const DiffusionSchedule& schedule, const Vector& x_t, std::size_t t,
                      std::size_t s_draws, double sigma_scale, Rng& rng);

// Minimal self-contained SVG emitters for the report plots.
std::string svg_line_plot_loglog(const std::vector<Vector>& xs, const std::vector<Vector>& ys,
                                 const std::vector<std::string>& labels, const std::string& title);
std::string svg_scatter(const Vector& x, const Vector& y, const Vector& color_score,
                        const std::string& title);

}  // namespace flare
