#pragma once

#include <optional>

#include "flare/datasets.hpp"
#include "flare/denoiser.hpp"

namespace flare {

struct GgnMatrix {
    IndexSet index_set;
    Matrix h;  // m x m, symmetric PSD, (1/n) sum of J^T J over curvature pairs
    std::size_t n_pairs = 0;
};

enum class PosteriorKind { FullDense, Subnet, LastLayer };

// Damped posterior covariance (H + lambda I)^-1 over a parameter index set.
// Dense Cholesky is cached up to kDenseLimit; larger systems fall back to CG.
class PosteriorOperator {
public:
    static constexpr std::size_t kDenseLimit = 4096;

    PosteriorOperator(PosteriorKind kind, GgnMatrix ggn, double lambda);

    std::size_t dim() const { return ggn_.h.rows; }
    PosteriorKind kind() const { return kind_; }
    double lambda() const { return lambda_; }
    const IndexSet& index_set() const { return ggn_.index_set; }
    const Matrix& ggn() const { return ggn_.h; }

    Vector apply(const Vector& v) const;
    // Explicit (H + lambda I)^-1; only for dim <= kDenseLimit.
    const Matrix& dense() const;
    // Lower Cholesky factor of (H + lambda I); only for dim <= kDenseLimit.
    const Matrix& factor() const;

private:
    PosteriorKind kind_;
    GgnMatrix ggn_;
    double lambda_;
    Matrix chol_;                          // empty when using the CG path
    mutable std::optional<Matrix> dense_;  // lazily inverted
};

// Matrix-free (H + lambda I) apply, for CG paths and power iteration.
class DampedCurvatureOperator final : public SpdOperator {
public:
    DampedCurvatureOperator(const Matrix& h, double lambda) : h_(h), lambda_(lambda) {}
    std::size_t dim() const override { return h_.rows; }
    void apply(std::span<const double> in, std::span<double> out) const override;

private:
    const Matrix& h_;
    double lambda_;
};

// H = (1/n) sum_i J_{i,I}^T J_{i,I} over n_pairs (x, t) draws: x from the
// training set noised through the forward process, t uniform on [1, T].
GgnMatrix assemble_ggn(const DenoiserModel& model, const DiffusionSchedule& schedule,
                       const Dataset& dataset, const IndexSet& index_set, std::size_t n_pairs,
                       std::uint64_t seed);

struct PosteriorSummary {
    std::string kind;
    std::size_t m = 0;
    double lambda = 0.0;
    double trace_h = 0.0;
    double eig_max = 0.0;  // power-iteration estimate
    double eig_min = 0.0;  // inverse-iteration estimate through the posterior
};

PosteriorSummary summarize_posterior(const PosteriorOperator& op, std::size_t power_iters = 50);

}  // namespace flare
