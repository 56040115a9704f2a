#pragma once

// Multi-task logistic regression over a discrete time grid.
//
// A patient with features x (augmented with a trailing constant 1) is scored
// against every legal status sequence. Sequence k (0 <= k <= m) has y_i = 0
// for i <= k and y_i = 1 for i > k, i.e. the event falls in [t_k, t_{k+1}),
// and score f(x, k) = sum_{i > k} theta_i . x, with f(x, m) = 0. Sequence
// probabilities are the softmax of these scores; S(t_i) = P(k >= i).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "ets/tensor.hpp"

namespace ets::mtlr {

/// Strictly increasing, positive event-time thresholds in days.
class TimeGrid {
 public:
  TimeGrid() = default;
  explicit TimeGrid(std::vector<double> times);

  const std::vector<double>& times() const { return times_; }
  std::size_t size() const { return times_.size(); }
  double operator[](std::size_t i) const { return times_[i]; }
  bool operator==(const TimeGrid&) const = default;

 private:
  std::vector<double> times_;
};

struct SurvivalLabel {
  double time = 0.0;  // days; event time, or censoring time when censored
  bool censored = false;
};

/// Legal sequences consistent with a label: event interval indices
/// first..last inclusive. Uncensored labels have first == last.
struct EncodedLabel {
  std::size_t first = 0;
  std::size_t last = 0;
  bool operator==(const EncodedLabel&) const = default;
};

/// Union of ceil(sqrt(N_uncensored)) nearest-rank quantiles of the uncensored
/// times (levels k / (q + 1)) with the monthly points 30, 60, ..., 360. Times
/// are rounded to whole days (minimum 1) before deduplication. Throws
/// std::invalid_argument when no event is uncensored.
TimeGrid build_time_grid(std::span<const double> times, std::span<const std::uint8_t> censored);

EncodedLabel encode_label(const SurvivalLabel& label, const TimeGrid& grid);

/// Binary status sequence y_1..y_m for event interval k.
std::vector<std::uint8_t> status_sequence(std::size_t k, std::size_t m);

/// theta is [m, p + 1]; x_aug has p + 1 entries (intercept last).
double f_score(const Tensor& theta, std::span<const double> x_aug, std::size_t k);

/// All m + 1 sequence probabilities, log-sum-exp stabilized.
std::vector<double> sequence_probabilities(const Tensor& theta, std::span<const double> x_aug);
double sequence_prob(const Tensor& theta, std::span<const double> x_aug, std::size_t k);

/// Survival curve on {0, t_1, ..., t_m}: S(0) = 1 followed by S(t_i).
std::vector<double> survival_curve(const Tensor& theta, std::span<const double> x_aug);

/// Piecewise-linear S(t) through (0, 1), (t_i, S_i); constant S(t_m) past t_m.
double interpolate_survival(std::span<const double> curve, const TimeGrid& grid, double t);

/// Area under the interpolated curve on [0, t_m] (restricted mean survival).
double restricted_mean(std::span<const double> curve, const TimeGrid& grid);

struct Objective {
  double value = 0.0;
  Tensor grad_theta;     // [m, p + 1]
  Tensor grad_features;  // [n, p + 1] when requested, else empty
};

/// Negative log-likelihood summed over records plus (C / 2) * ||theta||^2
/// with the intercept column left unpenalized. Censored records contribute
/// the log of the probability mass of every consistent sequence.
Objective nll_and_gradient(const Tensor& theta, const Tensor& features_aug, std::span<const EncodedLabel> labels,
                           double c, bool want_feature_gradient = false);

/// Appends the constant intercept column: [n, p] -> [n, p + 1].
Tensor augment(const Tensor& features);

struct MtlrParams {
  Tensor theta;  // [m, p + 1]
  double c = 0.0;
};

struct FitOptions {
  std::vector<double> c_grid{0.01, 0.1, 1.0, 10.0, 100.0};
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  double gradient_tolerance = 1e-6;
  std::size_t max_iterations = 20000;
};

struct FitResult {
  MtlrParams params;
  TimeGrid grid;
  std::vector<double> cv_log_likelihood;  // mean held-out log-likelihood per C
  bool converged = false;
  std::size_t iterations = 0;
};

/// Minimizes the per-record penalized objective for a fixed C with L-BFGS.
/// `gradient_tolerance` bounds the max-norm of the per-record gradient.
struct DescentResult {
  Tensor theta;
  bool converged = false;
  std::size_t iterations = 0;
  double objective = 0.0;
};
DescentResult minimize(const Tensor& features_aug, std::span<const EncodedLabel> labels, std::size_t m, double c,
                       double gradient_tolerance, std::size_t max_iterations);

/// Chooses C from the grid by k-fold cross-validated mean log-likelihood,
/// then refits on all records. `features` is [n, p] without intercept. The
/// grid is built from the labels unless one is supplied.
FitResult fit_linear_mtlr(const Tensor& features, std::span<const SurvivalLabel> labels, const FitOptions& options,
                          std::optional<TimeGrid> grid = std::nullopt);

}  // namespace ets::mtlr
