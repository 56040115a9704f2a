#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "ets/mtlr/mtlr.hpp"

namespace ets::metrics {

/// Raised when a metric is undefined for its input (one class, no
/// comparable pairs, degenerate Kaplan-Meier).
class MetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

struct BinaryEval {
  std::span<const double> scores;
  std::span<const std::uint8_t> labels;
  double threshold = 0.5;
};

/// Mann-Whitney statistic with half credit for ties.
double auroc(const BinaryEval& eval);

struct PrMetrics {
  double auprc = 0.0;
  double average_precision = 0.0;
};
/// Precision-recall points at every distinct score, descending. AP is the
/// recall-weighted step sum; AUPRC is the trapezoidal area starting at (0, 1).
PrMetrics pr_metrics(const BinaryEval& eval);

struct ThresholdMetrics {
  std::optional<double> f1, specificity, recall, precision, accuracy;
};
/// Confusion table at `threshold` (score >= threshold predicts positive).
/// Ratios with a zero denominator are nullopt; F1 is 2TP / (2TP + FP + FN).
ThresholdMetrics threshold_metrics(const BinaryEval& eval);

double brier(const BinaryEval& eval);

struct SurvivalEval {
  std::span<const double> times;
  std::span<const std::uint8_t> censored;
};

/// Harrell's C over pairs where i has an event and d_i < d_j. Ties in risk
/// count one half. O(n log n).
double concordance_index(const SurvivalEval& eval, std::span<const double> risk);

/// Product-limit estimate evaluated at each distinct observed time.
struct KaplanMeier {
  std::vector<double> times;
  std::vector<double> survival;

  /// Right-continuous step value; 1 before the first time.
  double at(double t) const;
  /// E[T | T > c]. Past the last observed time the curve continues on the
  /// line from (0, 1) through the last point until it reaches zero.
  double conditional_mean(double c) const;
};
KaplanMeier kaplan_meier(std::span<const double> times, std::span<const std::uint8_t> events);

enum class Reduction { sum, mean };

struct L1Losses {
  double hinge = 0.0;
  double marginal = 0.0;
};
/// `curves` holds one survival curve per patient on {0, t_1..t_m}. The
/// predicted time is the restricted mean of each curve. The marginal loss
/// uses a Kaplan-Meier fit on the evaluation cohort itself.
L1Losses l1_losses(const SurvivalEval& eval, std::span<const std::vector<double>> curves, const mtlr::TimeGrid& grid,
                   Reduction reduction = Reduction::sum);

struct Interval {
  double point = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  bool operator==(const Interval&) const = default;
};

struct BootstrapOptions {
  std::size_t replicates = 1000;
  std::uint64_t seed = 0;
  double level = 0.95;
  std::size_t jobs = 1;
};

/// Metric over a resample given as row indices; nullopt when undefined.
using IndexedMetric = std::function<std::optional<double>(std::span<const std::size_t>)>;

/// Percentile bootstrap over n records. Each replicate draws from its own
/// stream keyed by (seed, replicate, attempt), so results do not depend on
/// `jobs`. Undefined replicates are redrawn; more than 10 * replicates draws
/// in total raises MetricError, as does an undefined point estimate.
Interval bootstrap_ci(const IndexedMetric& metric, std::size_t n, const BootstrapOptions& options);

/// Report rows keyed by metric name; nullopt rows are written as null.
using Report = std::map<std::string, std::optional<Interval>>;

Report classification_report(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold,
                             const BootstrapOptions& options);

/// Survival report: c_index, l1_hinge, l1_marginal, plus event and
/// censored counts as p_pos_test / p_neg_test.
Report survival_report(const SurvivalEval& eval, std::span<const std::vector<double>> curves,
                       const mtlr::TimeGrid& grid, const BootstrapOptions& options,
                       Reduction reduction = Reduction::sum);

/// Deterministic JSON text (sorted keys, fixed float formatting).
std::string report_to_json(const Report& report);

}  // namespace ets::metrics
