#include "ets/mtlr/mtlr.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include <ceres/gradient_problem.h>
#include <ceres/gradient_problem_solver.h>

#include "ets/rng.hpp"

namespace ets::mtlr {
namespace {

void check_theta(const Tensor& theta, std::size_t width) {
  if (theta.rank() != 2 || theta.dim(0) == 0) throw ShapeError("mtlr: theta must be [m, p + 1] with m >= 1");
  if (theta.dim(1) != width) {
    throw ShapeError("mtlr: feature vector has " + std::to_string(width) + " entries, theta expects " +
                     std::to_string(theta.dim(1)));
  }
}

// f(x, k) for k = 0..m.
std::vector<double> all_scores(const Tensor& theta, std::span<const double> x) {
  check_theta(theta, x.size());
  const std::size_t m = theta.dim(0), w = theta.dim(1);
  std::vector<double> f(m + 1, 0.0);
  for (std::size_t k = m; k-- > 0;) {
    double s = 0.0;
    const double* row = theta.data() + k * w;
    for (std::size_t j = 0; j < w; ++j) s += row[j] * x[j];
    f[k] = f[k + 1] + s;  // row k holds theta_{k+1}
  }
  return f;
}

double log_sum_exp(std::span<const double> v) {
  const double hi = *std::max_element(v.begin(), v.end());
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - hi);
  return hi + std::log(acc);
}

double penalty(const Tensor& theta) {
  const std::size_t m = theta.dim(0), w = theta.dim(1);
  double s = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) s += theta.at(i, j) * theta.at(i, j);
  return s;
}

}  // namespace

TimeGrid::TimeGrid(std::vector<double> times) : times_(std::move(times)) {
  if (times_.empty()) throw std::invalid_argument("time grid must have at least one point");
  for (std::size_t i = 0; i < times_.size(); ++i) {
    if (!std::isfinite(times_[i]) || times_[i] <= 0.0) throw std::invalid_argument("time grid points must be finite and > 0");
    if (i > 0 && !(times_[i] > times_[i - 1])) throw std::invalid_argument("time grid must be strictly increasing");
  }
}

TimeGrid build_time_grid(std::span<const double> times, std::span<const std::uint8_t> censored) {
  if (times.size() != censored.size()) throw ShapeError("build_time_grid: times and censoring flags differ in length");
  std::vector<double> events;
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (!censored[i]) events.push_back(times[i]);
  }
  if (events.empty()) throw std::invalid_argument("build_time_grid: every record is censored");
  std::sort(events.begin(), events.end());

  auto to_day = [](double t) { return std::max(1.0, std::round(t)); };
  std::set<double> points;
  const std::size_t n = events.size();
  const auto q = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
  for (std::size_t k = 1; k <= q; ++k) {
    // Nearest rank: smallest rank r with r / n >= level, level = k / (q + 1).
    const std::size_t rank = std::max<std::size_t>(1, (k * n + q) / (q + 1));
    points.insert(to_day(events[rank - 1]));
  }
  for (int month = 1; month <= 12; ++month) points.insert(30.0 * month);
  return TimeGrid(std::vector<double>(points.begin(), points.end()));
}

EncodedLabel encode_label(const SurvivalLabel& label, const TimeGrid& grid) {
  if (!std::isfinite(label.time) || label.time <= 0.0) throw std::invalid_argument("survival time must be finite and > 0");
  const auto& t = grid.times();
  if (label.censored) {
    // Alive at every t_i <= c, so y_i = 0 there; later intervals stay open.
    const auto k = static_cast<std::size_t>(std::upper_bound(t.begin(), t.end(), label.time) - t.begin());
    return {k, grid.size()};
  }
  const auto k = static_cast<std::size_t>(std::lower_bound(t.begin(), t.end(), label.time) - t.begin());
  return {k, k};
}

std::vector<std::uint8_t> status_sequence(std::size_t k, std::size_t m) {
  if (k > m) throw std::out_of_range("status_sequence: k > m");
  std::vector<std::uint8_t> y(m, 0);
  for (std::size_t i = k; i < m; ++i) y[i] = 1;
  return y;
}

double f_score(const Tensor& theta, std::span<const double> x_aug, std::size_t k) {
  check_theta(theta, x_aug.size());
  if (k > theta.dim(0)) throw std::out_of_range("f_score: k must lie in [0, m]");
  return all_scores(theta, x_aug)[k];
}

std::vector<double> sequence_probabilities(const Tensor& theta, std::span<const double> x_aug) {
  const auto f = all_scores(theta, x_aug);
  const double log_z = log_sum_exp(f);
  std::vector<double> p(f.size());
  for (std::size_t k = 0; k < f.size(); ++k) p[k] = std::exp(f[k] - log_z);
  return p;
}

double sequence_prob(const Tensor& theta, std::span<const double> x_aug, std::size_t k) {
  if (k > theta.dim(0)) throw std::out_of_range("sequence_prob: k must lie in [0, m]");
  return sequence_probabilities(theta, x_aug)[k];
}

std::vector<double> survival_curve(const Tensor& theta, std::span<const double> x_aug) {
  const auto p = sequence_probabilities(theta, x_aug);
  const std::size_t m = p.size() - 1;
  std::vector<double> s(m + 1);
  s[0] = 1.0;
  double tail = 0.0;
  // S(t_i) = sum_{k >= i} p_k, accumulated from the end so it is monotone.
  std::vector<double> suffix(m + 1);
  for (std::size_t k = m + 1; k-- > 0;) {
    tail += p[k];
    suffix[k] = tail;
  }
  // Suffix sums of non-negative terms are monotone under rounding too.
  for (std::size_t i = 1; i <= m; ++i) s[i] = std::min(suffix[i], 1.0);
  return s;
}

double interpolate_survival(std::span<const double> curve, const TimeGrid& grid, double t) {
  if (curve.size() != grid.size() + 1) throw ShapeError("interpolate_survival: curve length must be m + 1");
  if (t <= 0.0) return 1.0;
  const auto& tau = grid.times();
  if (t >= tau.back()) return curve.back();
  const auto it = std::upper_bound(tau.begin(), tau.end(), t);
  const auto i = static_cast<std::size_t>(it - tau.begin());  // tau[i-1] <= t < tau[i]
  const double t0 = i == 0 ? 0.0 : tau[i - 1];
  const double t1 = tau[i];
  const double s0 = curve[i], s1 = curve[i + 1];
  return s0 + (s1 - s0) * (t - t0) / (t1 - t0);
}

double restricted_mean(std::span<const double> curve, const TimeGrid& grid) {
  if (curve.size() != grid.size() + 1) throw ShapeError("restricted_mean: curve length must be m + 1");
  double area = 0.0, prev_t = 0.0;
  for (std::size_t i = 0; i < grid.size(); ++i) {
    area += 0.5 * (curve[i] + curve[i + 1]) * (grid[i] - prev_t);
    prev_t = grid[i];
  }
  return area;
}

Tensor augment(const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("augment: features must be [n, p]");
  const std::size_t n = features.dim(0), p = features.dim(1);
  Tensor out({n, p + 1});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < p; ++j) out.at(r, j) = features.at(r, j);
    out.at(r, p) = 1.0;
  }
  return out;
}

Objective nll_and_gradient(const Tensor& theta, const Tensor& features_aug, std::span<const EncodedLabel> labels,
                           double c, bool want_feature_gradient) {
  if (features_aug.rank() != 2) throw ShapeError("nll_and_gradient: features must be [n, p + 1]");
  const std::size_t n = features_aug.dim(0), w = features_aug.dim(1);
  if (n == 0) throw std::invalid_argument("nll_and_gradient: empty batch");
  if (labels.size() != n) throw ShapeError("nll_and_gradient: one label per record required");
  check_theta(theta, w);
  const std::size_t m = theta.dim(0);

  Objective obj;
  obj.grad_theta = Tensor(theta.shape());
  if (want_feature_gradient) obj.grad_features = Tensor(features_aug.shape());

  std::vector<double> coef(m);  // d(-log L)/d(score_i) for i = 1..m
  for (std::size_t r = 0; r < n; ++r) {
    const EncodedLabel& lab = labels[r];
    if (lab.first > lab.last || lab.last > m) throw std::out_of_range("nll_and_gradient: label outside [0, m]");
    std::span<const double> x(features_aug.data() + r * w, w);
    const auto f = all_scores(theta, x);
    const double log_z = log_sum_exp(f);
    const double log_num =
        log_sum_exp(std::span<const double>(f.data() + lab.first, lab.last - lab.first + 1));
    obj.value += log_z - log_num;

    // score_i enters f(k) for every k < i; so the derivative w.r.t. score_i is
    // P(k < i) - Q(k < i) with Q the posterior over the consistent set.
    double p_cum = 0.0, q_cum = 0.0;
    for (std::size_t i = 1; i <= m; ++i) {
      const std::size_t k = i - 1;
      p_cum += std::exp(f[k] - log_z);
      if (k >= lab.first && k <= lab.last) q_cum += std::exp(f[k] - log_num);
      coef[i - 1] = p_cum - q_cum;
    }
    for (std::size_t i = 0; i < m; ++i) {
      double* g = obj.grad_theta.data() + i * w;
      for (std::size_t j = 0; j < w; ++j) g[j] += coef[i] * x[j];
    }
    if (want_feature_gradient) {
      double* gx = obj.grad_features.data() + r * w;
      for (std::size_t i = 0; i < m; ++i) {
        const double* row = theta.data() + i * w;
        for (std::size_t j = 0; j < w; ++j) gx[j] += coef[i] * row[j];
      }
    }
  }

  obj.value += 0.5 * c * penalty(theta);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) obj.grad_theta.at(i, j) += c * theta.at(i, j);

  if (!std::isfinite(obj.value)) throw NumericalError("mtlr objective is not finite");
  return obj;
}

DescentResult minimize(const Tensor& features_aug, std::span<const EncodedLabel> labels, std::size_t m, double c,
                       double gradient_tolerance, std::size_t max_iterations) {
  class Problem final : public ceres::FirstOrderFunction {
   public:
    Problem(const Tensor& x, std::span<const EncodedLabel> labels, std::size_t m, double c)
        : x_(x), labels_(labels), m_(m), c_(c), scale_(static_cast<double>(labels.size())) {}
    bool Evaluate(const double* parameters, double* cost, double* gradient) const override {
      Tensor theta({m_, x_.dim(1)});
      std::copy(parameters, parameters + theta.size(), theta.data());
      try {
        const Objective obj = nll_and_gradient(theta, x_, labels_, c_);
        *cost = obj.value / scale_;
        if (gradient) {
          for (std::size_t i = 0; i < theta.size(); ++i) gradient[i] = obj.grad_theta[i] / scale_;
        }
      } catch (const NumericalError&) {
        return false;
      }
      return true;
    }
    int NumParameters() const override { return static_cast<int>(m_ * x_.dim(1)); }

   private:
    const Tensor& x_;
    std::span<const EncodedLabel> labels_;
    std::size_t m_;
    double c_;
    double scale_;
  };

  if (labels.empty()) throw std::invalid_argument("mtlr: no records to fit");
  DescentResult out;
  out.theta = Tensor({m, features_aug.dim(1)});

  ceres::GradientProblemSolver::Options options;
  options.line_search_direction_type = ceres::LBFGS;
  options.max_num_iterations = static_cast<int>(max_iterations);
  options.gradient_tolerance = gradient_tolerance;
  options.function_tolerance = 1e-12;
  options.parameter_tolerance = 1e-12;
  options.logging_type = ceres::SILENT;
  ceres::GradientProblem problem(new Problem(features_aug, labels, m, c));
  ceres::GradientProblemSolver::Summary summary;
  ceres::Solve(options, problem, out.theta.data(), &summary);

  out.iterations = summary.iterations.empty() ? 0 : static_cast<std::size_t>(summary.iterations.back().iteration);
  out.converged = summary.termination_type == ceres::CONVERGENCE;
  out.objective = nll_and_gradient(out.theta, features_aug, labels, c).value;
  return out;
}

FitResult fit_linear_mtlr(const Tensor& features, std::span<const SurvivalLabel> labels, const FitOptions& options,
                          std::optional<TimeGrid> grid) {
  if (features.rank() != 2 || features.dim(0) != labels.size()) {
    throw ShapeError("fit_linear_mtlr: features must be [n, p] with one label per row");
  }
  const std::size_t n = labels.size();
  if (options.folds < 2) throw std::invalid_argument("fit_linear_mtlr: need at least 2 folds");
  if (n < 2 * options.folds) throw std::invalid_argument("fit_linear_mtlr: need at least 2 * folds records");
  if (options.c_grid.empty()) throw std::invalid_argument("fit_linear_mtlr: empty C grid");

  FitResult result;
  if (grid) {
    result.grid = *grid;
  } else {
    std::vector<double> times(n);
    std::vector<std::uint8_t> cens(n);
    for (std::size_t i = 0; i < n; ++i) {
      times[i] = labels[i].time;
      cens[i] = labels[i].censored;
    }
    result.grid = build_time_grid(times, cens);
  }
  const std::size_t m = result.grid.size();
  const Tensor x_aug = augment(features);
  std::vector<EncodedLabel> encoded(n);
  for (std::size_t i = 0; i < n; ++i) encoded[i] = encode_label(labels[i], result.grid);

  Rng rng = make_stream(options.seed, {0x6d746c72ULL});
  const auto order = shuffled_indices(n, rng);
  std::vector<std::size_t> fold_of(n);
  for (std::size_t i = 0; i < n; ++i) fold_of[order[i]] = i % options.folds;

  auto rows = [&](const std::vector<std::size_t>& idx) {
    Tensor sub({idx.size(), x_aug.dim(1)});
    std::vector<EncodedLabel> lab(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) {
      std::copy_n(x_aug.data() + idx[r] * x_aug.dim(1), x_aug.dim(1), sub.data() + r * x_aug.dim(1));
      lab[r] = encoded[idx[r]];
    }
    return std::make_pair(std::move(sub), std::move(lab));
  };

  std::size_t best = 0;
  for (std::size_t ci = 0; ci < options.c_grid.size(); ++ci) {
    const double c = options.c_grid[ci];
    if (!(c >= 0.0)) throw std::invalid_argument("fit_linear_mtlr: C must be >= 0");
    double total_ll = 0.0;
    for (std::size_t fold = 0; fold < options.folds; ++fold) {
      std::vector<std::size_t> train_idx, test_idx;
      for (std::size_t i = 0; i < n; ++i) (fold_of[i] == fold ? test_idx : train_idx).push_back(i);
      auto [x_train, l_train] = rows(train_idx);
      auto [x_test, l_test] = rows(test_idx);
      const auto fit = minimize(x_train, l_train, m, c, options.gradient_tolerance, options.max_iterations);
      total_ll -= nll_and_gradient(fit.theta, x_test, l_test, 0.0).value;
    }
    result.cv_log_likelihood.push_back(total_ll / static_cast<double>(n));
    if (!std::isfinite(result.cv_log_likelihood.back())) {
      std::ostringstream msg;
      msg << "fit_linear_mtlr: non-finite cross-validated likelihood for C = " << c;
      throw NumericalError(msg.str());
    }
    if (result.cv_log_likelihood[ci] > result.cv_log_likelihood[best]) best = ci;
  }

  const double c = options.c_grid[best];
  const auto fit = minimize(x_aug, encoded, m, c, options.gradient_tolerance, options.max_iterations);
  result.params = {fit.theta, c};
  result.converged = fit.converged;
  result.iterations = fit.iterations;
  return result;
}

}  // namespace ets::mtlr
