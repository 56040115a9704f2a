#include "ets/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "json.hpp"

#include "ets/rng.hpp"

namespace ets::metrics {
namespace {

void check_binary(const BinaryEval& eval) {
  if (eval.scores.size() != eval.labels.size()) {
    throw std::invalid_argument("metrics: scores and labels differ in length");
  }
  for (double s : eval.scores) {
    if (!std::isfinite(s)) throw std::invalid_argument("metrics: non-finite score");
  }
}

std::vector<std::size_t> order_by(std::span<const double> values, bool descending) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return descending ? values[a] > values[b] : values[a] < values[b];
  });
  return idx;
}

std::optional<double> ratio(std::size_t num, std::size_t den) {
  if (den == 0) return std::nullopt;
  return static_cast<double>(num) / static_cast<double>(den);
}

/// Fenwick tree of counts over compressed ranks.
class Fenwick {
 public:
  explicit Fenwick(std::size_t n) : tree_(n + 1, 0) {}
  void add(std::size_t i) {
    for (++i; i < tree_.size(); i += i & (~i + 1)) ++tree_[i];
  }
  /// Count of inserted ranks < i.
  std::uint64_t prefix(std::size_t i) const {
    std::uint64_t s = 0;
    for (; i > 0; i -= i & (~i + 1)) s += tree_[i];
    return s;
  }

 private:
  std::vector<std::uint64_t> tree_;
};

double quantile_sorted(const std::vector<double>& sorted, double q) {
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

template <class T>
std::vector<T> gather(std::span<const T> values, std::span<const std::size_t> idx) {
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = values[idx[i]];
  return out;
}

std::optional<Interval> try_bootstrap(const IndexedMetric& metric, std::size_t n, const BootstrapOptions& options) {
  try {
    return bootstrap_ci(metric, n, options);
  } catch (const MetricError&) {
    return std::nullopt;
  }
}

Interval count_row(std::size_t count) {
  const auto v = static_cast<double>(count);
  return {v, v, v};
}

}  // namespace

double auroc(const BinaryEval& eval) {
  check_binary(eval);
  const auto order = order_by(eval.scores, false);
  std::uint64_t pos = 0, neg = 0, twice_u = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    std::uint64_t gp = 0, gn = 0;
    while (j < order.size() && eval.scores[order[j]] == eval.scores[order[i]]) {
      (eval.labels[order[j]] ? gp : gn) += 1;
      ++j;
    }
    twice_u += 2 * gp * neg + gp * gn;
    pos += gp;
    neg += gn;
    i = j;
  }
  if (pos == 0 || neg == 0) throw MetricError("auroc: both classes must be present");
  return static_cast<double>(twice_u) / static_cast<double>(2 * pos * neg);
}

PrMetrics pr_metrics(const BinaryEval& eval) {
  check_binary(eval);
  const std::size_t positives = static_cast<std::size_t>(std::count_if(
      eval.labels.begin(), eval.labels.end(), [](std::uint8_t y) { return y != 0; }));
  if (positives == 0) throw MetricError("pr_metrics: no positive labels");
  const auto order = order_by(eval.scores, true);
  PrMetrics out;
  std::size_t tp = 0, fp = 0, i = 0;
  double prev_recall = 0.0, prev_precision = 1.0;
  while (i < order.size()) {
    const double s = eval.scores[order[i]];
    while (i < order.size() && eval.scores[order[i]] == s) {
      (eval.labels[order[i]] ? tp : fp) += 1;
      ++i;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    out.average_precision += (recall - prev_recall) * precision;
    out.auprc += (recall - prev_recall) * (precision + prev_precision) / 2.0;
    prev_recall = recall;
    prev_precision = precision;
  }
  return out;
}

ThresholdMetrics threshold_metrics(const BinaryEval& eval) {
  check_binary(eval);
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (std::size_t i = 0; i < eval.scores.size(); ++i) {
    const bool predicted = eval.scores[i] >= eval.threshold;
    if (eval.labels[i]) {
      (predicted ? tp : fn) += 1;
    } else {
      (predicted ? fp : tn) += 1;
    }
  }
  ThresholdMetrics out;
  out.recall = ratio(tp, tp + fn);
  out.precision = ratio(tp, tp + fp);
  out.specificity = ratio(tn, tn + fp);
  out.accuracy = ratio(tp + tn, tp + tn + fp + fn);
  out.f1 = ratio(2 * tp, 2 * tp + fp + fn);
  return out;
}

double brier(const BinaryEval& eval) {
  check_binary(eval);
  if (eval.scores.empty()) throw MetricError("brier: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < eval.scores.size(); ++i) {
    const double e = eval.scores[i] - (eval.labels[i] ? 1.0 : 0.0);
    total += e * e;
  }
  return total / static_cast<double>(eval.scores.size());
}

double concordance_index(const SurvivalEval& eval, std::span<const double> risk) {
  const std::size_t n = eval.times.size();
  if (eval.censored.size() != n || risk.size() != n) {
    throw std::invalid_argument("concordance_index: inputs differ in length");
  }
  std::vector<double> levels(risk.begin(), risk.end());
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  auto rank_of = [&](double r) {
    return static_cast<std::size_t>(std::lower_bound(levels.begin(), levels.end(), r) - levels.begin());
  };

  const auto order = order_by(eval.times, true);
  Fenwick tree(levels.size());
  std::uint64_t inserted = 0, comparable = 0, twice_concordant = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && eval.times[order[j]] == eval.times[order[i]]) ++j;
    for (std::size_t k = i; k < j; ++k) {
      const std::size_t a = order[k];
      if (eval.censored[a]) continue;
      const std::size_t r = rank_of(risk[a]);
      const std::uint64_t lower = tree.prefix(r);
      const std::uint64_t ties = tree.prefix(r + 1) - lower;
      comparable += inserted;
      twice_concordant += 2 * lower + ties;
    }
    for (std::size_t k = i; k < j; ++k) tree.add(rank_of(risk[order[k]]));
    inserted += j - i;
    i = j;
  }
  if (comparable == 0) throw MetricError("concordance_index: no comparable pairs");
  return static_cast<double>(twice_concordant) / static_cast<double>(2 * comparable);
}

KaplanMeier kaplan_meier(std::span<const double> times, std::span<const std::uint8_t> events) {
  if (times.size() != events.size()) throw std::invalid_argument("kaplan_meier: inputs differ in length");
  if (times.empty()) throw std::invalid_argument("kaplan_meier: empty input");
  const auto order = order_by(times, false);
  KaplanMeier km;
  // Between censorings the product of (n - d) / n telescopes, so survival is
  // an anchor value times a ratio of risk-set sizes.
  double anchor_s = 1.0;
  std::size_t anchor_n = times.size();
  std::size_t at_risk = times.size();
  std::size_t i = 0;
  while (i < order.size()) {
    const double t = times[order[i]];
    std::size_t d = 0, c = 0;
    while (i < order.size() && times[order[i]] == t) {
      (events[order[i]] ? d : c) += 1;
      ++i;
    }
    const double s = anchor_s * (static_cast<double>(at_risk - d) / static_cast<double>(anchor_n));
    km.times.push_back(t);
    km.survival.push_back(s);
    at_risk -= d + c;
    if (c > 0) {
      anchor_s = s;
      anchor_n = at_risk;
    }
    if (at_risk == 0) break;
  }
  return km;
}

double KaplanMeier::at(double t) const {
  const auto it = std::upper_bound(times.begin(), times.end(), t);
  if (it == times.begin()) return 1.0;
  return survival[static_cast<std::size_t>(it - times.begin()) - 1];
}

double KaplanMeier::conditional_mean(double c) const {
  if (times.empty() || survival.back() >= 1.0) {
    throw MetricError("kaplan_meier: no events; conditional mean undefined");
  }
  const double t_last = times.back();
  const double s_last = survival.back();
  const double slope = (1.0 - s_last) / t_last;
  const double t_zero = t_last / (1.0 - s_last);
  auto line = [&](double t) { return std::max(0.0, 1.0 - slope * t); };

  double s_c = 0.0, area = 0.0;
  if (c < t_last) {
    s_c = at(c);
    double left = c, value = s_c;
    for (std::size_t k = 0; k < times.size(); ++k) {
      if (times[k] <= c) continue;
      area += value * (times[k] - left);
      left = times[k];
      value = survival[k];
    }
    if (s_last > 0.0) area += s_last * (t_zero - t_last) / 2.0;
  } else {
    s_c = s_last > 0.0 ? line(c) : 0.0;
    if (s_c > 0.0) area = s_c * (t_zero - c) / 2.0;
  }
  if (s_c <= 0.0) return c;
  return c + area / s_c;
}

L1Losses l1_losses(const SurvivalEval& eval, std::span<const std::vector<double>> curves, const mtlr::TimeGrid& grid,
                   Reduction reduction) {
  const std::size_t n = eval.times.size();
  if (eval.censored.size() != n || curves.size() != n) throw std::invalid_argument("l1_losses: inputs differ in length");
  if (n == 0) throw MetricError("l1_losses: empty input");
  std::vector<std::uint8_t> events(n);
  for (std::size_t i = 0; i < n; ++i) events[i] = eval.censored[i] ? 0 : 1;
  const KaplanMeier km = kaplan_meier(eval.times, events);

  L1Losses out;
  for (std::size_t i = 0; i < n; ++i) {
    if (curves[i].size() != grid.size() + 1) throw ShapeError("l1_losses: curve length does not match the grid");
    const double predicted = mtlr::restricted_mean(curves[i], grid);
    const double d = eval.times[i];
    if (!eval.censored[i]) {
      out.hinge += std::abs(predicted - d);
      out.marginal += std::abs(predicted - d);
    } else {
      out.hinge += std::max(0.0, d - predicted);
      out.marginal += std::abs(predicted - km.conditional_mean(d));
    }
  }
  if (reduction == Reduction::mean) {
    out.hinge /= static_cast<double>(n);
    out.marginal /= static_cast<double>(n);
  }
  return out;
}

Interval bootstrap_ci(const IndexedMetric& metric, std::size_t n, const BootstrapOptions& options) {
  if (n == 0) throw std::invalid_argument("bootstrap_ci: empty data");
  if (options.replicates == 0) throw std::invalid_argument("bootstrap_ci: need at least one replicate");
  if (!(options.level > 0.0 && options.level < 1.0)) throw std::invalid_argument("bootstrap_ci: level must be in (0, 1)");

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  const auto point = metric(all);
  if (!point) throw MetricError("bootstrap_ci: metric undefined on the full data");

  const std::size_t cap = 10 * options.replicates;
  std::vector<double> values(options.replicates);
  std::vector<std::size_t> draws(options.replicates, 0);
  std::exception_ptr failure;
  std::mutex failure_mutex;

  auto run = [&](std::size_t begin, std::size_t end) {
    std::vector<std::size_t> idx(n);
    try {
      for (std::size_t r = begin; r < end; ++r) {
        for (std::size_t attempt = 0;; ++attempt) {
          if (attempt >= cap) throw MetricError("bootstrap_ci: redraw cap exhausted");
          Rng rng = make_stream(options.seed, {r, attempt});
          for (auto& v : idx) v = uniform_index(rng, n);
          draws[r] = attempt + 1;
          if (const auto v = metric(idx)) {
            values[r] = *v;
            break;
          }
        }
      }
    } catch (...) {
      std::lock_guard lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };

  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, options.replicates);
  if (jobs == 1) {
    run(0, options.replicates);
  } else {
    std::vector<std::thread> threads;
    const std::size_t chunk = (options.replicates + jobs - 1) / jobs;
    for (std::size_t b = 0; b < options.replicates; b += chunk) {
      threads.emplace_back(run, b, std::min(b + chunk, options.replicates));
    }
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  if (std::accumulate(draws.begin(), draws.end(), std::size_t{0}) > cap) {
    throw MetricError("bootstrap_ci: redraw cap exhausted");
  }

  std::sort(values.begin(), values.end());
  const double alpha = 1.0 - options.level;
  return {*point, quantile_sorted(values, alpha / 2.0), quantile_sorted(values, 1.0 - alpha / 2.0)};
}

Report classification_report(std::span<const double> scores, std::span<const std::uint8_t> labels, double threshold,
                             const BootstrapOptions& options) {
  check_binary({scores, labels, threshold});
  const std::size_t n = scores.size();
  auto resampled = [=](auto&& fn) -> IndexedMetric {
    return [=](std::span<const std::size_t> idx) -> std::optional<double> {
      const auto s = gather(scores, idx);
      const auto y = gather(labels, idx);
      try {
        return fn(BinaryEval{s, y, threshold});
      } catch (const MetricError&) {
        return std::nullopt;
      }
    };
  };

  Report report;
  const std::size_t pos = static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(), [](auto y) { return y != 0; }));
  report["p_pos_test"] = count_row(pos);
  report["p_neg_test"] = count_row(n - pos);
  if (n == 0) {
    for (const char* key : {"auroc", "auprc", "ap", "f1", "specificity", "recall", "precision", "accuracy", "brier"}) {
      report[key] = std::nullopt;
    }
    return report;
  }

  report["auroc"] = try_bootstrap(resampled([](const BinaryEval& e) -> std::optional<double> { return auroc(e); }), n, options);
  report["auprc"] =
      try_bootstrap(resampled([](const BinaryEval& e) -> std::optional<double> { return pr_metrics(e).auprc; }), n, options);
  report["ap"] = try_bootstrap(
      resampled([](const BinaryEval& e) -> std::optional<double> { return pr_metrics(e).average_precision; }), n, options);
  report["brier"] = try_bootstrap(resampled([](const BinaryEval& e) -> std::optional<double> { return brier(e); }), n, options);
  using Field = std::optional<double> ThresholdMetrics::*;
  const std::pair<const char*, Field> fields[] = {{"f1", &ThresholdMetrics::f1},
                                                  {"specificity", &ThresholdMetrics::specificity},
                                                  {"recall", &ThresholdMetrics::recall},
                                                  {"precision", &ThresholdMetrics::precision},
                                                  {"accuracy", &ThresholdMetrics::accuracy}};
  for (const auto& [key, field] : fields) {
    report[key] = try_bootstrap(
        resampled([field](const BinaryEval& e) { return threshold_metrics(e).*field; }), n, options);
  }
  return report;
}

Report survival_report(const SurvivalEval& eval, std::span<const std::vector<double>> curves,
                       const mtlr::TimeGrid& grid, const BootstrapOptions& options, Reduction reduction) {
  const std::size_t n = eval.times.size();
  if (eval.censored.size() != n || curves.size() != n) {
    throw std::invalid_argument("survival_report: inputs differ in length");
  }
  std::vector<double> risk(n);
  for (std::size_t i = 0; i < n; ++i) risk[i] = -mtlr::restricted_mean(curves[i], grid);
  const std::span<const double> risk_view = risk;

  auto c_index = [=](std::span<const std::size_t> idx) -> std::optional<double> {
    const auto t = gather(eval.times, idx);
    const auto c = gather(eval.censored, idx);
    const auto r = gather(risk_view, idx);
    try {
      return concordance_index({t, c}, r);
    } catch (const MetricError&) {
      return std::nullopt;
    }
  };
  auto l1 = [=](bool hinge) -> IndexedMetric {
    return [=](std::span<const std::size_t> idx) -> std::optional<double> {
      const auto t = gather(eval.times, idx);
      const auto c = gather(eval.censored, idx);
      std::vector<std::vector<double>> cv(idx.size());
      for (std::size_t i = 0; i < idx.size(); ++i) cv[i] = curves[idx[i]];
      try {
        const auto losses = l1_losses({t, c}, cv, grid, reduction);
        return hinge ? losses.hinge : losses.marginal;
      } catch (const MetricError&) {
        return std::nullopt;
      }
    };
  };

  Report report;
  const std::size_t censored = static_cast<std::size_t>(
      std::count_if(eval.censored.begin(), eval.censored.end(), [](auto c) { return c != 0; }));
  report["p_pos_test"] = count_row(n - censored);
  report["p_neg_test"] = count_row(censored);
  if (n == 0) {
    report["c_index"] = report["l1_hinge"] = report["l1_marginal"] = std::nullopt;
    return report;
  }
  report["c_index"] = try_bootstrap(c_index, n, options);
  report["l1_hinge"] = try_bootstrap(l1(true), n, options);
  report["l1_marginal"] = try_bootstrap(l1(false), n, options);
  return report;
}

std::string report_to_json(const Report& report) {
  nlohmann::json doc = nlohmann::json::object();
  for (const auto& [key, row] : report) {
    if (!row) {
      doc[key] = nullptr;
    } else {
      doc[key] = {{"point", row->point}, {"ci_lo", row->ci_lo}, {"ci_hi", row->ci_hi}};
    }
  }
  return doc.dump(2) + "\n";
}

}  // namespace ets::metrics
