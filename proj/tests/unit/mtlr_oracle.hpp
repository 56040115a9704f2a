#pragma once

// Straight-line reference computations for the MTLR tests. Probabilities are
// obtained by enumerating every legal binary status sequence and scoring it
// with the raw definition sum_i y_i * theta_i . x.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "ets/mtlr/mtlr.hpp"
#include "ets/rng.hpp"

namespace ets::mtlr::testing {

inline double sequence_numerator(const Tensor& theta, const std::vector<double>& x,
                                 const std::vector<std::uint8_t>& y) {
  double score = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!y[i]) continue;
    for (std::size_t j = 0; j < x.size(); ++j) score += theta.at(i, j) * x[j];
  }
  return std::exp(score);
}

inline std::vector<double> enumerate_sequence_probabilities(const Tensor& theta, const std::vector<double>& x) {
  const std::size_t m = theta.dim(0);
  std::vector<double> num(m + 1);
  double z = 0.0;
  for (std::size_t k = 0; k <= m; ++k) {
    std::vector<std::uint8_t> y(m, 0);
    for (std::size_t i = k; i < m; ++i) y[i] = 1;
    num[k] = sequence_numerator(theta, x, y);
    z += num[k];
  }
  for (auto& v : num) v /= z;
  return num;
}

/// Penalized negative log-likelihood from the enumeration oracle.
inline double reference_objective(const Tensor& theta, const Tensor& x_aug, const std::vector<EncodedLabel>& labels,
                                  double c) {
  const std::size_t w = theta.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < labels.size(); ++r) {
    std::vector<double> x(x_aug.data() + r * w, x_aug.data() + (r + 1) * w);
    const auto p = enumerate_sequence_probabilities(theta, x);
    double mass = 0.0;
    for (std::size_t k = labels[r].first; k <= labels[r].last; ++k) mass += p[k];
    total -= std::log(mass);
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < theta.dim(0); ++i)
    for (std::size_t j = 0; j + 1 < w; ++j) sq += theta.at(i, j) * theta.at(i, j);
  return total + 0.5 * c * sq;
}

struct Instance {
  Tensor theta;
  Tensor features;  // augmented
  std::vector<EncodedLabel> labels;
  double c = 0.0;
};

/// m <= 5, p <= 8, roughly a third of the records censored.
inline Instance random_instance(Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t m = 1 + uniform_index(rng, 5);
  const std::size_t p = 1 + uniform_index(rng, 8);
  const std::size_t n = 1 + uniform_index(rng, 6);
  Instance inst;
  inst.theta = Tensor({m, p + 1});
  for (auto& v : inst.theta.values()) v = normal(rng);
  inst.features = Tensor({n, p + 1});
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < p; ++j) inst.features.at(r, j) = normal(rng);
    inst.features.at(r, p) = 1.0;
    const std::size_t k = uniform_index(rng, m + 1);
    inst.labels.push_back(uniform01(rng) < 0.35 ? EncodedLabel{k, m} : EncodedLabel{k, k});
  }
  inst.c = uniform01(rng) * 2.0;
  return inst;
}

inline double relative_error(const std::vector<double>& a, const std::vector<double>& b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-8});
}

inline double gradient_relative_error(const Instance& inst, double h) {
  const auto obj = nll_and_gradient(inst.theta, inst.features, inst.labels, inst.c);
  std::vector<double> numeric;
  Tensor theta = inst.theta;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = theta[i];
    theta[i] = saved + h;
    const double up = reference_objective(theta, inst.features, inst.labels, inst.c);
    theta[i] = saved - h;
    const double down = reference_objective(theta, inst.features, inst.labels, inst.c);
    theta[i] = saved;
    numeric.push_back((up - down) / (2.0 * h));
  }
  const auto g = obj.grad_theta.values();
  return relative_error(std::vector<double>(g.begin(), g.end()), numeric);
}

inline double feature_gradient_relative_error(const Instance& inst, double h) {
  const auto obj = nll_and_gradient(inst.theta, inst.features, inst.labels, inst.c, true);
  std::vector<double> numeric;
  Tensor x = inst.features;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = reference_objective(inst.theta, x, inst.labels, inst.c);
    x[i] = saved - h;
    const double down = reference_objective(inst.theta, x, inst.labels, inst.c);
    x[i] = saved;
    numeric.push_back((up - down) / (2.0 * h));
  }
  const auto g = obj.grad_features.values();
  return relative_error(std::vector<double>(g.begin(), g.end()), numeric);
}

}  // namespace ets::mtlr::testing
