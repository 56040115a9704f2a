#include "ets/train/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace ets::train {

LossValue bce_with_logits(const Tensor& logits, const Tensor& targets) {
  if (logits.rank() != 2) throw ShapeError("bce: logits must be [N, K], got " + shape_to_string(logits.shape()));
  expect_shape(targets, logits.shape(), "bce targets");
  const std::size_t n = logits.dim(0);
  if (n == 0) throw std::invalid_argument("bce: empty batch");
  LossValue out{0.0, Tensor(logits.shape())};
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    const double y = targets[i];
    // log(1 + exp(-|x|)) + max(x, 0) - x y
    out.value += std::log1p(std::exp(-std::abs(x))) + std::max(x, 0.0) - x * y;
    const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    out.grad[i] = (p - y) * inv_n;
  }
  out.value *= inv_n;
  return out;
}

MtlrLossValue mtlr_minibatch_loss(const Tensor& theta, const Tensor& features,
                                  std::span<const mtlr::EncodedLabel> labels, double c, std::size_t n_train) {
  if (features.rank() != 2) throw ShapeError("mtlr loss: features must be [N, p]");
  const std::size_t b = features.dim(0);
  if (b == 0 || n_train == 0) throw std::invalid_argument("mtlr loss: empty batch or training set");
  const double scaled_c = c * static_cast<double>(b) / static_cast<double>(n_train);
  const auto obj = mtlr::nll_and_gradient(theta, mtlr::augment(features), labels, scaled_c, true);
  const double inv_b = 1.0 / static_cast<double>(b);
  MtlrLossValue out{obj.value * inv_b, Tensor(features.shape()), obj.grad_theta};
  const std::size_t p = features.dim(1);
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < p; ++j) out.grad_features.at(i, j) = obj.grad_features.at(i, j) * inv_b;
  }
  for (auto& g : out.grad_theta.values()) g *= inv_b;
  return out;
}

}  // namespace ets::train
