#pragma once

#include <cstddef>
#include <span>

#include "ets/mtlr/mtlr.hpp"

namespace ets::train {

struct LossValue {
  double value = 0.0;
  Tensor grad;  // with respect to the model output
};

/// Binary cross-entropy on logits [N, K], summed over the K labels and
/// averaged over the N rows. K = 1 is plain binary cross-entropy.
LossValue bce_with_logits(const Tensor& logits, const Tensor& targets);

struct MtlrLossValue {
  double value = 0.0;
  Tensor grad_features;  // [N, zdim]
  Tensor grad_theta;     // [m, zdim + 1]
};

/// Minibatch MTLR objective: the batch negative log-likelihood plus the
/// penalty rescaled to C * B / n_train, all divided by the batch size B, so
/// that the minibatch terms average to the full-data objective over n_train.
MtlrLossValue mtlr_minibatch_loss(const Tensor& theta, const Tensor& features,
                                  std::span<const mtlr::EncodedLabel> labels, double c, std::size_t n_train);

}  // namespace ets::train
