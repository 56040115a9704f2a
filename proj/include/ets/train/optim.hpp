#pragma once

// Adam and the plateau learning-rate schedule.

#include <cstddef>
#include <map>
#include <span>
#include <string>

#include "ets/nn/layers.hpp"

namespace ets::train {

struct AdamMoments {
  Tensor first;
  Tensor second;
};

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t step = 0;
  std::map<std::string, AdamMoments> moments;  // keyed by parameter name
};

/// One bias-corrected Adam update of every trainable parameter reached by
/// `visit`. Frozen parameters are skipped. Moments are created on first use;
/// a later shape mismatch throws ShapeError.
void adam_step(const std::function<void(const nn::ParameterVisitor&)>& visit, AdamState& state, double lr);

struct ScheduleConfig {
  double initial_lr = 1e-3;
  double floor_lr = 1e-6;
  std::size_t patience_lr = 9;
  std::size_t patience_stop = 9;
  void validate() const;
};

struct ScheduleDecision {
  double lr = 0.0;
  bool stop = false;
  std::size_t epochs_since_best = 0;
};

/// Replays the tuning-loss history through the schedule automaton. An epoch
/// improves when its loss is strictly below every earlier one. After
/// `patience_lr` consecutive non-improving epochs the rate drops once to the
/// floor and the counter restarts; after `patience_stop` further consecutive
/// non-improving epochs the stop flag is set. Throws on an empty history.
ScheduleDecision lr_schedule_update(std::span<const double> tuning_losses, double current_lr,
                                    const ScheduleConfig& config);

}  // namespace ets::train
