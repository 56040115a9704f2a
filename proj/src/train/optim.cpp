#include "ets/train/optim.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace ets::train {

void adam_step(const std::function<void(const nn::ParameterVisitor&)>& visit, AdamState& state, double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(state.beta1, t);
  const double correction2 = 1.0 - std::pow(state.beta2, t);
  visit([&](const std::string& name, nn::Parameter& p) {
    if (p.frozen) return;
    expect_shape(p.grad, p.value.shape(), "adam gradient");
    auto [it, fresh] = state.moments.try_emplace(name);
    AdamMoments& m = it->second;
    if (fresh) {
      m.first = Tensor(p.value.shape());
      m.second = Tensor(p.value.shape());
    }
    expect_shape(m.first, p.value.shape(), "adam first moment");
    expect_shape(m.second, p.value.shape(), "adam second moment");
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const double g = p.grad[i];
      m.first[i] = state.beta1 * m.first[i] + (1.0 - state.beta1) * g;
      m.second[i] = state.beta2 * m.second[i] + (1.0 - state.beta2) * g * g;
      const double mhat = m.first[i] / correction1;
      const double vhat = m.second[i] / correction2;
      p.value[i] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  });
}

void ScheduleConfig::validate() const {
  if (!(floor_lr > 0.0 && floor_lr <= initial_lr)) throw std::invalid_argument("schedule: need 0 < floor_lr <= initial_lr");
  if (patience_lr < 1 || patience_stop < 1) throw std::invalid_argument("schedule: patience values must be >= 1");
}

ScheduleDecision lr_schedule_update(std::span<const double> tuning_losses, double current_lr,
                                    const ScheduleConfig& config) {
  if (tuning_losses.empty()) throw std::invalid_argument("lr_schedule_update: empty history");
  double best = std::numeric_limits<double>::infinity();
  std::size_t since = 0;
  bool dropped = false;
  bool stop = false;
  for (double loss : tuning_losses) {
    if (loss < best) {
      best = loss;
      since = 0;
      continue;
    }
    ++since;
    if (!dropped && since >= config.patience_lr) {
      dropped = true;
      since = 0;
    } else if (dropped && since >= config.patience_stop) {
      stop = true;
    }
  }
  return {dropped ? config.floor_lr : current_lr, stop, since};
}

}  // namespace ets::train
