#pragma once

// Minibatch training with best-epoch selection, source pretraining and the
// transfer surgery applied before fine-tuning.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ets/model/ecg_model.hpp"
#include "ets/train/optim.hpp"

namespace ets::train {

struct TrainConfig {
  double initial_lr = 1e-3;
  double floor_lr = 1e-6;
  std::size_t patience_lr = 9;
  std::size_t patience_stop = 9;
  std::size_t batch_size = 64;
  std::size_t max_epochs = 100;
  double tuning_fraction = 0.1;  // patient-grouped share of the development set
  double mtlr_c = 1.0;
  std::uint64_t seed = 0;

  ScheduleConfig schedule() const { return {initial_lr, floor_lr, patience_lr, patience_stop}; }
  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double tuning_loss = 0.0;
  double lr = 0.0;
  bool operator==(const EpochRecord&) const = default;
};
using History = std::vector<EpochRecord>;

struct TrainResult {
  History history;
  std::size_t best_epoch = 0;
  double best_tuning_loss = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Binary targets [N, outputs] for a classifier kind: diagnosis reads the
/// COVID label, mortality30 the 30-day outcome, multilabel the source codes.
/// Throws synth::DataError when a record lacks the label.
Tensor classification_targets(const synth::Cohort& cohort, model::ModelKind kind, std::size_t outputs);
std::vector<mtlr::SurvivalLabel> survival_targets(const synth::Cohort& cohort);

/// MTLR time grid built from the survival labels of `cohort`.
mtlr::TimeGrid isd_grid(const synth::Cohort& cohort);

/// Trains `model` on `dev`, split by patient into training and tuning parts.
/// Each epoch shuffles the training rows, takes Adam steps on minibatches and
/// evaluates the tuning loss in eval mode; the schedule acts on that loss.
/// On return the model holds the parameters of the best tuning epoch.
/// When the trunk (or the whole network up to the MTLR block) is frozen, its
/// outputs are computed once and reused. Throws NumericalError on a
/// non-finite loss.
TrainResult train(model::EcgModel& model, const synth::Cohort& dev, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

/// Source-task pretraining: multilabel codes, all-cause 30-day mortality or
/// all-cause ISD. Otherwise identical to train().
TrainResult pretrain_source(model::EcgModel& model, const synth::Cohort& source, const TrainConfig& config,
                            const EpochCallback& on_epoch = {});

/// Prepares a pretrained model for fine-tuning on `target`. Classification:
/// all pretrained parameters frozen and a new FC -> ReLU -> dense head
/// appended. ISD: everything frozen except a fresh MTLR block on `grid`.
/// Throws std::invalid_argument for incompatible kinds.
model::EcgModel freeze_for_transfer(model::EcgModel source, model::ModelKind target,
                                    std::optional<mtlr::TimeGrid> grid, std::uint64_t seed);

/// Folds the per-feature mean and standard deviation of the frozen fused
/// features over `population` into the first layer of a fresh transfer head,
/// so the head starts on standardized inputs. Labels are not used.
void standardize_head_inputs(model::EcgModel& model, const synth::Cohort& population, std::size_t batch_size);

}  // namespace ets::train
