#pragma once

// Stages of the transfer experiment: pretraining on the source cohort,
// fine-tuning with and without transfer, and holdout evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ets/experiment/config.hpp"
#include "ets/train/checkpoint.hpp"

namespace ets::experiment {

using Log = std::function<void(const std::string&)>;

enum class Arm { scratch, transfer };
std::string to_string(Arm arm);

model::ModelKind target_kind(synth::Task task);
/// Source task whose encoder is transferred to `task`: multilabel codes for
/// diagnosis, all-cause 30-day mortality for mortality30, all-cause ISD for isd.
model::ModelKind source_kind(synth::Task task);
synth::Task task_from_string(const std::string& name);
std::string to_string(synth::Task task);

/// Records a model for `task` trains on: every ECG for diagnosis, ECGs of
/// positive episodes for the mortality tasks.
synth::Cohort training_population(const synth::Cohort& dev, synth::Task task);

/// Seeds and splits shared by the CLI stages and reproduce(), so a stage run
/// by hand on repetition 0 matches the corresponding reproduce() stage.
std::uint64_t source_seed(const ExperimentConfig& config, model::ModelKind kind);
std::uint64_t finetune_seed(const ExperimentConfig& config, std::size_t repetition, synth::Task task, Arm arm);
std::uint64_t eval_seed(const ExperimentConfig& config, std::size_t repetition, synth::Task task);
synth::CohortSpec target_spec(const ExperimentConfig& config, std::size_t repetition);
std::pair<synth::Cohort, synth::Cohort> dev_holdout(const synth::Cohort& cohort, const ExperimentConfig& config,
                                                    std::size_t repetition);

struct Trained {
  model::EcgModel model;
  train::History history;
};

/// Builds and trains the source model for `kind` on `source`.
Trained pretrain(const synth::Cohort& source, model::ModelKind kind, const ExperimentConfig& config,
                 std::uint64_t seed, const Log& log = {});

/// Result of the freeze audit run after a transfer fine-tune.
struct FreezeAudit {
  bool frozen_identical = true;  // every frozen block byte-equal to the source
  std::size_t frozen_blocks = 0;
  std::size_t trainable = 0;     // trainable parameter count after surgery
  std::size_t head_only = 0;     // parameter count of the new head alone
};

struct FineTuned {
  Trained trained;
  std::optional<FreezeAudit> audit;  // transfer arm only
};

/// Fine-tunes for `task` on the development cohort. The transfer arm starts
/// from `source` (a loaded source checkpoint); the scratch arm ignores it.
FineTuned finetune(const synth::Cohort& dev, synth::Task task, Arm arm, std::optional<train::Checkpoint> source,
                   const ExperimentConfig& config, std::uint64_t seed, const Log& log = {});

struct Evaluation {
  metrics::Report report;
  std::string headline;  // auroc or c_index
  // isd only
  std::vector<std::string> patient_ids;
  std::vector<std::vector<double>> curves;
  std::optional<metrics::KaplanMeier> km;
};

/// Scores the holdout ECGs chosen by select_eval_ecgs and builds the report
/// with bootstrap intervals. Throws std::invalid_argument when the model kind
/// does not match the task.
Evaluation evaluate(model::EcgModel& model, const synth::Cohort& holdout, synth::Task task,
                    const EvalConfig& eval, std::uint64_t seed, std::size_t jobs);

void write_curves_csv(const Evaluation& evaluation, const mtlr::TimeGrid& grid, const std::filesystem::path& path);
void write_km_csv(const metrics::KaplanMeier& km, const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

struct ComparisonRow {
  synth::Task task;
  Arm arm;
  std::size_t repetition = 0;
  std::string metric;
  std::optional<metrics::Interval> value;
};

struct ReproduceResult {
  std::vector<ComparisonRow> rows;
  std::vector<FreezeAudit> audits;
  std::string csv;
  std::string markdown;
};

/// Mean headline metric per (task, arm) over repetitions with a defined value.
std::optional<double> arm_mean(const std::vector<ComparisonRow>& rows, synth::Task task, Arm arm);

/// Full experiment: one source cohort and three source models, then for each
/// repetition a freshly seeded target cohort, a patient-grouped split, both
/// arms for all three tasks, and holdout evaluation. Artifacts land in
/// config.workdir; comparison.csv and comparison.md hold the paired table.
ReproduceResult reproduce(const ExperimentConfig& config, const Log& log = {});

}  // namespace ets::experiment
