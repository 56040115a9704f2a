#pragma once

// Experiment configuration and its JSON form. Unknown keys are rejected and
// missing keys keep their defaults.

#include <cstdint>
#include <filesystem>
#include <string>

#include "ets/metrics/metrics.hpp"
#include "ets/model/ecg_model.hpp"
#include "ets/synth/cohort.hpp"
#include "ets/train/train.hpp"
#include "json.hpp"

namespace ets::experiment {

/// Raised for invalid configuration documents.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct EvalConfig {
  std::size_t replicates = 1000;
  double level = 0.95;
  double threshold = 0.5;
  metrics::Reduction l1_reduction = metrics::Reduction::sum;
  bool operator==(const EvalConfig&) const = default;
};

struct ExperimentConfig {
  std::filesystem::path workdir = "ets_run";
  synth::CohortSpec source;  // pre-pandemic cohort
  synth::CohortSpec target;  // COVID-era cohort, re-seeded per repetition
  model::EncoderConfig encoder;
  train::TrainConfig pretrain;
  train::TrainConfig finetune;
  EvalConfig eval;
  double dev_fraction = 0.6;
  std::size_t n_seeds = 5;
  std::uint64_t seed = 1;
  std::size_t jobs = 1;

  void validate() const;
  bool operator==(const ExperimentConfig&) const = default;
};

/// Desk-scale recipe: 20,000 single-ECG source patients with 16 codes, a
/// target cohort of about 1,000 ECGs, the lean encoder and five repetitions.
ExperimentConfig default_config();

nlohmann::json train_config_to_json(const train::TrainConfig& config);
train::TrainConfig train_config_from_json(const nlohmann::json& doc, const train::TrainConfig& base);

nlohmann::json config_to_json(const ExperimentConfig& config);
/// Overlays `doc` on default_config(), then validates. Throws ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& doc);
ExperimentConfig load_config(const std::filesystem::path& path);

}  // namespace ets::experiment
