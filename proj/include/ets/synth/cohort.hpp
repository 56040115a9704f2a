#pragma once

// Synthetic ECG cohorts with planted, label-dependent morphology.
//
// Each patient draws a latent vector z that sets heart rate and wave
// amplitudes and also drives the hazard of death, so the tracing carries
// information about survival. A COVID-positive episode adds an ST offset on
// a fixed lead group; synthetic source codes add their own localized changes,
// several of them ST offsets on overlapping leads.

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ets/mtlr/mtlr.hpp"
#include "ets/tensor.hpp"

namespace ets::synth {

inline constexpr std::size_t kLeads = 12;
inline constexpr std::size_t kModelSamples = 4096;
inline constexpr double kSamplingHz = 500.0;
inline constexpr std::size_t kLatentDim = 4;

/// Raised for unreadable or inconsistent cohort containers.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CohortSpec {
  std::size_t n_patients = 1000;
  double ecgs_per_patient_mean = 1.5;  // 1 + geometric
  double new_episode_prob = 0.3;
  double prevalence = 0.0624;          // patient level, may be 0 or 1
  double later_episode_positive_prob = 0.5;
  double mortality_rate_30d = 0.1179;  // among positive patients
  double covid_log_hazard_ratio = 1.0;
  double weibull_shape = 0.7;
  double censor_rate = 0.001;          // per day
  double followup_days = 365.0;
  std::size_t n_source_labels = 16;
  double source_label_rate = 0.12;
  double effect_size = 0.1;            // mV, ST offset of a positive episode
  double source_effect_size = 0.12;    // mV
  double st_sd = 0.04;                 // patient-level ST baseline spread, mV
  double noise_sd = 0.05;              // mV
  std::size_t raw_samples = 5000;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const CohortSpec&) const = default;
};

/// Everything the renderer needs about one patient.
struct PatientState {
  std::array<double, kLatentDim> z{};
  double age = 65.0;
  std::uint8_t sex = 0;
  bool positive = false;
  std::array<double, kLeads> st_baseline{};
  std::vector<std::uint8_t> codes;  // K source codes
  mtlr::SurvivalLabel survival;
};

struct RecordMeta {
  std::string patient_id;
  std::string episode_id;
  std::uint32_t acquisition_index = 0;
  double age = 65.0;
  std::uint8_t sex = 0;
  std::optional<std::uint8_t> label_covid;
  std::optional<mtlr::SurvivalLabel> survival;
  std::vector<std::uint8_t> source_labels;
  // Rendering key: patient index and ECG ordinal within the patient.
  std::uint64_t patient_index = 0;
  std::uint32_t ecg_ordinal = 0;
};

/// Supplies preprocessed 12 x 4096 voltages for record i of the full cohort.
class VoltageSource {
 public:
  virtual ~VoltageSource() = default;
  virtual Tensor load(const RecordMeta& meta, std::size_t record) const = 0;
};

/// Voltages held in memory, indexed by record position.
std::shared_ptr<const VoltageSource> memory_source(std::vector<Tensor> voltages);

class Cohort {
 public:
  Cohort() = default;
  Cohort(CohortSpec spec, std::vector<RecordMeta> records, std::shared_ptr<const VoltageSource> source);

  const CohortSpec& spec() const { return spec_; }
  std::size_t size() const { return index_.size(); }
  bool empty() const { return index_.empty(); }
  const RecordMeta& meta(std::size_t i) const { return (*records_)[index_.at(i)]; }
  Tensor voltages(std::size_t i) const;

  /// View onto the given rows, sharing storage.
  Cohort subset(std::span<const std::size_t> rows) const;
  /// Copies all voltages into memory.
  Cohort materialize() const;

  std::size_t patient_count() const;

 private:
  CohortSpec spec_;
  std::shared_ptr<const std::vector<RecordMeta>> records_;
  std::shared_ptr<const VoltageSource> source_;
  std::vector<std::size_t> index_;
};

/// Deterministic under spec.seed; voltages are rendered on demand.
Cohort generate_cohort(const CohortSpec& spec);

/// Draws the patients of a cohort (exposed for tests).
std::vector<PatientState> draw_patients(const CohortSpec& spec);

/// Raw 12 x raw_samples tracing plus the R-peak sample positions.
struct RenderedEcg {
  Tensor raw;
  std::vector<double> r_peaks;  // in samples
};
RenderedEcg render_ecg(const CohortSpec& spec, const PatientState& patient, const RecordMeta& meta);

/// Leads carrying the ST offset of a positive episode.
std::span<const std::size_t> diagnosis_leads();

/// Subtracts each lead's mean, then crops or right-zero-pads to 4096.
Tensor preprocess(const Tensor& raw);

/// manifest.json plus voltages.bin (little-endian doubles in manifest order).
void save_cohort(const Cohort& cohort, const std::filesystem::path& dir);
Cohort load_cohort(const std::filesystem::path& dir);

/// 60/40 patient-grouped split. Returns (development, holdout).
std::pair<Cohort, Cohort> split_by_patient(const Cohort& cohort, double dev_fraction, std::uint64_t seed);

enum class Task { diagnosis, mortality30, isd };

/// Diagnosis: first ECG of every episode. Mortality tasks: for each patient
/// with a positive episode, the first ECG of one positive episode chosen by
/// `seed`. Returns row indices into `cohort`.
std::vector<std::size_t> select_eval_ecgs(const Cohort& cohort, Task task, std::uint64_t seed);

/// Binary 30-day mortality label derived from the survival label.
std::uint8_t mortality30_label(const mtlr::SurvivalLabel& s);

}  // namespace ets::synth
