#include "ets/synth/cohort.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <set>

#include "ets/rng.hpp"
#include "ets/synth/spec_json.hpp"
#include "json.hpp"

namespace ets::synth {
namespace {

constexpr std::uint64_t kPatientKey = 0x70617469656e74ULL;
constexpr std::uint64_t kEcgKey = 0x656367ULL;
constexpr std::uint64_t kCalibrationKey = 0x63616c6962ULL;
constexpr std::uint64_t kSplitKey = 0x73706c6974ULL;
constexpr std::uint64_t kSelectKey = 0x73656c656374ULL;
constexpr std::uint64_t kTableSeed = 0x45435447ULL;
constexpr int kGeneratorVersion = 2;
constexpr int kContainerVersion = 1;

constexpr std::array<std::size_t, 4> kDiagnosisLeads{7, 8, 9, 10};
constexpr std::array<double, kLatentDim> kHazardWeights{0.6, 0.5, -0.4, 0.4};
constexpr double kAgeHazard = 0.03;

enum Wave { kP, kQ, kR, kS, kST, kT, kWaves };

/// Fixed projection of each wave onto the 12 leads; aVR is inverted.
const std::array<std::array<double, kWaves>, kLeads>& lead_gains() {
  static const auto table = [] {
    std::array<std::array<double, kWaves>, kLeads> g{};
    Rng rng(kTableSeed);
    for (std::size_t l = 0; l < kLeads; ++l) {
      for (std::size_t w = 0; w < kWaves; ++w) g[l][w] = 0.4 + 0.8 * uniform01(rng);
      g[l][kST] = 1.0;
      if (l == 3) {
        for (std::size_t w = 0; w < kWaves; ++w) {
          if (w != kST) g[l][w] = -g[l][w];
        }
      }
    }
    return g;
  }();
  return table;
}

/// Per-code latent loadings: code prevalence follows z.
const std::vector<std::array<double, kLatentDim>>& code_loadings(std::size_t k) {
  static std::map<std::size_t, std::vector<std::array<double, kLatentDim>>> cache;
  static std::mutex mutex;
  std::lock_guard lock(mutex);
  auto& table = cache[k];
  if (table.empty()) {
    Rng rng(kTableSeed + 1);
    std::normal_distribution<double> normal(0.0, 0.7);
    table.resize(k);
    for (auto& row : table) {
      for (auto& v : row) v = normal(rng);
    }
  }
  return table;
}

std::vector<std::size_t> code_leads(std::size_t code) {
  static const std::array<std::vector<std::size_t>, 8> base{{{7, 8, 9, 10},
                                                              {1, 2, 5},
                                                              {0, 4, 10, 11},
                                                              {6, 7, 8, 9, 10, 11},
                                                              {},
                                                              {},
                                                              {6, 7, 8},
                                                              {8, 9, 10, 11}}};
  std::vector<std::size_t> leads = base[code % 8];
  const std::size_t shift = 3 * (code / 8);
  for (auto& l : leads) l = (l + shift) % kLeads;
  return leads;
}

double draw_age(Rng& rng) {
  std::normal_distribution<double> normal(63.0, 15.0);
  return std::clamp(normal(rng), 18.0, 95.0);
}

double linear_predictor(const std::array<double, kLatentDim>& z, double age, bool positive, const CohortSpec& spec) {
  double eta = kAgeHazard * (age - 65.0) + (positive ? spec.covid_log_hazard_ratio : 0.0);
  for (std::size_t i = 0; i < kLatentDim; ++i) eta += kHazardWeights[i] * z[i];
  return eta;
}

/// Weibull scale so that a positive patient dies within 30 days with
/// probability mortality_rate_30d, averaged over the patient distribution.
double calibrate_scale(const CohortSpec& spec) {
  Rng rng = make_stream(spec.seed, {kCalibrationKey});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> risk(20000);
  for (auto& r : risk) {
    std::array<double, kLatentDim> z{};
    for (auto& v : z) v = normal(rng);
    r = std::exp(linear_predictor(z, draw_age(rng), true, spec));
  }
  auto rate_at = [&](double log_scale) {
    const double base = std::pow(30.0 / std::exp(log_scale), spec.weibull_shape);
    double total = 0.0;
    for (double r : risk) total += 1.0 - std::exp(-base * r);
    return total / static_cast<double>(risk.size());
  };
  double lo = -20.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (rate_at(mid) > spec.mortality_rate_30d ? lo : hi) = mid;
  }
  return std::exp(0.5 * (lo + hi));
}

std::size_t draw_ecg_count(Rng& rng, double mean) {
  if (mean <= 1.0) return 1;
  const double p = 1.0 / mean;
  const double u = 1.0 - uniform01(rng);  // (0, 1]
  return 1 + static_cast<std::size_t>(std::floor(std::log(u) / std::log1p(-p)));
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  return h;
}

std::string patient_name(std::uint64_t p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "P%06llu", static_cast<unsigned long long>(p));
  return buf;
}

std::string episode_name(std::uint64_t p, std::size_t e) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "P%06llu-E%02zu", static_cast<unsigned long long>(p), e);
  return buf;
}

void add_bump(std::vector<double>& basis, double center, double sigma) {
  const double lo = std::max(0.0, std::floor(center - 4.0 * sigma));
  const double hi = std::min(static_cast<double>(basis.size()) - 1.0, std::ceil(center + 4.0 * sigma));
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (auto i = static_cast<std::ptrdiff_t>(lo); i <= static_cast<std::ptrdiff_t>(hi); ++i) {
    const double d = static_cast<double>(i) - center;
    basis[static_cast<std::size_t>(i)] += std::exp(-d * d * inv);
  }
}

class SyntheticSource final : public VoltageSource {
 public:
  SyntheticSource(CohortSpec spec, std::vector<PatientState> patients)
      : spec_(std::move(spec)), patients_(std::move(patients)) {}
  Tensor load(const RecordMeta& meta, std::size_t) const override {
    return preprocess(render_ecg(spec_, patients_.at(meta.patient_index), meta).raw);
  }

 private:
  CohortSpec spec_;
  std::vector<PatientState> patients_;
};

class MemorySource final : public VoltageSource {
 public:
  explicit MemorySource(std::vector<Tensor> data) : data_(std::move(data)) {}
  Tensor load(const RecordMeta&, std::size_t record) const override { return data_.at(record); }

 private:
  std::vector<Tensor> data_;
};

constexpr std::size_t kBlockValues = kLeads * kModelSamples;
constexpr std::size_t kBlockBytes = kBlockValues * sizeof(double);

void to_little_endian(double* values, std::size_t n) {
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, values + i, sizeof bits);
      bits = __builtin_bswap64(bits);
      std::memcpy(values + i, &bits, sizeof bits);
    }
  }
}

class FileSource final : public VoltageSource {
 public:
  explicit FileSource(std::filesystem::path path) : path_(std::move(path)) {}
  Tensor load(const RecordMeta&, std::size_t record) const override {
    std::ifstream in(path_, std::ios::binary);
    if (!in) throw DataError("cannot open " + path_.string());
    in.seekg(static_cast<std::streamoff>(record * kBlockBytes));
    Tensor out({kLeads, kModelSamples});
    in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(kBlockBytes));
    if (in.gcount() != static_cast<std::streamsize>(kBlockBytes)) {
      throw DataError("voltages.bin is truncated at record " + std::to_string(record));
    }
    to_little_endian(out.data(), kBlockValues);
    if (!out.all_finite()) throw DataError("non-finite voltage in record " + std::to_string(record));
    return out;
  }

 private:
  std::filesystem::path path_;
};

}  // namespace

void CohortSpec::validate() const {
  auto fail = [](const std::string& what) { throw std::invalid_argument("cohort spec: " + what); };
  if (n_patients < 2) fail("n_patients must be at least 2");
  if (!(ecgs_per_patient_mean >= 1.0)) fail("ecgs_per_patient_mean must be >= 1");
  if (!(prevalence >= 0.0 && prevalence <= 1.0)) fail("prevalence must be in [0, 1]");
  for (double r : {new_episode_prob, later_episode_positive_prob}) {
    if (!(r >= 0.0 && r <= 1.0)) fail("episode probabilities must be in [0, 1]");
  }
  if (!(mortality_rate_30d > 0.0 && mortality_rate_30d < 1.0)) fail("mortality_rate_30d must be in (0, 1)");
  if (!(source_label_rate > 0.0 && source_label_rate < 1.0)) fail("source_label_rate must be in (0, 1)");
  if (!(censor_rate >= 0.0 && std::isfinite(censor_rate))) fail("censor_rate must be >= 0");
  if (!(followup_days > 0.0)) fail("followup_days must be positive");
  if (!(weibull_shape > 0.0)) fail("weibull_shape must be positive");
  if (!(effect_size >= 0.0) || !(source_effect_size >= 0.0)) fail("effect sizes must be >= 0");
  if (!(st_sd >= 0.0) || !(noise_sd >= 0.0)) fail("noise levels must be >= 0");
  if (!std::isfinite(covid_log_hazard_ratio)) fail("covid_log_hazard_ratio must be finite");
  if (raw_samples < 1) fail("raw_samples must be positive");
}

Cohort::Cohort(CohortSpec spec, std::vector<RecordMeta> records, std::shared_ptr<const VoltageSource> source)
    : spec_(std::move(spec)),
      records_(std::make_shared<const std::vector<RecordMeta>>(std::move(records))),
      source_(std::move(source)),
      index_(records_->size()) {
  std::iota(index_.begin(), index_.end(), std::size_t{0});
}

Tensor Cohort::voltages(std::size_t i) const {
  const std::size_t r = index_.at(i);
  return source_->load((*records_)[r], r);
}

Cohort Cohort::subset(std::span<const std::size_t> rows) const {
  Cohort out = *this;
  out.index_.clear();
  out.index_.reserve(rows.size());
  for (std::size_t r : rows) out.index_.push_back(index_.at(r));
  return out;
}

Cohort Cohort::materialize() const {
  std::vector<RecordMeta> metas;
  std::vector<Tensor> data;
  metas.reserve(size());
  data.reserve(size());
  for (std::size_t i = 0; i < size(); ++i) {
    metas.push_back(meta(i));
    data.push_back(voltages(i));
  }
  return Cohort(spec_, std::move(metas), std::make_shared<MemorySource>(std::move(data)));
}

std::size_t Cohort::patient_count() const {
  std::set<std::string> ids;
  for (std::size_t i = 0; i < size(); ++i) ids.insert(meta(i).patient_id);
  return ids.size();
}

std::shared_ptr<const VoltageSource> memory_source(std::vector<Tensor> voltages) {
  return std::make_shared<MemorySource>(std::move(voltages));
}

std::span<const std::size_t> diagnosis_leads() { return kDiagnosisLeads; }

std::uint8_t mortality30_label(const mtlr::SurvivalLabel& s) { return !s.censored && s.time <= 30.0 ? 1 : 0; }

std::vector<PatientState> draw_patients(const CohortSpec& spec) {
  spec.validate();
  const double scale = calibrate_scale(spec);
  const auto& loadings = code_loadings(spec.n_source_labels);
  const double base_logit = std::log(spec.source_label_rate / (1.0 - spec.source_label_rate));
  std::vector<PatientState> patients(spec.n_patients);
  for (std::size_t p = 0; p < spec.n_patients; ++p) {
    Rng rng = make_stream(spec.seed, {kPatientKey, p});
    std::normal_distribution<double> normal(0.0, 1.0);
    PatientState& s = patients[p];
    s.age = draw_age(rng);
    s.sex = uniform01(rng) < 0.5 ? 1 : 0;
    for (auto& v : s.z) v = normal(rng);
    s.positive = uniform01(rng) < spec.prevalence;
    for (auto& v : s.st_baseline) v = spec.st_sd * normal(rng);
    s.codes.resize(spec.n_source_labels);
    for (std::size_t k = 0; k < spec.n_source_labels; ++k) {
      double logit = base_logit;
      for (std::size_t i = 0; i < kLatentDim; ++i) logit += loadings[k][i] * s.z[i];
      s.codes[k] = uniform01(rng) < 1.0 / (1.0 + std::exp(-logit)) ? 1 : 0;
    }
    const double e = -std::log(1.0 - uniform01(rng));
    const double eta = linear_predictor(s.z, s.age, s.positive, spec);
    const double event = scale * std::pow(e / std::exp(eta), 1.0 / spec.weibull_shape);
    double censor = spec.followup_days;
    if (spec.censor_rate > 0.0) censor = std::min(censor, -std::log(1.0 - uniform01(rng)) / spec.censor_rate);
    // Whole days, at least one, as recorded in administrative data.
    if (event <= censor) {
      s.survival = {std::max(1.0, std::ceil(event)), false};
    } else {
      s.survival = {std::max(1.0, std::floor(censor)), true};
    }
  }
  return patients;
}

Cohort generate_cohort(const CohortSpec& spec) {
  auto patients = draw_patients(spec);
  std::vector<RecordMeta> records;
  for (std::size_t p = 0; p < patients.size(); ++p) {
    const PatientState& s = patients[p];
    Rng rng = make_stream(spec.seed, {kPatientKey, p, 1});
    const std::size_t n_ecg = draw_ecg_count(rng, spec.ecgs_per_patient_mean);
    std::size_t episode = 0;
    std::uint32_t acquisition = 0;
    bool episode_positive = s.positive;
    for (std::size_t j = 0; j < n_ecg; ++j) {
      if (j > 0 && uniform01(rng) < spec.new_episode_prob) {
        ++episode;
        acquisition = 0;
        episode_positive = s.positive && uniform01(rng) < spec.later_episode_positive_prob;
      }
      RecordMeta m;
      m.patient_id = patient_name(p);
      m.episode_id = episode_name(p, episode);
      m.acquisition_index = acquisition++;
      m.age = s.age;
      m.sex = s.sex;
      m.label_covid = episode_positive ? 1 : 0;
      m.survival = s.survival;
      m.source_labels = s.codes;
      m.patient_index = p;
      m.ecg_ordinal = static_cast<std::uint32_t>(j);
      records.push_back(std::move(m));
    }
  }
  return Cohort(spec, std::move(records), std::make_shared<SyntheticSource>(spec, std::move(patients)));
}

RenderedEcg render_ecg(const CohortSpec& spec, const PatientState& patient, const RecordMeta& meta) {
  Rng rng = make_stream(spec.seed, {kEcgKey, meta.patient_index, meta.ecg_ordinal});
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = spec.raw_samples;
  const auto& gains = lead_gains();
  const bool covid = meta.label_covid.value_or(0) != 0;
  const double src = spec.source_effect_size;

  const double hr = std::clamp(70.0 + 8.0 * patient.z[0] + 3.0 * normal(rng), 40.0, 130.0);
  const double rr = 60.0 / hr;
  double qrs_sigma = 0.012 * std::exp(0.12 * patient.z[3]);
  std::array<double, kWaves> amp{0.12, -0.1, std::exp(0.15 * patient.z[1]), -0.25, 1.0,
                                 std::max(0.05, 0.3 * (1.0 + 0.25 * patient.z[2]))};
  for (std::size_t w = 0; w < kWaves; ++w) {
    if (w != kST) amp[w] *= 1.0 + 0.05 * normal(rng);
  }

  std::array<std::array<double, kWaves>, kLeads> lead_amp{};
  for (std::size_t l = 0; l < kLeads; ++l) {
    for (std::size_t w = 0; w < kWaves; ++w) lead_amp[l][w] = gains[l][w] * amp[w];
    lead_amp[l][kST] = patient.st_baseline[l];
  }
  if (covid) {
    for (std::size_t l : kDiagnosisLeads) lead_amp[l][kST] += spec.effect_size;
  }
  for (std::size_t k = 0; k < patient.codes.size(); ++k) {
    if (!patient.codes[k]) continue;
    const auto leads = code_leads(k);
    switch (k % 8) {
      case 0:
      case 1:
      case 7:
        for (std::size_t l : leads) lead_amp[l][kST] += src;
        break;
      case 2:
        for (std::size_t l : leads) lead_amp[l][kST] -= src;
        break;
      case 3:
        for (std::size_t l : leads) lead_amp[l][kT] *= std::max(-1.0, 1.0 - 4.0 * src);
        break;
      case 4:
        qrs_sigma *= 1.0 + 2.5 * src;
        break;
      case 5:
        for (auto& row : lead_amp) row[kP] *= 1.0 + 5.0 * src;
        break;
      case 6:
        for (std::size_t l : leads) lead_amp[l][kR] *= 1.0 + 4.0 * src;
        break;
    }
  }

  RenderedEcg out;
  std::array<std::vector<double>, kWaves> basis;
  for (auto& b : basis) b.assign(n, 0.0);
  const double fs = kSamplingHz;
  const double t_center = 0.28 * std::sqrt(rr);
  double r_time = 0.1 + rr * uniform01(rng);
  // Beats whose waves reach into the record from before its start.
  r_time -= rr * std::ceil((r_time + 0.2) / rr);
  while (r_time - 0.25 < static_cast<double>(n) / fs) {
    const double r = r_time * fs;
    if (r >= 0.0 && r < static_cast<double>(n)) out.r_peaks.push_back(r);
    add_bump(basis[kP], r - 0.16 * fs, 0.02 * fs);
    add_bump(basis[kQ], r - 0.03 * fs, 0.008 * fs);
    add_bump(basis[kR], r, qrs_sigma * fs);
    add_bump(basis[kS], r + 0.03 * fs, 0.01 * fs);
    add_bump(basis[kST], r + 0.12 * fs, 0.035 * fs);
    add_bump(basis[kT], r + t_center * fs, 0.05 * fs);
    r_time += rr * (1.0 + 0.02 * normal(rng));
  }

  out.raw = Tensor({kLeads, n});
  const double wander_freq = 0.15 + 0.25 * uniform01(rng);
  for (std::size_t l = 0; l < kLeads; ++l) {
    const double wander_amp = 0.05 * normal(rng);
    const double phase = 2.0 * M_PI * uniform01(rng);
    double* row = out.raw.data() + l * n;
    for (std::size_t i = 0; i < n; ++i) {
      double v = 0.0;
      for (std::size_t w = 0; w < kWaves; ++w) v += lead_amp[l][w] * basis[w][i];
      v += wander_amp * std::sin(2.0 * M_PI * wander_freq * static_cast<double>(i) / fs + phase);
      v += spec.noise_sd * normal(rng);
      row[i] = v;
    }
  }
  return out;
}

Tensor preprocess(const Tensor& raw) {
  if (raw.rank() != 2 || raw.dim(0) != kLeads) {
    throw ShapeError("preprocess: expected 12 leads, got " + shape_to_string(raw.shape()));
  }
  const std::size_t n = raw.dim(1);
  if (n == 0) throw ShapeError("preprocess: empty recording");
  Tensor out({kLeads, kModelSamples});
  const std::size_t keep = std::min(n, kModelSamples);
  for (std::size_t l = 0; l < kLeads; ++l) {
    const double* row = raw.data() + l * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += row[i];
    mean /= static_cast<double>(n);
    double* dst = out.data() + l * kModelSamples;
    for (std::size_t i = 0; i < keep; ++i) dst[i] = row[i] - mean;
  }
  return out;
}

void save_cohort(const Cohort& cohort, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
  const auto bin_path = dir / "voltages.bin";
  std::ofstream bin(bin_path, std::ios::binary | std::ios::trunc);
  if (!bin) throw DataError("cannot write " + bin_path.string());

  nlohmann::json records = nlohmann::json::array();
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    Tensor v = cohort.voltages(i);
    expect_shape(v, {kLeads, kModelSamples}, "save_cohort");
    to_little_endian(v.data(), kBlockValues);
    bin.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(kBlockBytes));

    const RecordMeta& m = cohort.meta(i);
    nlohmann::json r;
    r["patient_id"] = m.patient_id;
    r["episode_id"] = m.episode_id;
    r["acquisition_index"] = m.acquisition_index;
    r["age"] = m.age;
    r["sex"] = m.sex;
    r["label_covid"] = m.label_covid ? nlohmann::json(*m.label_covid) : nlohmann::json(nullptr);
    r["survival"] = m.survival ? nlohmann::json{{"time", m.survival->time}, {"censored", m.survival->censored}}
                               : nlohmann::json(nullptr);
    r["source_labels"] = m.source_labels;
    r["offset"] = i * kBlockBytes;
    records.push_back(std::move(r));
  }
  bin.close();
  if (!bin) throw DataError("failed writing " + bin_path.string());

  nlohmann::json manifest;
  manifest["format"] = "ets-cohort";
  manifest["version"] = kContainerVersion;
  manifest["generator_version"] = kGeneratorVersion;
  manifest["spec"] = spec_to_json(cohort.spec());
  manifest["leads"] = kLeads;
  manifest["samples"] = kModelSamples;
  manifest["records"] = std::move(records);
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw DataError("cannot write manifest.json in " + dir.string());
  out << manifest.dump(1) << '\n';
  if (!out) throw DataError("failed writing manifest.json");
}

Cohort load_cohort(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("missing manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
    if (manifest.at("format") != "ets-cohort") throw DataError("not a cohort manifest");
    if (manifest.at("version") != kContainerVersion) throw DataError("unsupported cohort container version");
    if (manifest.at("leads") != kLeads || manifest.at("samples") != kModelSamples) {
      throw DataError("unexpected voltage block shape in manifest");
    }
    CohortSpec spec = spec_from_json(manifest.at("spec"));
    std::vector<RecordMeta> records;
    std::map<std::string, std::uint64_t> patient_index;
    for (const auto& r : manifest.at("records")) {
      RecordMeta m;
      m.patient_id = r.at("patient_id").get<std::string>();
      m.episode_id = r.at("episode_id").get<std::string>();
      m.acquisition_index = r.at("acquisition_index").get<std::uint32_t>();
      m.age = r.at("age").get<double>();
      m.sex = r.at("sex").get<std::uint8_t>();
      if (!r.at("label_covid").is_null()) m.label_covid = r.at("label_covid").get<std::uint8_t>();
      if (!r.at("survival").is_null()) {
        m.survival = mtlr::SurvivalLabel{r.at("survival").at("time").get<double>(),
                                         r.at("survival").at("censored").get<bool>()};
      }
      m.source_labels = r.at("source_labels").get<std::vector<std::uint8_t>>();
      if (r.at("offset").get<std::uint64_t>() != records.size() * kBlockBytes) {
        throw DataError("record offsets are not contiguous");
      }
      m.patient_index = patient_index.emplace(m.patient_id, patient_index.size()).first->second;
      records.push_back(std::move(m));
    }
    const auto bin_path = dir / "voltages.bin";
    std::error_code ec;
    const auto bytes = std::filesystem::file_size(bin_path, ec);
    if (ec) throw DataError("missing voltages.bin in " + dir.string());
    if (bytes != records.size() * kBlockBytes) {
      throw DataError("voltages.bin size does not match the manifest");
    }
    return Cohort(std::move(spec), std::move(records), std::make_shared<FileSource>(bin_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest.json: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("invalid cohort spec in manifest: ") + e.what());
  }
}

std::pair<Cohort, Cohort> split_by_patient(const Cohort& cohort, double dev_fraction, std::uint64_t seed) {
  if (!(dev_fraction >= 0.0 && dev_fraction <= 1.0)) throw std::invalid_argument("dev_fraction must be in [0, 1]");
  std::vector<std::string> order;
  std::map<std::string, std::size_t> first;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    if (first.emplace(cohort.meta(i).patient_id, order.size()).second) order.push_back(cohort.meta(i).patient_id);
  }
  if (order.size() < 2) throw std::invalid_argument("split_by_patient: need at least 2 patients");
  Rng rng = make_stream(seed, {kSplitKey});
  const auto perm = shuffled_indices(order.size(), rng);
  const auto n_dev = static_cast<std::size_t>(std::llround(dev_fraction * static_cast<double>(order.size())));
  std::vector<std::uint8_t> in_dev(order.size(), 0);
  for (std::size_t i = 0; i < n_dev; ++i) in_dev[perm[i]] = 1;
  std::vector<std::size_t> dev, hold;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    (in_dev[first.at(cohort.meta(i).patient_id)] ? dev : hold).push_back(i);
  }
  return {cohort.subset(dev), cohort.subset(hold)};
}

std::vector<std::size_t> select_eval_ecgs(const Cohort& cohort, Task task, std::uint64_t seed) {
  if (cohort.empty()) throw std::invalid_argument("select_eval_ecgs: empty cohort");
  // First ECG of each episode, in order of first appearance.
  std::vector<std::string> episodes;
  std::map<std::string, std::size_t> first_of;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const RecordMeta& m = cohort.meta(i);
    auto [it, inserted] = first_of.emplace(m.episode_id, i);
    if (inserted) {
      episodes.push_back(m.episode_id);
    } else if (m.acquisition_index < cohort.meta(it->second).acquisition_index) {
      it->second = i;
    }
  }
  std::vector<std::size_t> out;
  if (task == Task::diagnosis) {
    for (const auto& e : episodes) out.push_back(first_of.at(e));
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<std::string> patients;
  std::map<std::string, std::vector<std::size_t>> positive_episodes;
  for (const auto& e : episodes) {
    const std::size_t row = first_of.at(e);
    const RecordMeta& m = cohort.meta(row);
    if (m.label_covid.value_or(0) == 0) continue;
    auto& list = positive_episodes[m.patient_id];
    if (list.empty()) patients.push_back(m.patient_id);
    list.push_back(row);
  }
  if (patients.empty()) throw std::invalid_argument("select_eval_ecgs: no patient has a positive episode");
  for (const auto& p : patients) {
    const auto& list = positive_episodes.at(p);
    Rng rng = make_stream(seed, {kSelectKey, fnv1a(p)});
    out.push_back(list[uniform_index(rng, list.size())]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace ets::synth
