#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ets/metrics/metrics.hpp"
#include "ets/synth/cohort.hpp"
#include "ets/synth/spec_json.hpp"

using namespace ets;
using namespace ets::synth;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ets_synth_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

RecordMeta record(const std::string& patient, const std::string& episode, std::uint32_t acquisition,
                  std::uint8_t covid) {
  RecordMeta m;
  m.patient_id = patient;
  m.episode_id = episode;
  m.acquisition_index = acquisition;
  m.label_covid = covid;
  m.survival = mtlr::SurvivalLabel{100.0, true};
  return m;
}

Cohort tiny_cohort(std::vector<RecordMeta> metas) {
  std::vector<Tensor> v(metas.size(), Tensor({kLeads, kModelSamples}));
  return Cohort(CohortSpec{}, std::move(metas), memory_source(std::move(v)));
}

/// Mean ST-window voltage over the diagnosis leads, located from the known
/// R peaks.
double st_probe(const RenderedEcg& ecg) {
  const Tensor v = preprocess(ecg.raw);
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t lead : diagnosis_leads()) {
    for (double r : ecg.r_peaks) {
      for (int k = 45; k < 75; ++k) {
        const auto j = static_cast<std::size_t>(r) + static_cast<std::size_t>(k);
        if (j < kModelSamples) sum += v.at(lead, j), ++count;
      }
    }
  }
  return count ? sum / static_cast<double>(count) : 0.0;
}

double probe_auroc(const CohortSpec& spec) {
  const auto patients = draw_patients(spec);
  const Cohort cohort = generate_cohort(spec);
  std::vector<double> score;
  std::vector<std::uint8_t> label;
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    const auto& m = cohort.meta(i);
    score.push_back(st_probe(render_ecg(spec, patients[m.patient_index], m)));
    label.push_back(*m.label_covid);
  }
  return metrics::auroc({score, label});
}

}  // namespace

TEST_CASE("preprocessing") {
  Tensor constant({kLeads, 5000}, 3.0);
  CHECK(preprocess(constant) == Tensor({kLeads, kModelSamples}));

  Tensor short_raw({kLeads, 4000});
  for (std::size_t i = 0; i < short_raw.size(); ++i) short_raw[i] = std::sin(0.01 * static_cast<double>(i)) + 1.0;
  const Tensor padded = preprocess(short_raw);
  for (std::size_t l = 0; l < kLeads; ++l) {
    for (std::size_t j = 4000; j < kModelSamples; ++j) CHECK(padded.at(l, j) == 0.0);
  }

  Tensor centered({kLeads, kModelSamples});
  for (std::size_t l = 0; l < kLeads; ++l) {
    for (std::size_t j = 0; j < kModelSamples; ++j) centered.at(l, j) = j % 2 ? 0.25 : -0.25;
  }
  CHECK(preprocess(centered) == centered);
  CHECK_THROWS_AS(preprocess(Tensor({11, 100})), ShapeError);
}

TEST_CASE("generation is deterministic and well formed") {
  CohortSpec spec;
  spec.n_patients = 40;
  spec.seed = 11;
  const Cohort a = generate_cohort(spec);
  const Cohort b = generate_cohort(spec);
  REQUIRE(a.size() == b.size());
  CHECK(a.size() >= 40);
  CHECK(a.patient_count() == 40);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.meta(i).episode_id == b.meta(i).episode_id);
    const Tensor va = a.voltages(i);
    CHECK(va == b.voltages(i));
    CHECK(va.shape() == Shape{kLeads, kModelSamples});
    CHECK(va.all_finite());
    const auto& s = *a.meta(i).survival;
    CHECK(s.time >= 1.0);
    CHECK(std::isfinite(s.time));
    CHECK(s.time <= spec.followup_days + 1.0);
    CHECK(a.meta(i).age >= 18.0);
    CHECK(a.meta(i).source_labels.size() == spec.n_source_labels);
  }
  spec.seed = 12;
  CHECK_FALSE(generate_cohort(spec).voltages(0) == a.voltages(0));
}

TEST_CASE("episode structure follows the patient") {
  CohortSpec spec;
  spec.n_patients = 300;
  spec.ecgs_per_patient_mean = 3.0;
  spec.prevalence = 0.5;
  const Cohort cohort = generate_cohort(spec);
  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < cohort.size(); ++i) by_patient[cohort.meta(i).patient_id].push_back(i);
  CHECK(static_cast<double>(cohort.size()) / 300.0 == doctest::Approx(3.0).epsilon(0.15));
  for (const auto& [patient, rows] : by_patient) {
    const auto& first = cohort.meta(rows.front());
    CHECK(first.acquisition_index == 0);
    bool any_positive = false;
    for (std::size_t r : rows) {
      any_positive |= *cohort.meta(r).label_covid != 0;
      CHECK(cohort.meta(r).survival->time == first.survival->time);
      CHECK(cohort.meta(r).source_labels == first.source_labels);
    }
    // A positive patient's first episode is positive.
    if (any_positive) CHECK(*first.label_covid == 1);
  }
}

TEST_CASE("prevalence and mortality calibration") {
  CohortSpec spec;
  spec.n_patients = 5000;
  spec.ecgs_per_patient_mean = 1.0;
  const auto patients = draw_patients(spec);
  double positives = 0.0;
  for (const auto& p : patients) positives += p.positive;
  const double sd = std::sqrt(5000 * spec.prevalence * (1 - spec.prevalence));
  CHECK(std::abs(positives - 5000 * spec.prevalence) <= 3.0 * sd);

  spec.prevalence = 1.0;
  spec.seed = 5;
  double died = 0.0;
  for (const auto& p : draw_patients(spec)) died += mortality30_label(p.survival);
  const double sd30 = std::sqrt(5000 * spec.mortality_rate_30d * (1 - spec.mortality_rate_30d));
  // Censoring before day 30 can only lower the observed rate.
  CHECK(died <= 5000 * spec.mortality_rate_30d + 3.0 * sd30);
  CHECK(died >= 5000 * spec.mortality_rate_30d * 0.9 - 3.0 * sd30);
}

TEST_CASE("planted signal is recoverable and vanishes without an effect") {
  CohortSpec spec;
  spec.n_patients = 2000;
  spec.ecgs_per_patient_mean = 1.0;
  CHECK(probe_auroc(spec) > 0.8);
  spec.effect_size = 0.0;
  spec.prevalence = 0.5;
  CHECK(std::abs(probe_auroc(spec) - 0.5) < 0.05);
}

TEST_CASE("patient-grouped split") {
  CohortSpec spec;
  spec.n_patients = 101;
  spec.ecgs_per_patient_mean = 2.5;
  const Cohort cohort = generate_cohort(spec);
  const auto [dev, hold] = split_by_patient(cohort, 0.6, 4);
  std::set<std::string> dev_ids, hold_ids;
  for (std::size_t i = 0; i < dev.size(); ++i) dev_ids.insert(dev.meta(i).patient_id);
  for (std::size_t i = 0; i < hold.size(); ++i) hold_ids.insert(hold.meta(i).patient_id);
  for (const auto& id : dev_ids) CHECK(hold_ids.count(id) == 0);
  CHECK(dev.size() + hold.size() == cohort.size());
  CHECK(std::abs(static_cast<double>(dev_ids.size()) - 0.6 * 101) <= 1.0);
  const auto [dev2, hold2] = split_by_patient(cohort, 0.6, 4);
  REQUIRE(dev2.size() == dev.size());
  for (std::size_t i = 0; i < dev.size(); ++i) CHECK(dev2.meta(i).episode_id == dev.meta(i).episode_id);
}

TEST_CASE("evaluation selection") {
  SUBCASE("identity for one ECG per episode") {
    const Cohort c = tiny_cohort({record("a", "a1", 0, 0), record("b", "b1", 0, 1), record("c", "c1", 0, 0)});
    CHECK(select_eval_ecgs(c, Task::diagnosis, 0) == std::vector<std::size_t>{0, 1, 2});
  }
  SUBCASE("first ECG of each episode") {
    const Cohort c = tiny_cohort({record("p", "A", 1, 1), record("p", "A", 0, 1), record("p", "B", 0, 0)});
    const auto rows = select_eval_ecgs(c, Task::diagnosis, 0);
    REQUIRE(rows.size() == 2);
    for (std::size_t r : rows) CHECK(c.meta(r).acquisition_index == 0);
  }
  SUBCASE("one record per positive patient") {
    const Cohort c = tiny_cohort({record("p", "p1", 0, 1), record("p", "p1", 1, 1), record("p", "p2", 0, 1),
                                  record("q", "q1", 0, 0), record("r", "r1", 0, 1)});
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const auto rows = select_eval_ecgs(c, Task::mortality30, seed);
      REQUIRE(rows.size() == 2);
      CHECK(c.meta(rows[0]).patient_id == "p");
      CHECK(c.meta(rows[0]).acquisition_index == 0);
      CHECK(c.meta(rows[1]).patient_id == "r");
    }
    const Cohort none = tiny_cohort({record("q", "q1", 0, 0)});
    CHECK_THROWS(select_eval_ecgs(none, Task::isd, 0));
  }
}

TEST_CASE("container round trip and corruption") {
  CohortSpec spec;
  spec.n_patients = 6;
  spec.seed = 3;
  const Cohort cohort = generate_cohort(spec);
  const auto dir = temp_dir("roundtrip");
  save_cohort(cohort, dir);
  const Cohort loaded = load_cohort(dir);
  REQUIRE(loaded.size() == cohort.size());
  CHECK(loaded.spec() == spec);
  for (std::size_t i = 0; i < cohort.size(); ++i) {
    CHECK(loaded.voltages(i) == cohort.voltages(i));
    CHECK(loaded.meta(i).episode_id == cohort.meta(i).episode_id);
    CHECK(loaded.meta(i).survival->time == cohort.meta(i).survival->time);
    CHECK(loaded.meta(i).source_labels == cohort.meta(i).source_labels);
  }
  const auto again = temp_dir("roundtrip2");
  save_cohort(loaded, again);
  auto read = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(read(dir / "voltages.bin") == read(again / "voltages.bin"));
  CHECK(read(dir / "manifest.json") == read(again / "manifest.json"));

  std::filesystem::resize_file(again / "voltages.bin", 1000);
  CHECK_THROWS_AS(load_cohort(again), DataError);
  {
    std::ofstream(again / "manifest.json") << "{ not json";
  }
  CHECK_THROWS_AS(load_cohort(again), DataError);
  CHECK_THROWS_AS(load_cohort(temp_dir("missing")), DataError);
}

TEST_CASE("spec json") {
  CohortSpec spec;
  spec.prevalence = 0.3;
  spec.seed = 77;
  CHECK(spec_from_json(spec_to_json(spec)) == spec);
  CHECK_THROWS(spec_from_json(nlohmann::json{{"prevalance", 0.1}}));
  CHECK_THROWS(spec_from_json(nlohmann::json{{"prevalence", 1.5}}));
  CHECK_THROWS(spec_from_json(nlohmann::json{{"n_patients", -3}}));
  CHECK(spec_from_json(nlohmann::json::object()) == CohortSpec{});
}
