#include "ets/synth/spec_json.hpp"

#include <set>
#include <string>

namespace ets::synth {
namespace {

template <class F>
void for_each_field(CohortSpec& s, F&& f) {
  f("n_patients", s.n_patients);
  f("ecgs_per_patient_mean", s.ecgs_per_patient_mean);
  f("new_episode_prob", s.new_episode_prob);
  f("prevalence", s.prevalence);
  f("later_episode_positive_prob", s.later_episode_positive_prob);
  f("mortality_rate_30d", s.mortality_rate_30d);
  f("covid_log_hazard_ratio", s.covid_log_hazard_ratio);
  f("weibull_shape", s.weibull_shape);
  f("censor_rate", s.censor_rate);
  f("followup_days", s.followup_days);
  f("n_source_labels", s.n_source_labels);
  f("source_label_rate", s.source_label_rate);
  f("effect_size", s.effect_size);
  f("source_effect_size", s.source_effect_size);
  f("st_sd", s.st_sd);
  f("noise_sd", s.noise_sd);
  f("raw_samples", s.raw_samples);
  f("seed", s.seed);
}

}  // namespace

nlohmann::json spec_to_json(const CohortSpec& spec) {
  nlohmann::json doc = nlohmann::json::object();
  CohortSpec copy = spec;
  for_each_field(copy, [&](const char* key, auto& value) { doc[key] = value; });
  return doc;
}

CohortSpec spec_from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("cohort spec must be a JSON object");
  CohortSpec spec;
  std::set<std::string> known;
  for_each_field(spec, [&](const char* key, auto& value) {
    known.insert(key);
    if (!doc.contains(key)) return;
    using T = std::decay_t<decltype(value)>;
    const auto& v = doc.at(key);
    if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw std::invalid_argument(std::string("cohort spec: ") + key + " must be a number");
    } else {
      if (!v.is_number_unsigned()) {
        throw std::invalid_argument(std::string("cohort spec: ") + key + " must be a non-negative integer");
      }
    }
    value = v.get<T>();
  });
  for (const auto& [key, _] : doc.items()) {
    if (!known.count(key)) throw std::invalid_argument("cohort spec: unknown key '" + key + "'");
  }
  spec.validate();
  return spec;
}

}  // namespace ets::synth
