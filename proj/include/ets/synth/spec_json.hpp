#pragma once

#include "ets/synth/cohort.hpp"
#include "json.hpp"

namespace ets::synth {

nlohmann::json spec_to_json(const CohortSpec& spec);

/// Missing keys keep their defaults; unknown keys are rejected. The result is
/// validated.
CohortSpec spec_from_json(const nlohmann::json& doc);

}  // namespace ets::synth
