#pragma once

// JSON mappings for the configuration structs, shared by checkpoints and
// benchmark reports. from_json requires every key.

#include <json.hpp>

#include "ecomrtl/control.hpp"
#include "ecomrtl/emissions.hpp"
#include "ecomrtl/learner.hpp"
#include "ecomrtl/microsim.hpp"

namespace ecomrtl {

void to_json(nlohmann::json& j, const IdmParams& p);
void from_json(const nlohmann::json& j, IdmParams& p);
void to_json(nlohmann::json& j, const EmissionParams& p);
void from_json(const nlohmann::json& j, EmissionParams& p);
void to_json(nlohmann::json& j, const SimConfig& c);
void from_json(const nlohmann::json& j, SimConfig& c);
void to_json(nlohmann::json& j, const NominalParams& p);
void from_json(const nlohmann::json& j, NominalParams& p);
void to_json(nlohmann::json& j, const RewardParams& p);
void from_json(const nlohmann::json& j, RewardParams& p);
void to_json(nlohmann::json& j, const EnvConfig& c);
void from_json(const nlohmann::json& j, EnvConfig& c);
void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// The fixed observation scale constants, for report and checkpoint headers.
nlohmann::json observation_scales_json();

}  // namespace ecomrtl
