#pragma once

#include <json.hpp>

#include <cstdint>
#include <string>

#include "rhoflow/model.hpp"

namespace rhoflow {

inline constexpr int kModelFormatVersion = 1;

struct TrainProvenance {
    std::uint64_t seed = 0;
    std::string config_hash;
    double final_nll_per_obs = 0.0;
    std::string delta_v_convention = "leader_minus_ego";
    Matrix behavioral_ranges;  // 3 x 2, [1st, 99th] percentile per behavioral axis
    std::string source;
};

/// Versioned on-disk container. Arrays are authoritative on load; the RFF
/// seed is provenance metadata only.
struct ModelFile {
    ModelParams params;
    TrainProvenance provenance;
};

nlohmann::json params_to_json(const ModelParams& params);
ModelParams params_from_json(const nlohmann::json& j);

void save_model(const ModelFile& model, const std::string& path);
ModelFile load_model(const std::string& path);

}  // namespace rhoflow
