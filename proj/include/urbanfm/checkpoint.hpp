#pragma once

#include <string>

#include "urbanfm/model.hpp"
#include "urbanfm/nn/adam.hpp"

#include "json.hpp"

namespace urbanfm {

// "FLOWMAG1" container: config JSON header followed by named float32 blobs
// (parameters, batch-norm statistics and, when present, Adam moments).

nlohmann::json config_to_json(const UrbanFMConfig& cfg);
UrbanFMConfig config_from_json(const nlohmann::json& j);

void save_checkpoint(const std::string& path, UrbanFMModel& model,
                     const nn::Adam<float>* opt = nullptr,
                     const nlohmann::json& extra = nlohmann::json::object());

struct LoadedCheckpoint {
    UrbanFMModel model;
    nn::Adam<float> opt;  // zero-initialized when the file has no optimizer state
    bool has_opt = false;
    nlohmann::json extra;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace urbanfm
