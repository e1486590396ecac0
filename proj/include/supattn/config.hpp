#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"
#include "supattn/model.hpp"
#include "supattn/train.hpp"

namespace supattn {

// {"model": {...}, "train": {...}}; missing keys keep their defaults and
// unknown keys are rejected so typos surface.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;

    bool operator==(const RunConfig&) const = default;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
nlohmann::ordered_json to_json(const TrainConfig& config);
nlohmann::ordered_json to_json(const RunConfig& config);

ModelConfig model_config_from_json(const nlohmann::json& j);
TrainConfig train_config_from_json(const nlohmann::json& j);
RunConfig run_config_from_json(const nlohmann::json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& config, const std::filesystem::path& path);

}  // namespace supattn
