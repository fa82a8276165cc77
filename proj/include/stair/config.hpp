#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "stair/datagen.hpp"
#include "stair/model.hpp"
#include "stair/trainer.hpp"

namespace stair {

using Json = nlohmann::ordered_json;

// JSON mappings. Readers reject unknown keys so a typo in a config file is
// a config error instead of a silently ignored setting; missing keys keep
// their defaults.
Json to_json(const DatagenConfig& cfg);
DatagenConfig datagen_config_from_json(const nlohmann::json& j);

Json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

Json to_json(const StagePlan& plan);
StagePlan stage_plan_from_json(const nlohmann::json& j);

/// Everything one experiment needs. A config file is this object as JSON.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    bool seed_set = false;
    std::filesystem::path vocab_path; // empty: built-in vocabulary
    std::filesystem::path data_dir;   // empty: generate from `datagen`
    DatagenConfig datagen;
    ModelConfig model;
    std::string preset = "paper-desk"; // used when `plan` is empty
    StagePlan plan;
    std::vector<std::string> evals = {"retrieval", "zeroshot", "probe", "interp", "sparsity"};
    // Training seeds per lambda value under the "lambda-sweep" preset; the
    // sweep reports means over them.
    std::uint32_t sweep_seeds = 4;

    /// True for the "lambda-sweep" meta-preset, which trains one model per
    /// sweep value and seed instead of following a single plan.
    bool is_sweep() const { return plan.stages.empty() && preset == "lambda-sweep"; }

    /// Resolved plan: `plan` when it has stages, otherwise the preset.
    /// Throws a config error for the sweep meta-preset.
    StagePlan resolved_plan() const;

    /// Seed must be set; referenced paths must exist.
    void validate() const;
};

Json to_json(const ExperimentConfig& cfg);
ExperimentConfig experiment_config_from_json(const nlohmann::json& j);
ExperimentConfig load_experiment_config(const std::filesystem::path& path);

/// SHA-256 of the canonical JSON dump.
std::string config_hash(const ExperimentConfig& cfg);

} // namespace stair
