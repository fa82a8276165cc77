#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "stair/config.hpp"
#include "stair/datagen.hpp"
#include "stair/model.hpp"
#include "stair/vocab.hpp"

// End-to-end recipes behind the command-line subcommands. Every pipeline
// writes only under its output directory, finishes with a manifest.json
// (command, seed, config hash, input and artifact checksums), and removes
// whatever it created there if it fails.

namespace stair {

/// Data and vocabulary an experiment runs on: loaded from `data_dir` when
/// set, otherwise generated from the datagen section.
struct ResolvedData {
    Dataset data;
    Vocabulary vocab;
};
ResolvedData resolve_data(const ExperimentConfig& cfg);

/// The model config with vocab_size filled in from the vocabulary and the
/// grid shape checked against the data.
ModelConfig resolve_model_config(const ExperimentConfig& cfg, const Vocabulary& vocab, const DatagenConfig& data);

/// Loads a checkpoint and checks it against the vocabulary.
Model load_checkpoint(const std::filesystem::path& path, const Vocabulary& vocab);

const std::vector<PairedSample>& split_of(const Dataset& data, const std::string& name);

struct DatagenRequest {
    ExperimentConfig config;
    std::filesystem::path out;
};

struct TrainRequest {
    ExperimentConfig config;
    std::filesystem::path out;
    bool resume = false;
};

struct EmbedRequest {
    ExperimentConfig config;
    std::filesystem::path checkpoint;
    std::string split = "test";
    std::filesystem::path out;
};

struct IndexBuildRequest {
    std::filesystem::path embeddings; // a file written by the embed pipeline
    std::filesystem::path out;
};

struct SearchRequest {
    ExperimentConfig config;
    std::filesystem::path index_dir;
    std::filesystem::path checkpoint; // unused in mask mode
    std::string query;
    std::size_t k = 10;
    bool normalize = true; // cosine ranking; mask mode is always unnormalized
    bool mask = false;
    std::filesystem::path out;
};

struct EvalRequest {
    ExperimentConfig config;
    std::filesystem::path checkpoint;
    std::vector<std::string> evals; // empty: the config's list
    std::filesystem::path out;
};

struct HeatmapRequest {
    ExperimentConfig config;
    std::filesystem::path checkpoint;
    std::string query;
    std::string split = "labeled";
    std::uint32_t sample = 0;
    std::filesystem::path out;
};

/// Each returns the summary it also stores in the output directory.
Json run_datagen(const DatagenRequest& req);
Json run_train(const TrainRequest& req);
Json run_embed(const EmbedRequest& req);
Json run_index_build(const IndexBuildRequest& req);
Json run_search(const SearchRequest& req);
Json run_eval(const EvalRequest& req);
Json run_heatmap(const HeatmapRequest& req);

/// Every eval kind run_eval accepts.
const std::vector<std::string>& eval_kinds();

} // namespace stair
