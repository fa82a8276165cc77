// Command-line front end. Every subcommand becomes one JSON request to
// stair_run(); this file sees nothing of the library but its C header.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stair/stair.h"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
};

void add_common(CLI::App* app, Common& c, bool needs_seed = true) {
    app->add_option("--config", c.config, "Experiment config (JSON)")->check(CLI::ExistingFile);
    if (needs_seed) app->add_option("--seed", c.seed, "Seed; overrides the config's");
    app->add_option("--out", c.out, "Output directory")->required();
}

nlohmann::json base_request(const std::string& command, const Common& c) {
    nlohmann::json r;
    r["command"] = command;
    if (!c.config.empty()) r["config"] = c.config;
    if (c.seed) r["seed"] = *c.seed;
    r["out"] = c.out;
    return r;
}

int exit_code(stair_status s) {
    if (s == STAIR_OK) return kExitOk;
    if (s == STAIR_ERR_CONFIG || s == STAIR_ERR_INVALID_ARGUMENT) return kExitConfig;
    return kExitRuntime;
}

int submit(const nlohmann::json& request) {
    char* result = nullptr;
    const stair_status s = stair_run(request.dump().c_str(), &result);
    if (s != STAIR_OK) {
        std::cerr << "error: " << stair_last_error() << "\n";
        return exit_code(s);
    }
    std::cout << result << std::endl;
    stair_string_free(result);
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sparse vocabulary-grounded text/image embeddings: data, training, indexing, evaluation"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(stair_version()));

    nlohmann::json request;

    Common dg;
    auto* datagen = app.add_subcommand("datagen", "Generate the synthetic paired corpus");
    add_common(datagen, dg);
    datagen->callback([&] { request = base_request("datagen", dg); });

    Common tr;
    std::string preset;
    bool resume = false;
    auto* train = app.add_subcommand("train", "Train a model through a stage plan or preset");
    add_common(train, tr);
    train->add_option("--preset", preset, "paper-desk, single-stage, lambda-sweep or lambda-sweep-<value>");
    train->add_flag("--resume", resume, "Reuse stage checkpoints already in --out");
    train->callback([&] {
        request = base_request("train", tr);
        if (!preset.empty()) request["preset"] = preset;
        request["resume"] = resume;
    });

    Common em;
    std::string em_checkpoint, em_split = "test";
    auto* embed = app.add_subcommand("embed", "Write sparse embeddings of a data split");
    add_common(embed, em);
    embed->add_option("--checkpoint", em_checkpoint, "Model checkpoint")->required();
    embed->add_option("--split", em_split, "train, val, test or labeled");
    embed->callback([&] {
        request = base_request("embed", em);
        request["checkpoint"] = em_checkpoint;
        request["split"] = em_split;
    });

    // Shared by `search`, `index search` and `index mask-search`.
    Common se;
    std::string se_index, se_checkpoint, se_query;
    std::size_t se_k = 10;
    bool se_normalize = true;
    auto add_search = [&](CLI::App* cmd, bool mask) {
        add_common(cmd, se, false);
        cmd->add_option("--index", se_index, "Directory written by `index build`")->required();
        if (!mask) {
            cmd->add_option("--checkpoint", se_checkpoint, "Model checkpoint")->required();
            cmd->add_flag("--normalize,!--no-normalize", se_normalize, "Rank by cosine (default) or by raw dot product");
        }
        cmd->add_option("--query", se_query, "Query text")->required();
        cmd->add_option("--k", se_k, "Results to return");
        cmd->callback([&, mask] {
            request = base_request(mask ? "mask-search" : "search", se);
            request["index"] = se_index;
            if (!mask) {
                request["checkpoint"] = se_checkpoint;
                request["normalize"] = se_normalize;
            }
            request["query"] = se_query;
            request["k"] = se_k;
        });
    };

    auto* index = app.add_subcommand("index", "Build or query an inverted index");
    index->require_subcommand(1);
    Common ib;
    std::string ib_embeddings;
    auto* build = index->add_subcommand("build", "Index an embeddings file");
    add_common(build, ib, false);
    build->add_option("--embeddings", ib_embeddings, "File written by `embed`")->required();
    build->callback([&] {
        request = base_request("index-build", ib);
        request["embeddings"] = ib_embeddings;
    });
    add_search(index->add_subcommand("search", "Query the index with the text encoder"), false);
    add_search(index->add_subcommand("mask-search", "Query the index with a binary token mask"), true);
    add_search(app.add_subcommand("search", "Same as `index search`"), false);

    Common ev;
    std::string ev_checkpoint;
    std::vector<std::string> ev_kinds;
    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_common(eval, ev);
    eval->add_option("kinds", ev_kinds, "retrieval zeroshot probe interp sparsity mask localization");
    eval->add_option("--checkpoint", ev_checkpoint, "Model checkpoint")->required();
    eval->callback([&] {
        request = base_request("eval", ev);
        request["checkpoint"] = ev_checkpoint;
        if (!ev_kinds.empty()) request["evals"] = ev_kinds;
    });

    Common hm;
    std::string hm_checkpoint, hm_query, hm_split = "labeled";
    std::uint32_t hm_sample = 0;
    auto* heat = app.add_subcommand("heatmap", "Per-cell activation map of a query over one image");
    add_common(heat, hm);
    heat->add_option("--checkpoint", hm_checkpoint, "Model checkpoint")->required();
    heat->add_option("--query", hm_query, "Query text")->required();
    heat->add_option("--split", hm_split, "Split holding the image");
    heat->add_option("--sample", hm_sample, "Index of the image within the split");
    heat->callback([&] {
        request = base_request("heatmap", hm);
        request["checkpoint"] = hm_checkpoint;
        request["query"] = hm_query;
        request["split"] = hm_split;
        request["sample"] = hm_sample;
    });

    auto* presets = app.add_subcommand("presets", "List training presets");
    presets->callback([&] { request = {{"command", "presets"}}; });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    if (request.value("command", "") == "presets") {
        char* names = nullptr;
        const stair_status s = stair_list_presets(&names);
        if (s != STAIR_OK) {
            std::cerr << "error: " << stair_last_error() << "\n";
            return exit_code(s);
        }
        std::cout << names << std::endl;
        stair_string_free(names);
        return kExitOk;
    }
    return submit(request);
}
