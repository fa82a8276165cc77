#include "stair/config.hpp"

#include <set>

#include "stair/binio.hpp"
#include "stair/errors.hpp"

namespace stair {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const char* what) {
    if (!j.is_object()) throw_config(std::string(what) + ": expected a JSON object");
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw_config(std::string(what) + ": unknown key '" + k + "'");
    }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const char* what) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw_config(std::string(what) + ": key '" + key + "' has the wrong type");
    }
}

Json stage_to_json(const StageSpec& s) {
    Json j;
    j["name"] = s.name;
    j["steps"] = s.steps;
    j["peak_lr"] = s.peak_lr;
    j["warmup_steps"] = s.warmup_steps;
    j["mask_text"] = s.mask_text;
    j["freeze_image"] = s.freeze_image;
    j["lambda_image"] = s.lambda_image;
    j["lambda_text"] = s.lambda_text;
    j["lambda_warmup_steps"] = s.lambda_warmup_steps;
    return j;
}

StageSpec stage_from_json(const nlohmann::json& j) {
    constexpr const char* what = "stage";
    reject_unknown(j,
                   {"name", "steps", "peak_lr", "warmup_steps", "mask_text", "freeze_image", "lambda_image",
                    "lambda_text", "lambda_warmup_steps"},
                   what);
    StageSpec s;
    read_opt(j, "name", s.name, what);
    read_opt(j, "steps", s.steps, what);
    read_opt(j, "peak_lr", s.peak_lr, what);
    read_opt(j, "warmup_steps", s.warmup_steps, what);
    read_opt(j, "mask_text", s.mask_text, what);
    read_opt(j, "freeze_image", s.freeze_image, what);
    read_opt(j, "lambda_image", s.lambda_image, what);
    read_opt(j, "lambda_text", s.lambda_text, what);
    read_opt(j, "lambda_warmup_steps", s.lambda_warmup_steps, what);
    return s;
}

} // namespace

Json to_json(const DatagenConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["n_train"] = c.n_train;
    j["n_val"] = c.n_val;
    j["n_test"] = c.n_test;
    j["n_labeled"] = c.n_labeled;
    j["n_concepts"] = c.n_concepts;
    j["grid_height"] = c.grid_height;
    j["grid_width"] = c.grid_width;
    j["patch_dim"] = c.patch_dim;
    j["block"] = c.block;
    j["max_concepts"] = c.max_concepts;
    j["noise_sigma"] = c.noise_sigma;
    j["signature_norm"] = c.signature_norm;
    j["holdout_fraction"] = c.holdout_fraction;
    j["distractor_prob"] = c.distractor_prob;
    return j;
}

DatagenConfig datagen_config_from_json(const nlohmann::json& j) {
    constexpr const char* what = "datagen";
    reject_unknown(j,
                   {"seed", "n_train", "n_val", "n_test", "n_labeled", "n_concepts", "grid_height", "grid_width",
                    "patch_dim", "block", "max_concepts", "noise_sigma", "signature_norm", "holdout_fraction",
                    "distractor_prob"},
                   what);
    DatagenConfig c;
    read_opt(j, "seed", c.seed, what);
    read_opt(j, "n_train", c.n_train, what);
    read_opt(j, "n_val", c.n_val, what);
    read_opt(j, "n_test", c.n_test, what);
    read_opt(j, "n_labeled", c.n_labeled, what);
    read_opt(j, "n_concepts", c.n_concepts, what);
    read_opt(j, "grid_height", c.grid_height, what);
    read_opt(j, "grid_width", c.grid_width, what);
    read_opt(j, "patch_dim", c.patch_dim, what);
    read_opt(j, "block", c.block, what);
    read_opt(j, "max_concepts", c.max_concepts, what);
    read_opt(j, "noise_sigma", c.noise_sigma, what);
    read_opt(j, "signature_norm", c.signature_norm, what);
    read_opt(j, "holdout_fraction", c.holdout_fraction, what);
    read_opt(j, "distractor_prob", c.distractor_prob, what);
    return c;
}

Json to_json(const ModelConfig& c) {
    Json j;
    j["vocab_size"] = c.vocab_size;
    j["d_model"] = c.d_model;
    j["depth"] = c.depth;
    j["heads"] = c.heads;
    j["mlp_hidden"] = c.mlp_hidden;
    j["max_text_len"] = c.max_text_len;
    j["grid_height"] = c.grid_height;
    j["grid_width"] = c.grid_width;
    j["patch_dim"] = c.patch_dim;
    j["head"] = c.head == HeadKind::Sparse ? "sparse" : "dense";
    j["ln_eps"] = c.ln_eps;
    j["init_std"] = c.init_std;
    j["temperature_init"] = c.temperature_init;
    j["temperature_floor"] = c.temperature_floor;
    return j;
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    constexpr const char* what = "model";
    reject_unknown(j,
                   {"vocab_size", "d_model", "depth", "heads", "mlp_hidden", "max_text_len", "grid_height",
                    "grid_width", "patch_dim", "head", "ln_eps", "init_std", "temperature_init", "temperature_floor"},
                   what);
    ModelConfig c;
    read_opt(j, "vocab_size", c.vocab_size, what);
    read_opt(j, "d_model", c.d_model, what);
    read_opt(j, "depth", c.depth, what);
    read_opt(j, "heads", c.heads, what);
    read_opt(j, "mlp_hidden", c.mlp_hidden, what);
    read_opt(j, "max_text_len", c.max_text_len, what);
    read_opt(j, "grid_height", c.grid_height, what);
    read_opt(j, "grid_width", c.grid_width, what);
    read_opt(j, "patch_dim", c.patch_dim, what);
    std::string head = "sparse";
    read_opt(j, "head", head, what);
    if (head == "sparse") {
        c.head = HeadKind::Sparse;
    } else if (head == "dense") {
        c.head = HeadKind::Dense;
    } else {
        throw_config("model: head must be 'sparse' or 'dense', got '" + head + "'");
    }
    read_opt(j, "ln_eps", c.ln_eps, what);
    read_opt(j, "init_std", c.init_std, what);
    read_opt(j, "temperature_init", c.temperature_init, what);
    read_opt(j, "temperature_floor", c.temperature_floor, what);
    return c;
}

Json to_json(const StagePlan& plan) {
    Json j;
    j["batch_size"] = plan.batch_size;
    j["stages"] = Json::array();
    for (const auto& s : plan.stages) j["stages"].push_back(stage_to_json(s));
    return j;
}

StagePlan stage_plan_from_json(const nlohmann::json& j) {
    reject_unknown(j, {"batch_size", "stages"}, "plan");
    StagePlan plan;
    read_opt(j, "batch_size", plan.batch_size, "plan");
    if (j.contains("stages")) {
        if (!j.at("stages").is_array()) throw_config("plan: 'stages' must be an array");
        for (const auto& s : j.at("stages")) plan.stages.push_back(stage_from_json(s));
    }
    return plan;
}

StagePlan ExperimentConfig::resolved_plan() const {
    if (is_sweep()) throw_config("config: the lambda-sweep preset has one plan per lambda value");
    return plan.stages.empty() ? StagePlan::preset(preset) : plan;
}

void ExperimentConfig::validate() const {
    if (!seed_set) throw_config("config: 'seed' is mandatory");
    if (!vocab_path.empty() && !std::filesystem::exists(vocab_path)) {
        throw_config("config: vocab file " + vocab_path.string() + " does not exist");
    }
    if (!data_dir.empty() && !std::filesystem::is_directory(data_dir)) {
        throw_config("config: data directory " + data_dir.string() + " does not exist");
    }
    datagen.validate();
    if (is_sweep()) {
        for (double l : lambda_sweep_values()) StagePlan::preset(lambda_sweep_preset(l)).validate();
    } else {
        resolved_plan().validate();
    }
    if (sweep_seeds == 0) throw_config("config: 'sweep_seeds' must be >= 1");
    static const std::set<std::string> known = {"retrieval", "zeroshot", "probe",       "interp",
                                                "sparsity",  "mask",     "localization"};
    for (const auto& e : evals)
        if (!known.contains(e)) throw_config("config: unknown eval '" + e + "'");
}

Json to_json(const ExperimentConfig& c) {
    Json j;
    j["seed"] = c.seed;
    j["vocab_path"] = c.vocab_path.string();
    j["data_dir"] = c.data_dir.string();
    j["datagen"] = to_json(c.datagen);
    j["model"] = to_json(c.model);
    j["preset"] = c.preset;
    j["plan"] = to_json(c.plan);
    j["evals"] = c.evals;
    j["sweep_seeds"] = c.sweep_seeds;
    return j;
}

ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
    constexpr const char* what = "config";
    reject_unknown(j, {"seed", "vocab_path", "data_dir", "datagen", "model", "preset", "plan", "evals", "sweep_seeds"}, what);
    ExperimentConfig c;
    if (j.contains("seed")) {
        read_opt(j, "seed", c.seed, what);
        c.seed_set = true;
    }
    std::string path;
    read_opt(j, "vocab_path", path, what);
    c.vocab_path = path;
    path.clear();
    read_opt(j, "data_dir", path, what);
    c.data_dir = path;
    if (j.contains("datagen")) c.datagen = datagen_config_from_json(j.at("datagen"));
    if (j.contains("model")) c.model = model_config_from_json(j.at("model"));
    read_opt(j, "preset", c.preset, what);
    if (j.contains("plan")) c.plan = stage_plan_from_json(j.at("plan"));
    read_opt(j, "evals", c.evals, what);
    read_opt(j, "sweep_seeds", c.sweep_seeds, what);
    return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
    std::string text;
    try {
        text = binio::read_file(path);
    } catch (const Error& e) {
        throw_config("cannot read config " + path.string() + ": " + e.what());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw_config("config " + path.string() + " is not valid JSON: " + e.what());
    }
    ExperimentConfig c = experiment_config_from_json(j);
    // Relative paths inside a config resolve against the config's directory.
    const auto base = path.parent_path();
    if (!c.vocab_path.empty() && c.vocab_path.is_relative()) c.vocab_path = base / c.vocab_path;
    if (!c.data_dir.empty() && c.data_dir.is_relative()) c.data_dir = base / c.data_dir;
    return c;
}

std::string config_hash(const ExperimentConfig& cfg) { return binio::sha256_hex(to_json(cfg).dump()); }

} // namespace stair
