#include <algorithm>
#include <fstream>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "stair/binio.hpp"
#include "stair/config.hpp"
#include "stair/errors.hpp"
#include "stair/index.hpp"
#include "stair/pipeline.hpp"
#include "stair/sparse.hpp"

using namespace stair;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment(std::uint64_t seed) {
    ExperimentConfig c = experiment_config_from_json(nlohmann::json::parse(R"({
        "seed": 3,
        "datagen": {"n_train": 64, "n_val": 8, "n_test": 12, "n_labeled": 20},
        "model": {"d_model": 8, "depth": 1, "mlp_hidden": 16},
        "plan": {"batch_size": 8, "stages": [
            {"name": "masked-text", "steps": 3, "peak_lr": 0.003, "warmup_steps": 1, "mask_text": true,
             "lambda_image": 0.001, "lambda_text": 0.001, "lambda_warmup_steps": 2},
            {"name": "joint", "steps": 3, "peak_lr": 0.0003, "warmup_steps": 1,
             "lambda_image": 0.001, "lambda_text": 0.001, "lambda_warmup_steps": 2}]}
    })"));
    c.seed = seed;
    return c;
}

nlohmann::json manifest_of(const fs::path& dir) { return nlohmann::json::parse(binio::read_file(dir / "manifest.json")); }

void check_manifest(const fs::path& dir, const std::string& command) {
    const auto m = manifest_of(dir);
    CHECK(m["command"] == command);
    REQUIRE(m.contains("artifacts"));
    std::vector<std::string> paths;
    for (const auto& a : m["artifacts"]) {
        const std::string p = a["path"];
        paths.push_back(p);
        CHECK(a["sha256"] == binio::sha256_file(dir / p));
    }
    CHECK(std::is_sorted(paths.begin(), paths.end()));
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir)) files += e.is_regular_file();
    CHECK(files == paths.size() + 1);
    CHECK(binio::read_file(dir / "manifest.json").find("time") == std::string::npos);
}

struct Trained {
    fs::path root;
    ExperimentConfig cfg;
    fs::path ckpt;
};

// One trained tiny model shared by the tests below.
const Trained& trained() {
    static const Trained t = [] {
        Trained out{testutil::scratch_dir("pipeline"), tiny_experiment(5), {}};
        run_train({out.cfg, out.root / "train", false});
        out.ckpt = out.root / "train" / "model.ckpt";
        return out;
    }();
    return t;
}

} // namespace

TEST_CASE("experiment config JSON") {
    const auto c = tiny_experiment(9);
    const auto back = experiment_config_from_json(nlohmann::json::parse(to_json(c).dump()));
    CHECK(to_json(back) == to_json(c));
    CHECK(config_hash(back) == config_hash(c));
    auto other = c;
    other.seed = 10;
    CHECK(config_hash(other) != config_hash(c));

    CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"seed": 1, "sede": 2})")), Error);
    CHECK_THROWS_AS(experiment_config_from_json(nlohmann::json::parse(R"({"seed": "one"})")), Error);
    ExperimentConfig unseeded = experiment_config_from_json(nlohmann::json::parse(R"({"datagen": {"n_train": 4}})"));
    CHECK(!unseeded.seed_set);
    CHECK_THROWS_AS(unseeded.validate(), Error);
    ExperimentConfig missing = tiny_experiment(1);
    missing.data_dir = "/nonexistent/stair-data";
    CHECK_THROWS_AS(missing.validate(), Error);
    ExperimentConfig sweep = tiny_experiment(1);
    sweep.plan.stages.clear();
    sweep.preset = "lambda-sweep";
    CHECK(sweep.is_sweep());
    CHECK_THROWS_AS(sweep.resolved_plan(), Error);
    ExperimentConfig bad_eval = tiny_experiment(1);
    bad_eval.evals = {"telepathy"};
    CHECK_THROWS_AS(bad_eval.validate(), Error);
}

TEST_CASE("datagen writes a loadable corpus and a manifest") {
    const auto dir = testutil::scratch_dir("pipe-datagen") / "out";
    const auto summary = run_datagen({tiny_experiment(4), dir});
    check_manifest(dir, "datagen");
    CHECK(summary["test"] == 12);
    const auto d = load_dataset(dir);
    CHECK(d.train.size() == 64);
    CHECK(d.config.seed == 4);

    // The datagen command seeds the data with the run seed; loading its
    // output matches generating in memory from that data seed.
    auto from_dir = tiny_experiment(4);
    from_dir.data_dir = dir;
    auto in_memory = tiny_experiment(4);
    in_memory.datagen.seed = 4;
    const auto a = resolve_data(from_dir);
    const auto b = resolve_data(in_memory);
    CHECK(a.vocab.tokens() == b.vocab.tokens());
    CHECK(a.data.train.size() == b.data.train.size());
    CHECK(a.data.train[5].caption == b.data.train[5].caption);
    CHECK(a.data.train[5].image.features == b.data.train[5].image.features);
    CHECK(manifest_of(dir)["seed"] == 4);
}

TEST_CASE("train writes checkpoints, a log and a deterministic manifest") {
    const auto& t = trained();
    check_manifest(t.root / "train", "train");
    CHECK(fs::exists(t.root / "train" / "stage1-masked-text.ckpt"));
    CHECK(fs::exists(t.root / "train" / "train_log.tsv"));
    const auto m = manifest_of(t.root / "train");
    CHECK(m["seed"] == 5);
    CHECK(m["summary"]["stages"].size() == 2);
    CHECK(m["summary"]["stages"][0]["masked_steps"] == 3);
    CHECK(m["config_hash"] == config_hash(t.cfg));

    const auto again = testutil::scratch_dir("pipe-train-again") / "train";
    run_train({t.cfg, again, false});
    CHECK(binio::read_file(again / "manifest.json") == binio::read_file(t.root / "train" / "manifest.json"));
}

TEST_CASE("embed, index, search and mask search") {
    const auto& t = trained();
    const auto emb = t.root / "embed";
    run_embed({t.cfg, t.ckpt, "test", emb});
    check_manifest(emb, "embed");
    std::ifstream in(emb / "images.emb");
    const auto images = read_embeddings(in);
    REQUIRE(images.size() == 12);
    CHECK(images[3].id == "image-3");

    const auto ix = t.root / "index";
    run_index_build({emb / "images.emb", ix});
    check_manifest(ix, "index build");
    CHECK(InvertedIndex::load(ix / "index.bin").doc_count() == 12);

    SearchRequest sr;
    sr.config = t.cfg;
    sr.index_dir = ix;
    sr.checkpoint = t.ckpt;
    sr.query = "red square";
    sr.k = 5;
    sr.out = t.root / "search";
    const auto res = run_search(sr);
    check_manifest(sr.out, "search");
    CHECK(fs::exists(sr.out / "results.json"));
    CHECK(res["mode"] == "dual-encoder");
    CHECK(res["normalize"] == true);
    CHECK(res["results"].size() <= 5);
    for (std::size_t i = 0; i < res["results"].size(); ++i) CHECK(res["results"][i]["rank"] == i + 1);

    sr.mask = true;
    sr.query = "a cat";
    sr.out = t.root / "mask";
    const auto before = text_forward_count();
    const auto mres = run_search(sr);
    CHECK(text_forward_count() == before);
    CHECK(mres["mode"] == "mask");
    CHECK(mres["normalize"] == false);
    check_manifest(sr.out, "mask-search");
}

TEST_CASE("eval and heatmap") {
    const auto& t = trained();
    EvalRequest er{t.cfg, t.ckpt, {"retrieval", "sparsity", "interp", "mask", "localization"}, t.root / "eval"};
    const auto rep = run_eval(er);
    check_manifest(er.out, "eval");
    for (const char* k : {"retrieval", "sparsity", "interp", "mask", "localization"}) CHECK(rep.contains(k));
    CHECK(fs::exists(er.out / "report.json"));

    HeatmapRequest hr;
    hr.config = t.cfg;
    hr.checkpoint = t.ckpt;
    hr.query = "cat";
    hr.out = t.root / "heat";
    const auto h = run_heatmap(hr);
    check_manifest(hr.out, "heatmap");
    CHECK(h["values"].size() == 4);
    CHECK(fs::exists(hr.out / "heatmap-cat.pgm"));
}

TEST_CASE("failed runs leave nothing of their own behind") {
    const auto& t = trained();
    const auto root = testutil::scratch_dir("pipe-fail");
    {
        std::ofstream(root / "junk.ckpt") << "not a checkpoint";
    }
    CHECK_THROWS_AS(run_eval({t.cfg, root / "junk.ckpt", {"sparsity"}, root / "fresh"}), Error);
    CHECK(!fs::exists(root / "fresh"));

    fs::create_directories(root / "kept");
    {
        std::ofstream(root / "kept" / "mine.txt") << "keep me";
    }
    CHECK_THROWS_AS(run_eval({t.cfg, root / "junk.ckpt", {"sparsity"}, root / "kept"}), Error);
    CHECK(fs::exists(root / "kept" / "mine.txt"));
    CHECK(std::distance(fs::directory_iterator(root / "kept"), fs::directory_iterator{}) == 1);

    // Another command's results are never overwritten.
    try {
        run_datagen({t.cfg, t.root / "train"});
        FAIL("expected a refusal");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::Config);
    }
    CHECK(fs::exists(t.ckpt));

    auto unseeded = t.cfg;
    unseeded.seed_set = false;
    CHECK_THROWS_AS(run_train({unseeded, root / "unseeded", false}), Error);
    CHECK(!fs::exists(root / "unseeded"));
    CHECK_THROWS_AS(run_embed({t.cfg, t.ckpt, "nosuchsplit", root / "badsplit"}), Error);
    CHECK(!fs::exists(root / "badsplit"));
}
