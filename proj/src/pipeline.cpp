#include "stair/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "stair/binio.hpp"
#include "stair/errors.hpp"
#include "stair/evalsuite.hpp"
#include "stair/index.hpp"
#include "stair/projection.hpp"
#include "stair/sparse.hpp"
#include "stair/trainer.hpp"

namespace stair {

namespace fs = std::filesystem;

namespace {

constexpr const char* kManifest = "manifest.json";
constexpr std::uint32_t kNullTrials = 1000;

// Owns the output directory for one pipeline run. Unless commit() is
// called, everything the run added is removed again: the whole directory
// if the run created it, otherwise only the entries that were not there
// before.
class OutputGuard {
public:
    OutputGuard(const fs::path& out, const std::string& command) : out_(out) {
        if (out_.empty()) throw_config("an output directory (--out) is required");
        std::error_code ec;
        created_ = !fs::exists(out_, ec);
        if (!created_) {
            if (!fs::is_directory(out_)) throw_config("output path " + out_.string() + " is not a directory");
            if (fs::exists(out_ / kManifest)) {
                std::string previous;
                try {
                    previous = nlohmann::json::parse(binio::read_file(out_ / kManifest)).value("command", "");
                } catch (const nlohmann::json::exception&) {
                }
                if (previous != command) {
                    throw_config("output directory " + out_.string() + " holds the results of '" + previous +
                                 "'; choose a fresh --out");
                }
            }
            for (const auto& e : fs::directory_iterator(out_)) before_.insert(e.path().filename().string());
        }
        fs::create_directories(out_, ec);
        if (ec) throw_io("cannot create output directory " + out_.string() + ": " + ec.message());
    }

    ~OutputGuard() {
        if (committed_) return;
        std::error_code ec;
        if (created_) {
            fs::remove_all(out_, ec);
            return;
        }
        std::vector<fs::path> added;
        for (const auto& e : fs::directory_iterator(out_, ec))
            if (!before_.contains(e.path().filename().string())) added.push_back(e.path());
        for (const auto& p : added) fs::remove_all(p, ec);
    }

    OutputGuard(const OutputGuard&) = delete;
    OutputGuard& operator=(const OutputGuard&) = delete;

    void commit() { committed_ = true; }

private:
    fs::path out_;
    bool created_ = false;
    bool committed_ = false;
    std::set<std::string> before_;
};

void require_file(const fs::path& p, const std::string& what) {
    if (p.empty()) throw_config(what + " path is required");
    if (!fs::is_regular_file(p)) throw_config(what + " " + p.string() + " does not exist");
}

void require_dir(const fs::path& p, const std::string& what) {
    if (p.empty()) throw_config(what + " path is required");
    if (!fs::is_directory(p)) throw_config(what + " " + p.string() + " does not exist");
}

void reject_same_dir(const fs::path& out, const fs::path& input, const std::string& what) {
    std::error_code ec;
    if (!input.empty() && fs::exists(out) && fs::equivalent(out, input, ec)) {
        throw_config("--out must differ from the " + what + " directory");
    }
}

// Files under `dir` as sorted relative paths.
std::vector<std::string> list_files(const fs::path& dir) {
    std::vector<std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file()) out.push_back(fs::relative(e.path(), dir).generic_string());
    std::sort(out.begin(), out.end());
    return out;
}

std::string dir_fingerprint(const fs::path& dir) {
    std::string acc;
    for (const auto& rel : list_files(dir)) acc += rel + '\t' + binio::sha256_file(dir / rel) + '\n';
    return binio::sha256_hex(acc);
}

Json input_entry(const std::string& role, const fs::path& p) {
    Json j;
    j["role"] = role;
    j["name"] = p.filename().string();
    j["sha256"] = fs::is_directory(p) ? dir_fingerprint(p) : binio::sha256_file(p);
    return j;
}

Json config_inputs(const ExperimentConfig& cfg) {
    Json inputs = Json::array();
    if (!cfg.vocab_path.empty()) inputs.push_back(input_entry("vocab", cfg.vocab_path));
    if (!cfg.data_dir.empty()) inputs.push_back(input_entry("data", cfg.data_dir));
    return inputs;
}

// Writes manifest.json listing every other file under `out`.
void write_manifest(const fs::path& out, const std::string& command, const ExperimentConfig* cfg, Json inputs,
                    const Json& summary) {
    Json m;
    m["command"] = command;
    if (cfg != nullptr) {
        m["seed"] = cfg->seed;
        m["config_hash"] = config_hash(*cfg);
        m["config"] = to_json(*cfg);
    }
    m["inputs"] = std::move(inputs);
    m["summary"] = summary;
    Json artifacts = Json::array();
    for (const auto& rel : list_files(out)) {
        if (rel == kManifest) continue;
        artifacts.push_back({{"path", rel}, {"sha256", binio::sha256_file(out / rel)}});
    }
    m["artifacts"] = std::move(artifacts);
    binio::write_file_atomic(out / kManifest, m.dump(2) + "\n");
}

Json recall_json(const std::map<std::uint32_t, double>& m) {
    Json j = Json::object();
    for (const auto& [k, v] : m) j[std::to_string(k)] = v;
    return j;
}

Json stats_json(const ActivationStats& s) {
    return {{"mean", s.mean}, {"median", s.median}, {"max", s.max}, {"count", s.count}};
}

Vocabulary resolve_vocab(const ExperimentConfig& cfg, const ConceptBank* bank) {
    if (!cfg.vocab_path.empty()) return Vocabulary::load(cfg.vocab_path);
    if (!cfg.data_dir.empty()) return Vocabulary::load(cfg.data_dir / "vocab.txt");
    if (bank != nullptr) return default_vocabulary(*bank);
    return default_vocabulary(default_concept_bank(cfg.datagen));
}

std::string sanitize_stem(const std::string& s) {
    std::string out;
    for (char c : s) out += (std::isalnum(static_cast<unsigned char>(c)) != 0) ? c : '-';
    if (out.empty()) out = "query";
    return out;
}

std::vector<std::string> read_doc_names(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open " + path.string());
    std::vector<std::string> names;
    std::string line;
    while (std::getline(in, line)) {
        const auto tab = line.find('\t');
        if (tab == std::string::npos || line.substr(0, tab) != std::to_string(names.size())) {
            throw_format(path.string() + ": malformed line " + std::to_string(names.size() + 1));
        }
        names.push_back(line.substr(tab + 1));
    }
    return names;
}

Json stage_summary_json(const StageSummary& s) {
    return {{"name", s.name},
            {"checkpoint", s.checkpoint.filename().string()},
            {"steps", s.steps},
            {"peak_lr", s.peak_lr},
            {"masked_steps", s.masked_steps},
            {"steps_with_violations", s.steps_with_violations},
            {"image_hash_before", s.image_hash_before},
            {"image_hash_after", s.image_hash_after},
            {"resumed", s.resumed}};
}

Json train_one(const Model& initial, const StagePlan& plan, std::span<const TrainExample> examples,
               const Vocabulary& vocab, const fs::path& dir, std::uint64_t seed, bool resume, Model& final_model) {
    TrainOptions opt;
    opt.seed = seed;
    opt.resume = resume;
    TrainResult res = run_stages(initial, plan, examples, vocab, dir, opt);
    res.model.save(dir / "model.ckpt");
    Json stages = Json::array();
    for (const auto& s : res.stages) stages.push_back(stage_summary_json(s));
    Json j;
    j["stages"] = std::move(stages);
    if (!res.log.empty()) {
        const auto& last = res.log.back();
        j["final_step"] = {{"loss", last.loss},
                           {"contrastive", last.contrastive},
                           {"temperature", last.temperature},
                           {"active_image", last.active_image},
                           {"active_text", last.active_text}};
    }
    final_model = std::move(res.model);
    return j;
}

Json sweep(const ExperimentConfig& cfg, const ResolvedData& rd, const ModelConfig& mc,
           std::span<const TrainExample> examples, const fs::path& out, bool resume) {
    const auto& test = rd.data.test;
    const std::vector<std::uint32_t> ks = {1};
    Json runs = Json::array();
    Json means = Json::array();
    for (double lambda : lambda_sweep_values()) {
        const std::string name = lambda_sweep_preset(lambda);
        const StagePlan plan = StagePlan::preset(name);
        double text_sum = 0.0, image_sum = 0.0, recall_sum = 0.0;
        for (std::uint32_t r = 0; r < cfg.sweep_seeds; ++r) {
            const std::uint64_t seed = cfg.seed + r;
            const fs::path dir = out / name / ("seed-" + std::to_string(seed));
            fs::create_directories(dir);
            Model model;
            train_one(Model::initialize(mc, seed), plan, examples, rd.vocab, dir, seed, resume, model);
            const SparsityStats sp = eval_sparsity(model, rd.vocab, test);
            const RetrievalReport rr = eval_retrieval(model, rd.vocab, test, ks);
            const double recall = 0.5 * (rr.text_to_image.at(1) + rr.image_to_text.at(1));
            runs.push_back({{"lambda", lambda},
                            {"seed", seed},
                            {"text_tokens", sp.text.mean},
                            {"image_tokens", sp.image.mean},
                            {"recall1_text_to_image", rr.text_to_image.at(1)},
                            {"recall1_image_to_text", rr.image_to_text.at(1)}});
            text_sum += sp.text.mean;
            image_sum += sp.image.mean;
            recall_sum += recall;
        }
        const double n = cfg.sweep_seeds;
        means.push_back({{"lambda", lambda},
                         {"preset", name},
                         {"mean_text_tokens", text_sum / n},
                         {"mean_image_tokens", image_sum / n},
                         {"mean_recall1", recall_sum / n}});
    }
    Json summary;
    summary["preset"] = "lambda-sweep";
    summary["seeds"] = cfg.sweep_seeds;
    summary["lambdas"] = std::move(means);
    summary["runs"] = std::move(runs);
    binio::write_file_atomic(out / "sweep.json", summary.dump(2) + "\n");
    return summary;
}

} // namespace

ResolvedData resolve_data(const ExperimentConfig& cfg) {
    Dataset data = cfg.data_dir.empty() ? generate(cfg.datagen) : load_dataset(cfg.data_dir);
    Vocabulary vocab = resolve_vocab(cfg, &data.bank);
    data.bank.validate(vocab);
    return {std::move(data), std::move(vocab)};
}

ModelConfig resolve_model_config(const ExperimentConfig& cfg, const Vocabulary& vocab, const DatagenConfig& data) {
    ModelConfig mc = cfg.model;
    if (mc.vocab_size == 0) {
        mc.vocab_size = static_cast<std::uint32_t>(vocab.size());
    } else if (mc.vocab_size != vocab.size()) {
        throw_config("model.vocab_size " + std::to_string(mc.vocab_size) + " does not match the vocabulary (" +
                     std::to_string(vocab.size()) + " tokens)");
    }
    if (mc.grid_height != data.grid_height || mc.grid_width != data.grid_width || mc.patch_dim != data.patch_dim) {
        throw_config("model grid/patch shape does not match the data");
    }
    mc.validate();
    return mc;
}

Model load_checkpoint(const fs::path& path, const Vocabulary& vocab) {
    require_file(path, "checkpoint");
    Model m;
    try {
        m = Model::load(path);
    } catch (const Error& e) {
        throw Error(e.code(), "checkpoint " + path.string() + ": " + e.what());
    }
    if (m.config.vocab_size != vocab.size()) {
        throw_config("checkpoint " + path.filename().string() + " was trained on a " +
                     std::to_string(m.config.vocab_size) + "-token vocabulary, not " + std::to_string(vocab.size()));
    }
    return m;
}

const std::vector<PairedSample>& split_of(const Dataset& data, const std::string& name) {
    if (name == "train") return data.train;
    if (name == "val") return data.val;
    if (name == "test") return data.test;
    if (name == "labeled") return data.labeled;
    throw_config("unknown split '" + name + "' (expected train, val, test or labeled)");
}

const std::vector<std::string>& eval_kinds() {
    static const std::vector<std::string> kinds = {"retrieval", "zeroshot", "probe",       "interp",
                                                   "sparsity",  "mask",     "localization"};
    return kinds;
}

Json run_datagen(const DatagenRequest& req) {
    ExperimentConfig cfg = req.config;
    cfg.datagen.seed = cfg.seed;
    cfg.validate();
    OutputGuard guard(req.out, "datagen");
    const Dataset data = generate(cfg.datagen);
    const Vocabulary vocab = resolve_vocab(cfg, &data.bank);
    data.bank.validate(vocab);
    save_dataset(req.out, data, vocab);
    const Json summary = {{"train", data.train.size()},
                          {"val", data.val.size()},
                          {"test", data.test.size()},
                          {"labeled", data.labeled.size()},
                          {"concepts", data.bank.concepts.size()},
                          {"vocab_size", vocab.size()}};
    write_manifest(req.out, "datagen", &cfg, config_inputs(cfg), summary);
    guard.commit();
    return summary;
}

Json run_train(const TrainRequest& req) {
    const ExperimentConfig& cfg = req.config;
    cfg.validate();
    reject_same_dir(req.out, cfg.data_dir, "data");
    OutputGuard guard(req.out, "train");
    const ResolvedData rd = resolve_data(cfg);
    const ModelConfig mc = resolve_model_config(cfg, rd.vocab, rd.data.config);
    const auto examples = make_examples(rd.vocab, rd.data.train, mc.max_text_len);
    Json summary;
    if (cfg.is_sweep()) {
        summary = sweep(cfg, rd, mc, examples, req.out, req.resume);
    } else {
        Model model;
        summary["preset"] = cfg.plan.stages.empty() ? cfg.preset : std::string("custom");
        summary.update(train_one(Model::initialize(mc, cfg.seed), cfg.resolved_plan(), examples, rd.vocab,
                                 req.out, cfg.seed, req.resume, model));
    }
    write_manifest(req.out, "train", &cfg, config_inputs(cfg), summary);
    guard.commit();
    return summary;
}

Json run_embed(const EmbedRequest& req) {
    const ExperimentConfig& cfg = req.config;
    cfg.validate();
    require_file(req.checkpoint, "checkpoint");
    reject_same_dir(req.out, cfg.data_dir, "data");
    OutputGuard guard(req.out, "embed");
    const ResolvedData rd = resolve_data(cfg);
    const Model model = load_checkpoint(req.checkpoint, rd.vocab);
    if (model.config.head != HeadKind::Sparse) throw_config("embed needs a sparse-head checkpoint");
    const auto& samples = split_of(rd.data, req.split);
    Embedder emb(model);
    const TokenId pad = rd.vocab.specials().pad;
    std::vector<NamedEmbedding> images, texts;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const std::string id = std::to_string(i);
        images.push_back({"image-" + id, emb.image(samples[i].image)});
        const TokenSeq seq = tokenize(rd.vocab, with_prompt(samples[i].caption), model.config.max_text_len);
        texts.push_back({"text-" + id, emb.text(seq, pad)});
    }
    for (const auto& [name, items] : {std::pair{"images.emb", &images}, std::pair{"texts.emb", &texts}}) {
        std::ostringstream out;
        write_embeddings(out, *items);
        binio::write_file_atomic(req.out / name, out.str());
    }
    const Json summary = {{"split", req.split}, {"items", samples.size()}, {"prompt", true}};
    Json inputs = config_inputs(cfg);
    inputs.push_back(input_entry("checkpoint", req.checkpoint));
    write_manifest(req.out, "embed", &cfg, std::move(inputs), summary);
    guard.commit();
    return summary;
}

Json run_index_build(const IndexBuildRequest& req) {
    require_file(req.embeddings, "embeddings file");
    OutputGuard guard(req.out, "index build");
    std::ifstream in(req.embeddings, std::ios::binary);
    if (!in) throw_io("cannot open " + req.embeddings.string());
    const auto items = read_embeddings(in);
    std::vector<std::pair<DocId, SparseEmbedding>> corpus;
    std::string names;
    for (std::size_t i = 0; i < items.size(); ++i) {
        corpus.push_back({static_cast<DocId>(i), items[i].embedding});
        names += std::to_string(i) + '\t' + items[i].id + '\n';
    }
    const InvertedIndex ix = InvertedIndex::build(corpus);
    ix.save(req.out / "index.bin");
    binio::write_file_atomic(req.out / "docs.tsv", names);
    std::size_t postings = 0;
    for (const auto& l : ix.lists()) postings += l.postings.size();
    const Json summary = {{"docs", ix.doc_count()}, {"tokens", ix.lists().size()}, {"postings", postings}};
    write_manifest(req.out, "index build", nullptr, Json::array({input_entry("embeddings", req.embeddings)}), summary);
    guard.commit();
    return summary;
}

Json run_search(const SearchRequest& req) {
    const ExperimentConfig& cfg = req.config;
    require_dir(req.index_dir, "index directory");
    require_file(req.index_dir / "index.bin", "index file");
    if (!req.mask) require_file(req.checkpoint, "checkpoint");
    if (req.k == 0) throw_config("--k must be at least 1");
    if (req.query.empty()) throw_config("--query must not be empty");
    reject_same_dir(req.out, req.index_dir, "index");
    const std::string command = req.mask ? "mask-search" : "search";
    OutputGuard guard(req.out, command);
    const InvertedIndex ix = InvertedIndex::load(req.index_dir / "index.bin");
    const auto names = read_doc_names(req.index_dir / "docs.tsv");
    if (names.size() != ix.doc_count()) throw_format("docs.tsv does not match the index");
    const Vocabulary vocab = resolve_vocab(cfg, nullptr);

    SearchResult res;
    if (req.mask) {
        res = ix.mask_search(vocab, req.query, req.k);
    } else {
        const Model model = load_checkpoint(req.checkpoint, vocab);
        const SparseEmbedding q =
            embed_text(model, tokenize(vocab, req.query, model.config.max_text_len), vocab.specials().pad);
        res = ix.search(q, req.k, req.normalize);
    }
    Json results = Json::array();
    for (std::size_t r = 0; r < res.ranked.size(); ++r) {
        const auto& d = res.ranked[r];
        results.push_back({{"rank", r + 1}, {"doc", d.doc}, {"name", names[d.doc]}, {"score", d.score}});
    }
    Json summary = {{"query", req.query},
                    {"mode", req.mask ? "mask" : "dual-encoder"},
                    {"k", req.k},
                    {"normalize", req.mask ? false : req.normalize},
                    {"touches", res.touches},
                    {"results", std::move(results)}};
    binio::write_file_atomic(req.out / "results.json", summary.dump(2) + "\n");
    Json inputs = config_inputs(cfg);
    inputs.push_back(input_entry("index", req.index_dir / "index.bin"));
    if (!req.mask) inputs.push_back(input_entry("checkpoint", req.checkpoint));
    write_manifest(req.out, command, &cfg, std::move(inputs), summary);
    guard.commit();
    return summary;
}

Json run_eval(const EvalRequest& req) {
    const ExperimentConfig& cfg = req.config;
    cfg.validate();
    require_file(req.checkpoint, "checkpoint");
    reject_same_dir(req.out, cfg.data_dir, "data");
    const auto& kinds = req.evals.empty() ? cfg.evals : req.evals;
    for (const auto& k : kinds) {
        if (std::find(eval_kinds().begin(), eval_kinds().end(), k) == eval_kinds().end()) {
            throw_config("unknown eval '" + k + "'");
        }
    }
    OutputGuard guard(req.out, "eval");
    const ResolvedData rd = resolve_data(cfg);
    const Model model = load_checkpoint(req.checkpoint, rd.vocab);
    const auto& d = rd.data;
    const auto classes = static_cast<std::uint32_t>(d.bank.concepts.size());

    Json report = Json::object();
    for (const auto& kind : kinds) {
        if (kind == "retrieval") {
            const auto rr = eval_retrieval(model, rd.vocab, d.test, default_recall_ks());
            report[kind] = {{"queries", rr.queries},
                            {"text_to_image", recall_json(rr.text_to_image)},
                            {"image_to_text", recall_json(rr.image_to_text)}};
        } else if (kind == "zeroshot") {
            report[kind] = {{"accuracy", eval_zeroshot(model, rd.vocab, d.labeled, d.bank)},
                            {"images", d.labeled.size()},
                            {"classes", classes}};
        } else if (kind == "probe") {
            const ProbeConfig pc;
            const auto pr = eval_linear_probe(model, d.labeled, classes, pc);
            report[kind] = {{"train_accuracy", pr.train_accuracy},
                            {"test_accuracy", pr.test_accuracy},
                            {"epochs", pc.epochs},
                            {"lr", pc.lr}};
        } else if (kind == "interp") {
            const auto ir = eval_interpretability(model, rd.vocab, d.labeled, d.bank, default_interp_ks());
            report[kind] = {{"candidate_space", ir.candidate_space},
                            {"images", ir.images},
                            {"top_k", recall_json(ir.top_k)}};
        } else if (kind == "sparsity") {
            const auto sp = eval_sparsity(model, rd.vocab, d.test);
            report[kind] = {{"image", stats_json(sp.image)}, {"text", stats_json(sp.text)}};
        } else if (kind == "mask") {
            if (model.config.head != HeadKind::Sparse) throw_config("eval mask needs a sparse-head checkpoint");
            const auto enc = encode_split(model, rd.vocab, d.test, true);
            const auto dual = retrieval_from_embeddings(enc, default_recall_ks(), Ranker::Index);
            const auto mask = mask_retrieval(rd.vocab, enc.images, d.test, default_recall_ks(), 64);
            const auto null = permutation_null(d.test.size(), kNullTrials, derive_seed(cfg.seed, 7001));
            report[kind] = {{"queries", d.test.size()},
                            {"dual_encoder", recall_json(dual.text_to_image)},
                            {"mask", recall_json(mask)},
                            {"null_recall1_mean", null.mean},
                            {"null_recall1_stddev", null.stddev},
                            {"null_recall1_simulated_mean", null.simulated_mean},
                            {"null_recall1_simulated_stddev", null.simulated_stddev}};
        } else if (kind == "localization") {
            const auto lr = eval_localization(model, rd.vocab, d.labeled, d.bank);
            report[kind] = {{"hit_rate", lr.hit_rate}, {"images", lr.images}};
        }
    }
    export_report(req.out, report.dump(), {});
    Json inputs = config_inputs(cfg);
    inputs.push_back(input_entry("checkpoint", req.checkpoint));
    write_manifest(req.out, "eval", &cfg, std::move(inputs), report);
    guard.commit();
    return report;
}

Json run_heatmap(const HeatmapRequest& req) {
    const ExperimentConfig& cfg = req.config;
    cfg.validate();
    require_file(req.checkpoint, "checkpoint");
    if (req.query.empty()) throw_config("--query must not be empty");
    reject_same_dir(req.out, cfg.data_dir, "data");
    OutputGuard guard(req.out, "heatmap");
    const ResolvedData rd = resolve_data(cfg);
    const Model model = load_checkpoint(req.checkpoint, rd.vocab);
    const auto& samples = split_of(rd.data, req.split);
    if (req.sample >= samples.size()) {
        throw_config("--sample " + std::to_string(req.sample) + " is out of range for split '" + req.split + "' (" +
                     std::to_string(samples.size()) + " samples)");
    }
    const auto& s = samples[req.sample];
    const Heatmap hm = heatmap(model, rd.vocab, s.image, req.query);
    const auto vals = hm.values.data();
    const auto peak = static_cast<std::size_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
    Json grid = Json::array();
    for (std::uint32_t r = 0; r < hm.height; ++r) {
        Json row = Json::array();
        for (std::uint32_t c = 0; c < hm.width; ++c) row.push_back(vals[r * hm.width + c]);
        grid.push_back(std::move(row));
    }
    Json tokens = Json::array();
    for (TokenId t : hm.query_tokens) tokens.push_back(rd.vocab.token(t));
    Json placements = Json::object();
    for (const auto& [concept_id, cells] : s.placements) {
        placements[rd.data.bank.concepts.at(concept_id).word] = cells;
    }
    Json summary = {{"query", req.query},
                    {"query_tokens", std::move(tokens)},
                    {"split", req.split},
                    {"sample", req.sample},
                    {"caption", s.caption},
                    {"height", hm.height},
                    {"width", hm.width},
                    {"peak_cell", peak},
                    {"placements", std::move(placements)},
                    {"values", std::move(grid)}};
    const NamedHeatmap named{sanitize_stem(req.query), hm};
    export_report(req.out, summary.dump(), std::span<const NamedHeatmap>(&named, 1));
    Json inputs = config_inputs(cfg);
    inputs.push_back(input_entry("checkpoint", req.checkpoint));
    write_manifest(req.out, "heatmap", &cfg, std::move(inputs), summary);
    guard.commit();
    return summary;
}

} // namespace stair
