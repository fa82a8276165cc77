#include "stair/stair.h"

#include <cstring>
#include <limits>
#include <new>
#include <string>

#include "stair/config.hpp"
#include "stair/datagen.hpp"
#include "stair/errors.hpp"
#include "stair/index.hpp"
#include "stair/pipeline.hpp"
#include "stair/projection.hpp"
#include "stair/trainer.hpp"

struct stair_vocab {
    stair::Vocabulary vocab;
};

struct stair_model {
    stair::Model model;
};

struct stair_index {
    stair::InvertedIndex index;
};

namespace {

using stair::Json;

thread_local std::string g_last_error;

stair_status status_of(stair::ErrorCode code) {
    switch (code) {
    case stair::ErrorCode::InvalidArgument: return STAIR_ERR_INVALID_ARGUMENT;
    case stair::ErrorCode::Io: return STAIR_ERR_IO;
    case stair::ErrorCode::Format: return STAIR_ERR_FORMAT;
    case stair::ErrorCode::Numeric: return STAIR_ERR_NUMERIC;
    case stair::ErrorCode::Config: return STAIR_ERR_CONFIG;
    }
    return STAIR_ERR_INTERNAL;
}

// Runs `f`, turning any exception into a status and the thread's last error.
template <class F>
stair_status guarded(F&& f) {
    try {
        f();
        g_last_error.clear();
        return STAIR_OK;
    } catch (const stair::Error& e) {
        g_last_error = e.what();
        return status_of(e.code());
    } catch (const nlohmann::json::exception& e) {
        g_last_error = std::string("malformed JSON request: ") + e.what();
        return STAIR_ERR_INVALID_ARGUMENT;
    } catch (const std::filesystem::filesystem_error& e) {
        g_last_error = e.what();
        return STAIR_ERR_IO;
    } catch (const std::bad_alloc&) {
        g_last_error = "out of memory";
        return STAIR_ERR_INTERNAL;
    } catch (const std::exception& e) {
        g_last_error = e.what();
        return STAIR_ERR_INTERNAL;
    }
}

void require(const void* p, const char* what) {
    if (p == nullptr) stair::throw_invalid(std::string(what) + " must not be null");
}

char* copy_out(const std::string& s) {
    char* out = new char[s.size() + 1];
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

Json embedding_json(const stair::SparseEmbedding& e) {
    Json entries = Json::array();
    for (const auto& x : e.entries) entries.push_back(Json::array({x.token, x.weight}));
    return {{"entries", std::move(entries)}};
}

Json search_json(const stair::SearchResult& r) {
    Json results = Json::array();
    for (const auto& d : r.ranked) results.push_back({{"doc", d.doc}, {"score", d.score}});
    return {{"results", std::move(results)}, {"touches", r.touches}};
}

template <class T>
T get_or(const nlohmann::json& req, const char* key, T fallback) {
    return req.contains(key) ? req.at(key).get<T>() : fallback;
}

// The experiment config a request describes: its "config" file if any,
// then the "seed" and "preset" overrides.
stair::ExperimentConfig request_config(const nlohmann::json& req) {
    stair::ExperimentConfig cfg;
    if (req.contains("config")) cfg = stair::load_experiment_config(req.at("config").get<std::string>());
    if (req.contains("seed")) {
        cfg.seed = req.at("seed").get<std::uint64_t>();
        cfg.seed_set = true;
    }
    if (req.contains("preset")) {
        cfg.preset = req.at("preset").get<std::string>();
        cfg.plan = {};
    }
    return cfg;
}

Json dispatch(const nlohmann::json& req) {
    if (!req.is_object()) stair::throw_invalid("request must be a JSON object");
    const std::string command = get_or<std::string>(req, "command", "");
    const std::filesystem::path out = get_or<std::string>(req, "out", "");
    const std::filesystem::path checkpoint = get_or<std::string>(req, "checkpoint", "");
    if (command == "datagen") return stair::run_datagen({request_config(req), out});
    if (command == "train") return stair::run_train({request_config(req), out, get_or<bool>(req, "resume", false)});
    if (command == "embed") {
        return stair::run_embed({request_config(req), checkpoint, get_or<std::string>(req, "split", "test"), out});
    }
    if (command == "index-build") return stair::run_index_build({get_or<std::string>(req, "embeddings", ""), out});
    if (command == "search" || command == "mask-search") {
        stair::SearchRequest s;
        s.config = request_config(req);
        s.index_dir = get_or<std::string>(req, "index", "");
        s.checkpoint = checkpoint;
        s.query = get_or<std::string>(req, "query", "");
        s.k = get_or<std::size_t>(req, "k", 10);
        s.normalize = get_or<bool>(req, "normalize", true);
        s.mask = command == "mask-search";
        s.out = out;
        return stair::run_search(s);
    }
    if (command == "eval") {
        return stair::run_eval(
            {request_config(req), checkpoint, get_or<std::vector<std::string>>(req, "evals", {}), out});
    }
    if (command == "heatmap") {
        stair::HeatmapRequest h;
        h.config = request_config(req);
        h.checkpoint = checkpoint;
        h.query = get_or<std::string>(req, "query", "");
        h.split = get_or<std::string>(req, "split", "labeled");
        h.sample = get_or<std::uint32_t>(req, "sample", 0);
        h.out = out;
        return stair::run_heatmap(h);
    }
    stair::throw_config("unknown command '" + command + "'");
}

} // namespace

extern "C" {

const char* stair_version(void) { return "0.1.0"; }

const char* stair_last_error(void) { return g_last_error.c_str(); }

void stair_string_free(char* s) { delete[] s; }

stair_status stair_vocab_load(const char* path, stair_vocab** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new stair_vocab{stair::Vocabulary::load(path)};
    });
}

stair_status stair_vocab_default(stair_vocab** out) {
    return guarded([&] {
        require(out, "out");
        const stair::DatagenConfig cfg;
        *out = new stair_vocab{stair::default_vocabulary(stair::default_concept_bank(cfg))};
    });
}

void stair_vocab_free(stair_vocab* vocab) { delete vocab; }

size_t stair_vocab_size(const stair_vocab* vocab) { return vocab == nullptr ? 0 : vocab->vocab.size(); }

stair_status stair_vocab_tokenize(const stair_vocab* vocab, const char* text, size_t max_len, char** out_json) {
    return guarded([&] {
        require(vocab, "vocab");
        require(text, "text");
        require(out_json, "out_json");
        const stair::TokenSeq seq = stair::tokenize(vocab->vocab, text, max_len);
        Json ids = Json::array(), tokens = Json::array();
        for (auto id : seq.ids) {
            ids.push_back(id);
            tokens.push_back(vocab->vocab.token(id));
        }
        *out_json = copy_out(Json{{"ids", std::move(ids)}, {"tokens", std::move(tokens)}}.dump());
    });
}

stair_status stair_model_load(const char* path, stair_model** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new stair_model{stair::Model::load(path)};
    });
}

void stair_model_free(stair_model* model) { delete model; }

stair_status stair_model_embed_text(const stair_model* model, const stair_vocab* vocab, const char* text,
                                    char** out_json) {
    return guarded([&] {
        require(model, "model");
        require(vocab, "vocab");
        require(text, "text");
        require(out_json, "out_json");
        if (model->model.config.vocab_size != vocab->vocab.size()) {
            stair::throw_invalid("model and vocabulary sizes differ");
        }
        const auto seq = stair::tokenize(vocab->vocab, text, model->model.config.max_text_len);
        const auto emb = stair::embed_text(model->model, seq, vocab->vocab.specials().pad);
        *out_json = copy_out(embedding_json(emb).dump());
    });
}

stair_status stair_index_load(const char* path, stair_index** out) {
    return guarded([&] {
        require(path, "path");
        require(out, "out");
        *out = new stair_index{stair::InvertedIndex::load(path)};
    });
}

void stair_index_free(stair_index* index) { delete index; }

size_t stair_index_doc_count(const stair_index* index) { return index == nullptr ? 0 : index->index.doc_count(); }

stair_status stair_index_search(const stair_index* index, const char* query_json, size_t k, int normalize,
                                char** out_json) {
    return guarded([&] {
        require(index, "index");
        require(query_json, "query_json");
        require(out_json, "out_json");
        const auto j = nlohmann::json::parse(query_json);
        stair::SparseEmbedding q;
        for (const auto& e : j.at("entries")) {
            q.entries.push_back({e.at(0).get<stair::TokenId>(), e.at(1).get<double>()});
        }
        q.validate(std::numeric_limits<stair::TokenId>::max());
        *out_json = copy_out(search_json(index->index.search(q, k, normalize != 0)).dump());
    });
}

stair_status stair_index_mask_search(const stair_index* index, const stair_vocab* vocab, const char* text, size_t k,
                                     char** out_json) {
    return guarded([&] {
        require(index, "index");
        require(vocab, "vocab");
        require(text, "text");
        require(out_json, "out_json");
        *out_json = copy_out(search_json(index->index.mask_search(vocab->vocab, text, k)).dump());
    });
}

stair_status stair_run(const char* request_json, char** out_json) {
    return guarded([&] {
        require(request_json, "request_json");
        require(out_json, "out_json");
        *out_json = copy_out(dispatch(nlohmann::json::parse(request_json)).dump(2));
    });
}

stair_status stair_list_presets(char** out_json) {
    return guarded([&] {
        require(out_json, "out_json");
        Json names = stair::StagePlan::preset_names();
        names.push_back("lambda-sweep");
        *out_json = copy_out(names.dump());
    });
}

} // extern "C"
