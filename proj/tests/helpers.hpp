#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <stdexcept>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "stair/model.hpp"
#include "stair/trainer.hpp"
#include "stair/sparse.hpp"
#include "stair/tensor.hpp"
#include "stair/vocab.hpp"

namespace testutil {

inline stair::Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double scale = 1.0) {
    stair::Tensor t(std::move(shape));
    std::normal_distribution<double> n(0.0, scale);
    for (auto& v : t.data()) v = n(rng);
    return t;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

/// Specials, lowercase letters, and a few whole words and pieces.
inline stair::Vocabulary toy_vocab(std::vector<std::string> extra = {}) {
    std::vector<std::string> tokens = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    for (char c = 'a'; c <= 'z'; ++c) tokens.emplace_back(1, c);
    for (const char* w : {"play", "##ing", "cat", "dog", "red", "the", "##s", ".", ","}) tokens.emplace_back(w);
    for (auto& e : extra) tokens.push_back(std::move(e));
    return stair::Vocabulary::from_tokens(std::move(tokens));
}

/// Random sparse embedding over [0, vocab) with roughly `density` support.
inline stair::SparseEmbedding random_sparse(std::size_t vocab, double density, std::mt19937_64& rng) {
    std::bernoulli_distribution keep(density);
    std::uniform_real_distribution<double> w(0.01, 3.0);
    stair::SparseEmbedding e;
    for (std::size_t t = 0; t < vocab; ++t)
        if (keep(rng)) e.entries.push_back({static_cast<stair::TokenId>(t), w(rng)});
    return e;
}

/// Small model for fast tests.
inline stair::ModelConfig tiny_config(std::uint32_t vocab_size, std::uint32_t d = 8, std::uint32_t depth = 1) {
    stair::ModelConfig c;
    c.vocab_size = vocab_size;
    c.d_model = d;
    c.depth = depth;
    c.heads = 2;
    c.mlp_hidden = 2 * d;
    c.max_text_len = 12;
    c.grid_height = 2;
    c.grid_width = 2;
    c.patch_dim = 4;
    return c;
}

inline stair::PatchGrid random_grid(const stair::ModelConfig& c, std::mt19937_64& rng) {
    stair::PatchGrid g;
    g.height = c.grid_height;
    g.width = c.grid_width;
    g.features = random_tensor({c.grid_cells(), c.patch_dim}, rng);
    return g;
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("stair-test-" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

// Golden files hold one value per line as a C hex-float, so they round-trip
// bit for bit.
inline std::filesystem::path golden_path(const std::string& name) {
#ifdef STAIR_GOLDEN_DIR
    return std::filesystem::path(STAIR_GOLDEN_DIR) / name;
#else
    return name;
#endif
}

inline void write_golden(const std::filesystem::path& path, const std::vector<double>& values) {
    std::ofstream out(path);
    char buf[64];
    for (double v : values) {
        std::snprintf(buf, sizeof buf, "%a", v);
        out << buf << '\n';
    }
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

inline std::vector<double> read_golden(const std::string& name) {
    std::ifstream in(golden_path(name));
    if (!in) throw std::runtime_error("missing golden file " + golden_path(name).string());
    std::vector<double> out;
    for (std::string line; std::getline(in, line);)
        if (!line.empty()) out.push_back(std::strtod(line.c_str(), nullptr));
    return out;
}

inline std::vector<double> flatten(const stair::SparseEmbedding& e) {
    std::vector<double> out;
    for (const auto& en : e.entries) {
        out.push_back(static_cast<double>(en.token));
        out.push_back(en.weight);
    }
    return out;
}

// Fixed inputs shared by the golden generator and the tests that read it.
inline stair::ModelConfig golden_config() { return tiny_config(static_cast<std::uint32_t>(toy_vocab().size()), 8, 2); }
inline constexpr std::uint64_t kGoldenSeed = 20240611;
inline const char* kGoldenText = "the red cat";
inline stair::PatchGrid golden_grid() {
    std::mt19937_64 rng(kGoldenSeed + 1);
    return random_grid(golden_config(), rng);
}

inline std::vector<stair::TrainExample> golden_batch() {
    const auto v = toy_vocab();
    const auto cfg = golden_config();
    std::mt19937_64 rng(kGoldenSeed + 2);
    std::vector<stair::TrainExample> out;
    for (const char* text : {"the red cat", "a dog", "cats playing", "the dog, the cat."}) {
        stair::TrainExample ex;
        ex.image = random_grid(cfg, rng);
        ex.text = stair::tokenize(v, text, cfg.max_text_len);
        ex.mask = stair::build_mask(v, ex.text);
        out.push_back(std::move(ex));
    }
    return out;
}

/// Loss components and temperature of two consecutive training steps from
/// the golden model, one masked and one joint.
inline std::vector<double> golden_two_steps() {
    const auto v = toy_vocab();
    stair::Model m = stair::Model::initialize(golden_config(), kGoldenSeed);
    const auto batch = golden_batch();
    std::vector<const stair::TrainExample*> ptrs;
    for (const auto& ex : batch) ptrs.push_back(&ex);
    stair::AdamW opt;
    std::vector<double> out;
    for (int step = 0; step < 2; ++step) {
        stair::StepFlags flags;
        flags.mask_text = step == 0;
        flags.lr = 1e-2;
        flags.lambda_image = flags.lambda_text = 1e-2;
        const auto rec = stair::train_step(m, ptrs, flags, opt, v.specials().pad);
        for (double x : {rec.loss, rec.contrastive, rec.flops_image, rec.flops_text, rec.temperature}) out.push_back(x);
    }
    return out;
}

} // namespace testutil
