#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "stair/model.hpp"
#include "stair/vocab.hpp"

namespace stair {

struct ConceptSpec {
    std::uint32_t id = 0;
    std::string word;
    Tensor signature; // [patch_dim]
    std::vector<std::string> distractor_words;
};

struct ConceptBank {
    std::vector<ConceptSpec> concepts;
    std::vector<double> frequencies; // relative draw weights, one per concept

    /// Words must tokenize to non-UNK content tokens; signatures pairwise
    /// more than 15 degrees apart.
    void validate(const Vocabulary& vocab) const;
};

struct DatagenConfig {
    std::uint64_t seed = 1;
    std::uint32_t n_train = 4096;
    std::uint32_t n_val = 256;
    std::uint32_t n_test = 64; // at most the number of held-out combinations
    std::uint32_t n_labeled = 200;
    std::uint32_t n_concepts = 10;
    std::uint32_t grid_height = 4;
    std::uint32_t grid_width = 4;
    std::uint32_t patch_dim = 16;
    std::uint32_t block = 2; // side of the square cell block a concept occupies
    std::uint32_t max_concepts = 3;
    double noise_sigma = 0.5;
    double signature_norm = 3.0;
    double holdout_fraction = 0.4; // share of multi-concept combinations kept out of train/val
    double distractor_prob = 0.5;

    void validate() const;
};

/// Multi-concept combinations reserved for the test split.
std::size_t held_out_count(const DatagenConfig& cfg);

struct PairedSample {
    PatchGrid image;
    std::string caption;
    std::vector<std::uint32_t> concepts; // sorted concept ids
    std::map<std::uint32_t, std::vector<std::uint32_t>> placements; // concept -> row-major cells
};

struct Dataset {
    DatagenConfig config;
    ConceptBank bank;
    std::vector<PairedSample> train;
    std::vector<PairedSample> val;
    std::vector<PairedSample> test;    // concept combinations never seen in train/val
    std::vector<PairedSample> labeled; // single-concept images, label = concepts[0]
};

/// Concept words and orthogonalized random signatures.
ConceptBank default_concept_bank(const DatagenConfig& cfg);

/// Built-in vocabulary covering every word the generator can emit.
Vocabulary default_vocabulary(const ConceptBank& bank);

/// One sample with the given concepts. Throws when the blocks do not fit.
PairedSample make_sample(const DatagenConfig& cfg, const ConceptBank& bank, std::vector<std::uint32_t> concepts,
                         std::mt19937_64& rng);

/// Draws 1..max_concepts distinct concepts, weighted by frequency, without replacement.
std::vector<std::uint32_t> draw_concepts(const DatagenConfig& cfg, const ConceptBank& bank, std::mt19937_64& rng);

Dataset generate(const DatagenConfig& cfg, const ConceptBank& bank);
Dataset generate(const DatagenConfig& cfg);

/// ("cat", "a photo of cat") per concept.
std::vector<std::pair<std::string, std::string>> prompt_classes(const ConceptBank& bank);

/// Caption with the evaluation prompt prefix.
std::string with_prompt(const std::string& caption);

// ---- files ------------------------------------------------------------------

void write_corpus(std::ostream& out, const std::vector<PairedSample>& samples, std::uint32_t patch_dim);
std::vector<PairedSample> read_corpus(std::istream& in);

void save_bank(const std::filesystem::path& path, const ConceptBank& bank);
ConceptBank load_bank(const std::filesystem::path& path);

/// Writes vocab.txt, concepts.json, datagen.json and one .corpus per split.
void save_dataset(const std::filesystem::path& dir, const Dataset& data, const Vocabulary& vocab);
Dataset load_dataset(const std::filesystem::path& dir);

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

} // namespace stair
