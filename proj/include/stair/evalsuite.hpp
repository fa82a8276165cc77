#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stair/datagen.hpp"
#include "stair/model.hpp"
#include "stair/projection.hpp"
#include "stair/sparse.hpp"
#include "stair/vocab.hpp"

namespace stair {

/// Embeddings of an evaluation split. Sparse vectors are always filled for
/// a sparse-head model; dense rows only for a dense-head model.
struct EncodedSplit {
    std::vector<SparseEmbedding> images;
    std::vector<SparseEmbedding> texts;
    std::vector<std::vector<double>> dense_images;
    std::vector<std::vector<double>> dense_texts;
    bool dense = false;
};

/// Captions get the "a photo of " prompt when `prompt` is set.
EncodedSplit encode_split(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples,
                          bool prompt);

// ---- retrieval --------------------------------------------------------------

struct RetrievalReport {
    std::map<std::uint32_t, double> text_to_image; // K -> recall
    std::map<std::uint32_t, double> image_to_text;
    std::size_t queries = 0;

    friend bool operator==(const RetrievalReport&, const RetrievalReport&) = default;
};

enum class Ranker { Index, BruteForce };

const std::vector<std::uint32_t>& default_recall_ks();

/// Pair i's mate is item i. Ranking is by cosine, ties by ascending id.
RetrievalReport retrieval_from_embeddings(const EncodedSplit& enc, std::span<const std::uint32_t> ks, Ranker ranker);

RetrievalReport eval_retrieval(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples,
                               std::span<const std::uint32_t> ks, Ranker ranker = Ranker::Index);

/// Text->image recall@K of binary caption masks against image embeddings,
/// unnormalized. The text encoder is never run.
std::map<std::uint32_t, double> mask_retrieval(const Vocabulary& vocab, std::span<const SparseEmbedding> images,
                                               std::span<const PairedSample> samples, std::span<const std::uint32_t> ks,
                                               std::size_t max_len);

/// recall@1 of uniformly random rankings over n items: the analytic mean
/// 1/n, the binomial standard deviation over n queries, and a simulated
/// estimate from `trials` seeded permutations.
struct PermutationNull {
    double mean = 0.0;
    double stddev = 0.0;
    double simulated_mean = 0.0;
    double simulated_stddev = 0.0;
};
PermutationNull permutation_null(std::size_t n, std::size_t trials, std::uint64_t seed);

// ---- classification -----------------------------------------------------------

/// Fraction of images whose highest-cosine class embedding is the label.
/// Ties resolve to the lowest class index.
double zeroshot_accuracy(std::span<const SparseEmbedding> images, std::span<const SparseEmbedding> classes,
                         std::span<const std::uint32_t> labels);
double zeroshot_accuracy_dense(std::span<const std::vector<double>> images,
                               std::span<const std::vector<double>> classes, std::span<const std::uint32_t> labels);

/// Labels of the single-concept split.
std::vector<std::uint32_t> labels_of(std::span<const PairedSample> samples);

/// Zero-shot accuracy with "a photo of <word>" class prompts. Throws when a
/// prompt's class word tokenizes to nothing but [UNK].
double eval_zeroshot(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> labeled,
                     const ConceptBank& bank);

struct ProbeConfig {
    std::uint32_t epochs = 200;
    double lr = 0.1;
};

struct ProbeResult {
    double train_accuracy = 0.0;
    double test_accuracy = 0.0;
};

/// Multinomial logistic regression by full-batch gradient descent from a
/// zero start. Features are fixed inputs.
ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, std::span<const std::uint32_t> train_y,
                         const std::vector<std::vector<double>>& test_x, std::span<const std::uint32_t> test_y,
                         std::uint32_t classes, const ProbeConfig& cfg);

/// Probe on frozen image embeddings: first half of `labeled` trains, second
/// half tests.
ProbeResult eval_linear_probe(const Model& model, std::span<const PairedSample> labeled, std::uint32_t classes,
                              const ProbeConfig& cfg);

// ---- interpretability ---------------------------------------------------------

struct InterpReport {
    std::map<std::uint32_t, double> top_k; // K -> accuracy
    std::size_t candidate_space = 0;
    std::size_t images = 0;

    friend bool operator==(const InterpReport&, const InterpReport&) = default;
};

const std::vector<std::uint32_t>& default_interp_ks();

/// 1-based rank of `token` among `candidates` (all tokens when empty) when
/// ordered by score descending with ties by ascending token id.
/// Tokens with score 0 rank below every positive one.
std::size_t token_rank(std::span<const double> scores, TokenId token, std::span<const TokenId> candidates);

/// Content tokens of each class word.
std::vector<std::vector<TokenId>> class_tokens(const Vocabulary& vocab, const ConceptBank& bank);

/// For each image, the best rank over its class's sub-words; a hit at K
/// when that rank <= K. `scores[i]` holds one score per vocabulary token.
InterpReport interpretability_from_scores(const std::vector<std::vector<double>>& scores,
                                          std::span<const std::uint32_t> labels,
                                          const std::vector<std::vector<TokenId>>& classes,
                                          std::span<const std::uint32_t> ks, std::span<const TokenId> candidates = {});

/// Sparse head: scores are the embedding's own weights. Dense head: cosine
/// against the dense text embedding of each single token.
InterpReport eval_interpretability(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> labeled,
                                   const ConceptBank& bank, std::span<const std::uint32_t> ks,
                                   std::span<const TokenId> candidates = {});

// ---- sparsity -----------------------------------------------------------------

struct ActivationStats {
    double mean = 0.0;
    double median = 0.0;
    std::size_t max = 0;
    std::size_t count = 0;

    friend bool operator==(const ActivationStats&, const ActivationStats&) = default;
};

struct SparsityStats {
    ActivationStats image;
    ActivationStats text;

    friend bool operator==(const SparsityStats&, const SparsityStats&) = default;
};

ActivationStats activation_stats(std::span<const SparseEmbedding> embs);
SparsityStats eval_sparsity(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples);

// ---- localization ---------------------------------------------------------------

struct LocalizationReport {
    double hit_rate = 0.0;
    std::size_t images = 0;
};

/// Fraction of single-concept images whose heatmap for the concept word
/// peaks inside the concept's placed cells. Ties go to the first cell.
LocalizationReport eval_localization(const Model& model, const Vocabulary& vocab,
                                     std::span<const PairedSample> labeled, const ConceptBank& bank);

// ---- reports --------------------------------------------------------------------

/// Greyscale raster, plain-text PGM (P2), values 0..255.
struct GrayImage {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<std::uint8_t> pixels;

    friend bool operator==(const GrayImage&, const GrayImage&) = default;
};

GrayImage to_gray(const Heatmap& h);
std::string write_pgm(const GrayImage& img);
GrayImage read_pgm(const std::string& text);

struct NamedHeatmap {
    std::string name;
    Heatmap heatmap;
};

/// Writes report.json (the given object, keys as inserted), one .pgm per
/// heatmap, and manifest.json listing every file with its SHA-256.
/// Returns the manifest path.
std::filesystem::path export_report(const std::filesystem::path& out_dir, const std::string& report_json,
                                    std::span<const NamedHeatmap> heatmaps);

} // namespace stair
