#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stair/sparse.hpp"
#include "stair/vocab.hpp"

namespace stair {

using DocId = std::uint32_t;

struct Posting {
    DocId doc = 0;
    double weight = 0.0;

    friend bool operator==(const Posting&, const Posting&) = default;
};

struct PostingList {
    TokenId token = 0;
    std::vector<Posting> postings; // strictly increasing doc ids

    friend bool operator==(const PostingList&, const PostingList&) = default;
};

struct ScoredDoc {
    DocId doc = 0;
    double score = 0.0;

    friend bool operator==(const ScoredDoc&, const ScoredDoc&) = default;
};

struct SearchResult {
    std::vector<ScoredDoc> ranked; // score descending, then doc id ascending
    std::size_t k_requested = 0;
    // Accumulator updates performed: equals the summed posting-list length
    // of the query's tokens.
    std::size_t touches = 0;
};

/// Immutable token -> postings map with per-document norms. Empty documents
/// are indexed with norm 0 and never score.
class InvertedIndex {
public:
    InvertedIndex() = default;

    /// Throws on duplicate doc ids or invalid embeddings. The result does
    /// not depend on corpus order.
    static InvertedIndex build(std::span<const std::pair<DocId, SparseEmbedding>> corpus);

    /// Exact top-k by dot product, or by cosine when `normalize` is set.
    SearchResult search(const SparseEmbedding& query, std::size_t k, bool normalize) const;

    /// Binary mask over the query's content tokens, unnormalized. Never runs
    /// a text encoder.
    SearchResult mask_search(const Vocabulary& vocab, std::string_view text, std::size_t k,
                             std::size_t max_len = 64) const;

    std::size_t doc_count() const { return doc_ids_.size(); }
    const std::vector<PostingList>& lists() const { return lists_; }
    const std::vector<DocId>& doc_ids() const { return doc_ids_; }
    double doc_norm(DocId doc) const;
    const PostingList* find(TokenId token) const;

    /// Rebuilds each document's embedding from the postings.
    std::vector<std::pair<DocId, SparseEmbedding>> reconstruct() const;

    std::string serialize() const;
    static InvertedIndex deserialize(const std::string& bytes);
    void save(const std::filesystem::path& path) const;
    static InvertedIndex load(const std::filesystem::path& path);

    friend bool operator==(const InvertedIndex&, const InvertedIndex&) = default;

private:
    std::vector<PostingList> lists_; // ascending token id
    std::vector<DocId> doc_ids_;     // ascending
    std::vector<double> norms_;      // parallel to doc_ids_
};

/// Densified dot product (or cosine) over every document; the reference the
/// index must agree with.
SearchResult brute_force_search(std::span<const std::pair<DocId, SparseEmbedding>> corpus,
                                const SparseEmbedding& query, std::size_t k, bool normalize);

/// The unit-weight query mask_search uses.
SparseEmbedding mask_query(const Vocabulary& vocab, std::string_view text, std::size_t max_len = 64);

} // namespace stair
