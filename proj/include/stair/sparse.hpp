#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "stair/vocab.hpp"

namespace stair {

struct SparseEntry {
    TokenId token = 0;
    double weight = 0.0;

    friend bool operator==(const SparseEntry&, const SparseEntry&) = default;
};

/// Vector over the vocabulary with only positive entries stored, sorted by
/// strictly increasing token id.
struct SparseEmbedding {
    std::vector<SparseEntry> entries;

    static SparseEmbedding from_dense(std::span<const double> dense);

    std::vector<double> densify(std::size_t vocab_size) const;
    double norm() const;
    double weight(TokenId token) const;
    std::size_t active_count() const { return entries.size(); }
    bool empty() const { return entries.empty(); }

    /// Throws unless ids are strictly increasing, < vocab_size, weights > 0.
    void validate(std::size_t vocab_size) const;

    friend bool operator==(const SparseEmbedding&, const SparseEmbedding&) = default;
};

double dot(const SparseEmbedding& a, const SparseEmbedding& b);

/// Text record: "<id>\t<token>:<weight> <token>:<weight> ..." with weights
/// printed to round-trip exactly.
struct NamedEmbedding {
    std::string id;
    SparseEmbedding embedding;
};

void write_embeddings(std::ostream& out, std::span<const NamedEmbedding> items);
std::vector<NamedEmbedding> read_embeddings(std::istream& in);

} // namespace stair
