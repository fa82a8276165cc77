#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "stair/autodiff.hpp"
#include "stair/model.hpp"
#include "stair/sparse.hpp"
#include "stair/vocab.hpp"

namespace stair {

/// layer_norm(gelu(fc(h))): the transform half of the projection head.
ad::Var head_transform(const ProjectionParamsT<ad::Var>& p, ad::Var feats, double eps);

/// Per-position vocabulary logits e * transform(h_j) + b, with e the tied
/// token table. [n x |V|].
ad::Var project_positions(const ProjectionParamsT<ad::Var>& p, ad::Var tied_embedding, ad::Var feats, double eps);
Tensor project_positions(const Model& model, const Tensor& feats);

/// w_k = log(1 + max(0, max_{valid j} logits[j, k])), zeros omitted.
SparseEmbedding pool_sparse(const Tensor& logits, const std::vector<bool>& valid);

/// Validity flag per position: false for [PAD].
std::vector<bool> text_validity(const TokenSeq& seq, TokenId pad_id);

struct Heatmap {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    Tensor values; // [height x width]
    std::vector<TokenId> query_tokens;
};

/// Forward-only view of a model with its parameters bound once; reused for
/// bulk embedding. Not thread-safe; use one per thread.
class Embedder {
public:
    explicit Embedder(const Model& model);
    ~Embedder();
    Embedder(const Embedder&) = delete;
    Embedder& operator=(const Embedder&) = delete;

    const Model& model() const { return model_; }

    SparseEmbedding text(const TokenSeq& seq, TokenId pad_id);
    SparseEmbedding image(const PatchGrid& img);
    Tensor text_logits(const TokenSeq& seq, TokenId pad_id);
    Tensor image_logits(const PatchGrid& img);

    /// Dense-head embeddings: mean over valid positions of the transform.
    std::vector<double> dense_text(const TokenSeq& seq, TokenId pad_id);
    std::vector<double> dense_image(const PatchGrid& img);

private:
    const Model& model_;
    std::unique_ptr<ad::Tape> tape_;
    std::unique_ptr<BoundParams> bound_;
    std::size_t mark_ = 0;
};

SparseEmbedding embed_text(const Model& model, const TokenSeq& seq, TokenId pad_id);
SparseEmbedding embed_image(const Model& model, const PatchGrid& img);

/// Mean over the query's content tokens of the image-position logits. Only
/// the image tower runs.
Heatmap heatmap(const Model& model, const Vocabulary& vocab, const PatchGrid& img, std::string_view query);
Heatmap heatmap_from_logits(const Tensor& image_logits, std::uint32_t height, std::uint32_t width,
                            std::span<const TokenId> tokens);

} // namespace stair
