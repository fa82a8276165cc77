#pragma once

#include <span>
#include <vector>

#include "stair/autodiff.hpp"
#include "stair/sparse.hpp"

namespace stair {

/// Aligned image/text embeddings of one batch: pair i is (image_embs[i], text_embs[i]).
struct BatchEmbeddings {
    std::vector<SparseEmbedding> image_embs;
    std::vector<SparseEmbedding> text_embs;
};

struct LossConfig {
    double lambda_image = 0.0;
    double lambda_text = 0.0;
    double log_temperature = -2.659260036932778; // ln(0.07)
    double temperature_floor = 0.01;

    double temperature() const;
};

double cosine_sim(const SparseEmbedding& a, const SparseEmbedding& b);

/// Symmetric in-batch InfoNCE: mean of the image->text and text->image
/// cross-entropies over the cosine matrix divided by the temperature.
double contrastive_loss(const BatchEmbeddings& batch, const LossConfig& cfg);

/// sum over all tokens of the squared batch-mean weight; streams the sparse
/// entries so the N x |V| matrix is never formed.
double flops_loss(std::span<const SparseEmbedding> embs, std::size_t vocab_size);

struct LossBreakdown {
    double total = 0.0;
    double contrastive = 0.0;
    double flops_image = 0.0;
    double flops_text = 0.0;
};

LossBreakdown total_loss(const BatchEmbeddings& batch, std::size_t vocab_size, const LossConfig& cfg);

/// Same contrastive form over dense vectors (one row per item), no FLOPs term.
double dense_baseline_loss(const Tensor& image_embs, const Tensor& text_embs, const LossConfig& cfg);

// ---- tape forms used by training and gradient checks ----------------------

struct LossVars {
    ad::Var total;
    ad::Var contrastive;
    ad::Var flops_image;
    ad::Var flops_text;
};

/// image_embs and text_embs are [N x D] with row i aligned.
ad::Var contrastive_loss(ad::Var image_embs, ad::Var text_embs, ad::Var log_temperature, double floor);
LossVars total_loss(ad::Var image_embs, ad::Var text_embs, ad::Var log_temperature, double lambda_image,
                    double lambda_text, double floor);

} // namespace stair
