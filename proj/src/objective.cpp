#include "stair/objective.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "stair/errors.hpp"

namespace stair {

namespace {

double symmetric_xent(const std::vector<double>& sim, std::size_t n, double temperature) {
    std::vector<double> row(n), col(n);
    double forward = 0.0, backward = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            row[j] = sim[i * n + j] / temperature;
            col[j] = sim[j * n + i] / temperature;
        }
        forward += ad::softmax_xent(row, i);
        backward += ad::softmax_xent(col, i);
    }
    return 0.5 * (forward + backward) / static_cast<double>(n);
}

double dense_cosine(std::span<const double> a, std::span<const double> b) {
    const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
    const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
}

} // namespace

double LossConfig::temperature() const { return std::max(std::exp(log_temperature), temperature_floor); }

double cosine_sim(const SparseEmbedding& a, const SparseEmbedding& b) {
    const double na = a.norm();
    const double nb = b.norm();
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot(a, b) / (na * nb);
}

double contrastive_loss(const BatchEmbeddings& batch, const LossConfig& cfg) {
    const std::size_t n = batch.image_embs.size();
    if (n == 0 || batch.text_embs.size() != n) throw_invalid("contrastive_loss: batch must hold N >= 1 aligned pairs");
    std::vector<double> sim(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) sim[i * n + j] = cosine_sim(batch.image_embs[i], batch.text_embs[j]);
    return symmetric_xent(sim, n, cfg.temperature());
}

double flops_loss(std::span<const SparseEmbedding> embs, std::size_t vocab_size) {
    if (embs.empty()) throw_invalid("flops_loss: empty batch");
    std::vector<double> sums(vocab_size, 0.0);
    for (const auto& e : embs) {
        for (const auto& [t, w] : e.entries) {
            if (t >= vocab_size) throw_invalid("flops_loss: token id out of range");
            sums[t] += w;
        }
    }
    const double n = static_cast<double>(embs.size());
    double total = 0.0;
    for (double s : sums) {
        const double mean = s / n;
        total += mean * mean;
    }
    return total;
}

LossBreakdown total_loss(const BatchEmbeddings& batch, std::size_t vocab_size, const LossConfig& cfg) {
    LossBreakdown out;
    out.contrastive = contrastive_loss(batch, cfg);
    out.flops_image = flops_loss(batch.image_embs, vocab_size);
    out.flops_text = flops_loss(batch.text_embs, vocab_size);
    out.total = out.contrastive + cfg.lambda_image * out.flops_image + cfg.lambda_text * out.flops_text;
    return out;
}

double dense_baseline_loss(const Tensor& image_embs, const Tensor& text_embs, const LossConfig& cfg) {
    const std::size_t n = image_embs.rows();
    if (n == 0 || text_embs.rows() != n || image_embs.cols() != text_embs.cols()) {
        throw_invalid("dense_baseline_loss: batches must be aligned and non-empty");
    }
    std::vector<double> sim(n * n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) sim[i * n + j] = dense_cosine(image_embs.row(i), text_embs.row(j));
    return symmetric_xent(sim, n, cfg.temperature());
}

ad::Var contrastive_loss(ad::Var image_embs, ad::Var text_embs, ad::Var log_temperature, double floor) {
    using namespace ad;
    const std::size_t n = image_embs.value().rows();
    if (n == 0 || text_embs.value().rows() != n) throw_invalid("contrastive_loss: batch must hold N >= 1 aligned pairs");
    const Var sim = matmul_nt(l2_normalize_rows(image_embs), l2_normalize_rows(text_embs));
    const Var logits = divide_by_temperature(sim, log_temperature, floor);
    std::vector<std::size_t> diag(n);
    std::iota(diag.begin(), diag.end(), std::size_t{0});
    const Var i2t = softmax_xent_rows(logits, diag);
    const Var t2i = softmax_xent_rows(transpose(logits), diag);
    const std::pair<double, Var> terms[] = {{0.5, i2t}, {0.5, t2i}};
    return linear_combination(terms);
}

LossVars total_loss(ad::Var image_embs, ad::Var text_embs, ad::Var log_temperature, double lambda_image,
                    double lambda_text, double floor) {
    using namespace ad;
    LossVars out;
    out.contrastive = contrastive_loss(image_embs, text_embs, log_temperature, floor);
    out.flops_image = column_mean_square_sum(image_embs);
    out.flops_text = column_mean_square_sum(text_embs);
    const std::pair<double, Var> terms[] = {
        {1.0, out.contrastive}, {lambda_image, out.flops_image}, {lambda_text, out.flops_text}};
    out.total = linear_combination(terms);
    return out;
}

} // namespace stair
