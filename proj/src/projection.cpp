#include "stair/projection.hpp"

#include <cmath>

#include "stair/errors.hpp"

namespace stair {

namespace {

const std::vector<ParamGroup> kAllGroups = {ParamGroup::TextTower, ParamGroup::ImageTower, ParamGroup::Head,
                                            ParamGroup::SharedEmbedding, ParamGroup::Temperature};

} // namespace

ad::Var head_transform(const ProjectionParamsT<ad::Var>& p, ad::Var feats, double eps) {
    using namespace ad;
    if (feats.value().cols() != p.transform_fc.value().rows()) {
        throw_invalid("project_positions: feature width " + std::to_string(feats.value().cols()) +
                      " does not match model width " + std::to_string(p.transform_fc.value().rows()));
    }
    return layer_norm(gelu(add_row(matmul(feats, p.transform_fc), p.transform_bias)), p.ln_gain, p.ln_bias, eps);
}

ad::Var project_positions(const ProjectionParamsT<ad::Var>& p, ad::Var tied_embedding, ad::Var feats, double eps) {
    return ad::add_row(ad::matmul_nt(head_transform(p, feats, eps), tied_embedding), p.logit_bias);
}

Tensor project_positions(const Model& model, const Tensor& feats) {
    ad::Tape tape;
    const BoundParams b = bind_params(tape, model, kAllGroups);
    return project_positions(b.projection, b.text.token_embedding, tape.constant(feats), model.config.ln_eps).value();
}

SparseEmbedding pool_sparse(const Tensor& logits, const std::vector<bool>& valid) {
    if (valid.size() != logits.rows()) throw_invalid("pool_sparse: validity flags length mismatch");
    SparseEmbedding out;
    bool any = false;
    for (bool v : valid) any = any || v;
    if (!any) throw_invalid("pool_sparse: no valid positions");
    for (std::size_t k = 0; k < logits.cols(); ++k) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < logits.rows(); ++j)
            if (valid[j]) mx = std::max(mx, logits(j, k));
        if (mx > 0.0) out.entries.push_back({static_cast<TokenId>(k), std::log1p(mx)});
    }
    return out;
}

std::vector<bool> text_validity(const TokenSeq& seq, TokenId pad_id) {
    std::vector<bool> v(seq.ids.size());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = seq.ids[i] != pad_id;
    return v;
}

Embedder::Embedder(const Model& model)
    : model_(model), tape_(std::make_unique<ad::Tape>()),
      bound_(std::make_unique<BoundParams>(bind_params(*tape_, model, kAllGroups))), mark_(tape_->node_count()) {}

Embedder::~Embedder() = default;

Tensor Embedder::text_logits(const TokenSeq& seq, TokenId pad_id) {
    const ad::Var h = encode_text(model_.config, bound_->text, seq, pad_id);
    Tensor out = project_positions(bound_->projection, bound_->text.token_embedding, h, model_.config.ln_eps).value();
    tape_->rewind(mark_);
    return out;
}

Tensor Embedder::image_logits(const PatchGrid& img) {
    const ad::Var h = encode_image(model_.config, bound_->image, img);
    Tensor out = project_positions(bound_->projection, bound_->text.token_embedding, h, model_.config.ln_eps).value();
    tape_->rewind(mark_);
    return out;
}

SparseEmbedding Embedder::text(const TokenSeq& seq, TokenId pad_id) {
    return pool_sparse(text_logits(seq, pad_id), text_validity(seq, pad_id));
}

SparseEmbedding Embedder::image(const PatchGrid& img) {
    const Tensor logits = image_logits(img);
    return pool_sparse(logits, std::vector<bool>(logits.rows(), true));
}

std::vector<double> Embedder::dense_text(const TokenSeq& seq, TokenId pad_id) {
    const ad::Var h = encode_text(model_.config, bound_->text, seq, pad_id);
    const ad::Var t = head_transform(bound_->projection, h, model_.config.ln_eps);
    const Tensor out = ad::mean_rows(t, text_validity(seq, pad_id)).value();
    tape_->rewind(mark_);
    return {out.data().begin(), out.data().end()};
}

std::vector<double> Embedder::dense_image(const PatchGrid& img) {
    const ad::Var h = encode_image(model_.config, bound_->image, img);
    const ad::Var t = head_transform(bound_->projection, h, model_.config.ln_eps);
    const Tensor out = ad::mean_rows(t, std::vector<bool>(img.cells(), true)).value();
    tape_->rewind(mark_);
    return {out.data().begin(), out.data().end()};
}

SparseEmbedding embed_text(const Model& model, const TokenSeq& seq, TokenId pad_id) {
    return Embedder(model).text(seq, pad_id);
}

SparseEmbedding embed_image(const Model& model, const PatchGrid& img) { return Embedder(model).image(img); }

Heatmap heatmap_from_logits(const Tensor& image_logits, std::uint32_t height, std::uint32_t width,
                            std::span<const TokenId> tokens) {
    if (tokens.empty()) throw_invalid("heatmap: query has no content tokens");
    if (image_logits.rows() != static_cast<std::size_t>(height) * width) {
        throw_invalid("heatmap: logits rows do not match the grid");
    }
    Heatmap h{height, width, Tensor({height, width}), {tokens.begin(), tokens.end()}};
    for (std::size_t g = 0; g < image_logits.rows(); ++g) {
        double s = 0.0;
        for (TokenId t : tokens) s += image_logits(g, t);
        h.values[g] = s / static_cast<double>(tokens.size());
    }
    return h;
}

Heatmap heatmap(const Model& model, const Vocabulary& vocab, const PatchGrid& img, std::string_view query) {
    const TokenSeq seq = tokenize(vocab, query, model.config.max_text_len);
    std::vector<TokenId> content;
    for (TokenId id : seq.ids)
        if (!vocab.is_special(id)) content.push_back(id);
    if (content.empty()) throw_invalid("heatmap: query '" + std::string(query) + "' has no in-vocabulary content tokens");
    return heatmap_from_logits(Embedder(model).image_logits(img), img.height, img.width, content);
}

} // namespace stair
