#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "stair/autodiff.hpp"
#include "stair/tensor.hpp"
#include "stair/vocab.hpp"

namespace stair {

enum class HeadKind : std::uint32_t {
    Sparse = 0, // vocabulary projection + log-ReLU-max pooling
    Dense = 1,  // mean-pooled transform output (contrastive baseline)
};

struct ModelConfig {
    std::uint32_t vocab_size = 0;
    std::uint32_t d_model = 32;
    std::uint32_t depth = 2;
    std::uint32_t heads = 2;
    std::uint32_t mlp_hidden = 64;
    std::uint32_t max_text_len = 24;
    std::uint32_t grid_height = 4;
    std::uint32_t grid_width = 4;
    std::uint32_t patch_dim = 16;
    HeadKind head = HeadKind::Sparse;
    double ln_eps = 1e-5;
    double init_std = 0.02;
    double temperature_init = 0.07;
    double temperature_floor = 0.01;

    std::uint32_t grid_cells() const { return grid_height * grid_width; }
    void validate() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Parameter groups decide what a training stage may update.
enum class ParamGroup {
    TextTower,
    ImageTower,
    Head,
    SharedEmbedding, // token table: text-tower input and tied projection matrix
    Temperature,
};

template <class T>
struct BlockParamsT {
    T ln1_gain, ln1_bias;
    T wq, bq, wk, bk, wv, bv, wo, bo;
    T ln2_gain, ln2_bias;
    T w1, b1, w2, b2;
};

template <class T>
struct TextEncoderParamsT {
    T token_embedding; // [|V| x d]; also the projection's tied matrix
    T positional;      // [L x d]
    std::vector<BlockParamsT<T>> blocks;
};

template <class T>
struct ImageEncoderParamsT {
    T patch_proj; // [p_dim x d]
    T positional; // [G x d]
    std::vector<BlockParamsT<T>> blocks;
};

/// The token projection head. Its vocabulary matrix is not stored here: it
/// is the text tower's token_embedding (see tied_embedding()).
template <class T>
struct ProjectionParamsT {
    T transform_fc;   // [d x d]
    T transform_bias; // [d]
    T ln_gain, ln_bias;
    T logit_bias; // [|V|]
};

template <class T>
struct ModelParamsT {
    TextEncoderParamsT<T> text;
    ImageEncoderParamsT<T> image;
    ProjectionParamsT<T> projection;
    T log_temperature; // [1]
};

template <class Block, class F>
void visit_block(Block& b, const std::string& p, F&& f, ParamGroup g) {
    f(p + "ln1.gain", b.ln1_gain, g);
    f(p + "ln1.bias", b.ln1_bias, g);
    f(p + "attn.wq", b.wq, g);
    f(p + "attn.bq", b.bq, g);
    f(p + "attn.wk", b.wk, g);
    f(p + "attn.bk", b.bk, g);
    f(p + "attn.wv", b.wv, g);
    f(p + "attn.bv", b.bv, g);
    f(p + "attn.wo", b.wo, g);
    f(p + "attn.bo", b.bo, g);
    f(p + "ln2.gain", b.ln2_gain, g);
    f(p + "ln2.bias", b.ln2_bias, g);
    f(p + "mlp.w1", b.w1, g);
    f(p + "mlp.b1", b.b1, g);
    f(p + "mlp.w2", b.w2, g);
    f(p + "mlp.b2", b.b2, g);
}

/// Calls f(name, tensor, group) for every parameter in a fixed order. The
/// order defines the checkpoint layout.
template <class Params, class F>
void visit_params(Params& m, F&& f) {
    f("text.token_embedding", m.text.token_embedding, ParamGroup::SharedEmbedding);
    f("text.positional", m.text.positional, ParamGroup::TextTower);
    for (std::size_t i = 0; i < m.text.blocks.size(); ++i)
        visit_block(m.text.blocks[i], "text.block" + std::to_string(i) + ".", f, ParamGroup::TextTower);
    f("image.patch_proj", m.image.patch_proj, ParamGroup::ImageTower);
    f("image.positional", m.image.positional, ParamGroup::ImageTower);
    for (std::size_t i = 0; i < m.image.blocks.size(); ++i)
        visit_block(m.image.blocks[i], "image.block" + std::to_string(i) + ".", f, ParamGroup::ImageTower);
    f("head.transform_fc", m.projection.transform_fc, ParamGroup::Head);
    f("head.transform_bias", m.projection.transform_bias, ParamGroup::Head);
    f("head.ln_gain", m.projection.ln_gain, ParamGroup::Head);
    f("head.ln_bias", m.projection.ln_bias, ParamGroup::Head);
    f("head.logit_bias", m.projection.logit_bias, ParamGroup::Head);
    f("temperature.log", m.log_temperature, ParamGroup::Temperature);
}

using BlockParams = BlockParamsT<Tensor>;
using TextEncoderParams = TextEncoderParamsT<Tensor>;
using ImageEncoderParams = ImageEncoderParamsT<Tensor>;
using ProjectionParams = ProjectionParamsT<Tensor>;

/// All learnable state of both towers plus the shared head and temperature.
struct Model {
    ModelConfig config;
    ModelParamsT<Tensor> params;

    /// Random init from `seed`: matrices ~ N(0, init_std), LayerNorm gains 1,
    /// biases 0, temperature at temperature_init.
    static Model initialize(const ModelConfig& config, std::uint64_t seed);

    const Tensor& tied_embedding() const { return params.text.token_embedding; }

    void save(const std::filesystem::path& path) const;
    static Model load(const std::filesystem::path& path);
    std::string serialize() const;
    static Model deserialize(const std::string& bytes);
};

/// Tape-side mirror of Model. Frozen groups become constants.
using BoundParams = ModelParamsT<ad::Var>;

BoundParams bind_params(ad::Tape& tape, const Model& model, const std::vector<ParamGroup>& frozen = {});

/// Every parameter tensor in visit_params order.
std::vector<Tensor> parameter_tensors(const Model& model);
/// Reassembles vars recorded in visit_params order (one per parameter) into
/// the model's structure.
BoundParams assemble_params(const Model& model, std::span<const ad::Var> vars);

/// Synthetic image: one feature row per grid cell, row-major over cells.
struct PatchGrid {
    std::uint32_t height = 0;
    std::uint32_t width = 0;
    Tensor features; // [height*width x patch_dim]

    std::uint32_t cells() const { return height * width; }
};

/// Per-position text features h_j. Positions holding [PAD] are masked out
/// as attention keys.
ad::Var encode_text(const ModelConfig& cfg, const TextEncoderParamsT<ad::Var>& params, const TokenSeq& seq,
                    TokenId pad_id);
ad::Var encode_image(const ModelConfig& cfg, const ImageEncoderParamsT<ad::Var>& params, const PatchGrid& img);

/// Value-only conveniences over a throwaway tape.
Tensor encode_text(const Model& model, const TokenSeq& seq, TokenId pad_id);
Tensor encode_image(const Model& model, const PatchGrid& img);

/// Number of text-tower forward passes since process start. Lets callers
/// assert that a code path never touches the text encoder.
std::uint64_t text_forward_count();

} // namespace stair
