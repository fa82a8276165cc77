#include "stair/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "stair/binio.hpp"
#include "stair/errors.hpp"

namespace stair {

namespace {

constexpr std::string_view kCheckpointMagic = "STAIRCKP";
constexpr std::uint32_t kCheckpointVersion = 1;

std::atomic<std::uint64_t> g_text_forwards{0};

BlockParams make_block(std::uint32_t d, std::uint32_t hidden) {
    BlockParams b;
    b.ln1_gain = Tensor({d}, 1.0);
    b.ln1_bias = Tensor({d});
    b.wq = Tensor({d, d});
    b.bq = Tensor({d});
    b.wk = Tensor({d, d});
    b.bk = Tensor({d});
    b.wv = Tensor({d, d});
    b.bv = Tensor({d});
    b.wo = Tensor({d, d});
    b.bo = Tensor({d});
    b.ln2_gain = Tensor({d}, 1.0);
    b.ln2_bias = Tensor({d});
    b.w1 = Tensor({d, hidden});
    b.b1 = Tensor({hidden});
    b.w2 = Tensor({hidden, d});
    b.b2 = Tensor({d});
    return b;
}

ModelParamsT<Tensor> allocate(const ModelConfig& c) {
    ModelParamsT<Tensor> p;
    const std::uint32_t d = c.d_model;
    p.text.token_embedding = Tensor({c.vocab_size, d});
    p.text.positional = Tensor({c.max_text_len, d});
    p.image.patch_proj = Tensor({c.patch_dim, d});
    p.image.positional = Tensor({c.grid_cells(), d});
    for (std::uint32_t i = 0; i < c.depth; ++i) {
        p.text.blocks.push_back(make_block(d, c.mlp_hidden));
        p.image.blocks.push_back(make_block(d, c.mlp_hidden));
    }
    p.projection.transform_fc = Tensor({d, d});
    p.projection.transform_bias = Tensor({d});
    p.projection.ln_gain = Tensor({d}, 1.0);
    p.projection.ln_bias = Tensor({d});
    p.projection.logit_bias = Tensor({c.vocab_size});
    p.log_temperature = Tensor({1}, std::log(c.temperature_init));
    return p;
}

ad::Var transformer_block(const BlockParamsT<ad::Var>& b, ad::Var x, std::uint32_t heads, double eps,
                          const std::vector<bool>& key_valid) {
    using namespace ad;
    const Var h = layer_norm(x, b.ln1_gain, b.ln1_bias, eps);
    const Var q = add_row(matmul(h, b.wq), b.bq);
    const Var k = add_row(matmul(h, b.wk), b.bk);
    const Var v = add_row(matmul(h, b.wv), b.bv);
    const std::size_t d = x.value().cols();
    const std::size_t dh = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::uint32_t i = 0; i < heads; ++i) {
        const Var qh = slice_cols(q, i * dh, dh);
        const Var kh = slice_cols(k, i * dh, dh);
        const Var vh = slice_cols(v, i * dh, dh);
        const Var attn = softmax_rows(scale(matmul_nt(qh, kh), inv_sqrt), key_valid);
        outs.push_back(matmul(attn, vh));
    }
    const Var merged = heads == 1 ? outs[0] : concat_cols(outs);
    x = add(x, add_row(matmul(merged, b.wo), b.bo));
    const Var h2 = layer_norm(x, b.ln2_gain, b.ln2_bias, eps);
    const Var m = add_row(matmul(gelu(add_row(matmul(h2, b.w1), b.b1)), b.w2), b.b2);
    return add(x, m);
}

void write_config(std::ostream& out, const ModelConfig& c) {
    for (std::uint32_t v : {c.vocab_size, c.d_model, c.depth, c.heads, c.mlp_hidden, c.max_text_len, c.grid_height,
                            c.grid_width, c.patch_dim, static_cast<std::uint32_t>(c.head)})
        binio::write_u32(out, v);
    for (double v : {c.ln_eps, c.init_std, c.temperature_init, c.temperature_floor}) binio::write_f64(out, v);
}

ModelConfig read_config(std::istream& in) {
    ModelConfig c;
    c.vocab_size = binio::read_u32(in);
    c.d_model = binio::read_u32(in);
    c.depth = binio::read_u32(in);
    c.heads = binio::read_u32(in);
    c.mlp_hidden = binio::read_u32(in);
    c.max_text_len = binio::read_u32(in);
    c.grid_height = binio::read_u32(in);
    c.grid_width = binio::read_u32(in);
    c.patch_dim = binio::read_u32(in);
    const std::uint32_t head = binio::read_u32(in);
    if (head > 1) throw_format("checkpoint: unknown head kind " + std::to_string(head));
    c.head = static_cast<HeadKind>(head);
    c.ln_eps = binio::read_f64(in);
    c.init_std = binio::read_f64(in);
    c.temperature_init = binio::read_f64(in);
    c.temperature_floor = binio::read_f64(in);
    return c;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab_size < 4) throw_config("model: vocab_size must cover the special tokens");
    if (d_model == 0 || heads == 0 || d_model % heads != 0) throw_config("model: d_model must be a multiple of heads");
    if (mlp_hidden == 0) throw_config("model: mlp_hidden must be positive");
    if (max_text_len < 3) throw_config("model: max_text_len must be at least 3");
    if (grid_cells() == 0 || patch_dim == 0) throw_config("model: image grid must be non-empty");
    if (!(ln_eps > 0.0) || !(init_std >= 0.0)) throw_config("model: ln_eps must be positive, init_std non-negative");
    if (!(temperature_floor > 0.0) || !(temperature_init >= temperature_floor)) {
        throw_config("model: temperature_init must be >= temperature_floor > 0");
    }
}

Model Model::initialize(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m{config, allocate(config)};
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, config.init_std);
    visit_params(m.params, [&](const std::string& name, Tensor& t, ParamGroup) {
        const bool random = t.rank() == 2;
        if (!random || name == "temperature.log") return;
        for (auto& v : t.data()) v = normal(rng);
    });
    return m;
}

std::string Model::serialize() const {
    std::ostringstream out;
    binio::write_bytes(out, kCheckpointMagic);
    binio::write_u32(out, kCheckpointVersion);
    write_config(out, config);
    std::uint32_t count = 0;
    visit_params(params, [&](const std::string&, const Tensor&, ParamGroup) { ++count; });
    binio::write_u32(out, count);
    visit_params(params, [&](const std::string& name, const Tensor& t, ParamGroup) {
        binio::write_u32(out, static_cast<std::uint32_t>(name.size()));
        binio::write_bytes(out, name);
        binio::write_u32(out, static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape()) binio::write_u64(out, d);
        for (double v : t.data()) binio::write_f64(out, v);
    });
    return out.str();
}

Model Model::deserialize(const std::string& bytes) {
    std::istringstream in(bytes);
    if (binio::read_bytes(in, kCheckpointMagic.size()) != kCheckpointMagic) throw_format("checkpoint: bad magic");
    const std::uint32_t version = binio::read_u32(in);
    if (version != kCheckpointVersion) throw_format("checkpoint: unsupported version " + std::to_string(version));
    ModelConfig config = read_config(in);
    try {
        config.validate();
    } catch (const Error& e) {
        throw_format(std::string("checkpoint: invalid config header: ") + e.what());
    }
    Model m{config, allocate(config)};
    const std::uint32_t count = binio::read_u32(in);
    std::uint32_t seen = 0;
    visit_params(m.params, [&](const std::string& name, Tensor& t, ParamGroup) {
        if (seen++ >= count) throw_format("checkpoint: missing tensor " + name);
        const std::string stored = binio::read_bytes(in, binio::read_u32(in));
        if (stored != name) throw_format("checkpoint: expected tensor " + name + ", found " + stored);
        const std::uint32_t rank = binio::read_u32(in);
        std::vector<std::size_t> shape(rank);
        for (auto& d : shape) d = binio::read_u64(in);
        if (shape != t.shape()) throw_format("checkpoint: tensor " + name + " has unexpected shape");
        for (auto& v : t.data()) v = binio::read_f64(in);
        require_finite(t, "checkpoint load");
    });
    if (seen != count) throw_format("checkpoint: unexpected extra tensors");
    if (in.peek() != std::char_traits<char>::eof()) throw_format("checkpoint: trailing bytes");
    return m;
}

void Model::save(const std::filesystem::path& path) const { binio::write_file_atomic(path, serialize()); }

Model Model::load(const std::filesystem::path& path) { return deserialize(binio::read_file(path)); }

BoundParams bind_params(ad::Tape& tape, const Model& model, const std::vector<ParamGroup>& frozen) {
    BoundParams out;
    out.text.blocks.resize(model.params.text.blocks.size());
    out.image.blocks.resize(model.params.image.blocks.size());
    // Walk source and destination in lockstep; visit order is deterministic.
    std::vector<const Tensor*> sources;
    std::vector<ParamGroup> groups;
    visit_params(model.params, [&](const std::string&, const Tensor& t, ParamGroup g) {
        sources.push_back(&t);
        groups.push_back(g);
    });
    std::size_t i = 0;
    visit_params(out, [&](const std::string&, ad::Var& v, ParamGroup) {
        const bool is_frozen = std::find(frozen.begin(), frozen.end(), groups[i]) != frozen.end();
        v = is_frozen ? tape.constant(*sources[i]) : tape.variable(*sources[i]);
        ++i;
    });
    return out;
}

std::vector<Tensor> parameter_tensors(const Model& model) {
    std::vector<Tensor> out;
    visit_params(model.params, [&](const std::string&, const Tensor& t, ParamGroup) { out.push_back(t); });
    return out;
}

BoundParams assemble_params(const Model& model, std::span<const ad::Var> vars) {
    BoundParams out;
    out.text.blocks.resize(model.params.text.blocks.size());
    out.image.blocks.resize(model.params.image.blocks.size());
    std::size_t i = 0;
    visit_params(out, [&](const std::string& name, ad::Var& v, ParamGroup) {
        if (i >= vars.size()) throw_invalid("assemble_params: too few vars (stopped at " + name + ")");
        v = vars[i++];
    });
    if (i != vars.size()) throw_invalid("assemble_params: too many vars");
    return out;
}

ad::Var encode_text(const ModelConfig& cfg, const TextEncoderParamsT<ad::Var>& params, const TokenSeq& seq,
                    TokenId pad_id) {
    if (seq.ids.empty()) throw_invalid("encode_text: empty sequence");
    if (seq.ids.size() > cfg.max_text_len) {
        throw_invalid("encode_text: sequence length " + std::to_string(seq.ids.size()) + " exceeds " +
                      std::to_string(cfg.max_text_len));
    }
    g_text_forwards.fetch_add(1, std::memory_order_relaxed);
    std::vector<std::uint32_t> positions(seq.ids.size());
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<std::uint32_t>(i);
    std::vector<bool> key_valid(seq.ids.size());
    for (std::size_t i = 0; i < seq.ids.size(); ++i) key_valid[i] = seq.ids[i] != pad_id;
    if (std::none_of(key_valid.begin(), key_valid.end(), [](bool b) { return b; })) {
        throw_invalid("encode_text: sequence is all padding");
    }
    ad::Var x = ad::add(ad::gather_rows(params.token_embedding, seq.ids), ad::gather_rows(params.positional, positions));
    for (const auto& b : params.blocks) x = transformer_block(b, x, cfg.heads, cfg.ln_eps, key_valid);
    return x;
}

ad::Var encode_image(const ModelConfig& cfg, const ImageEncoderParamsT<ad::Var>& params, const PatchGrid& img) {
    if (img.height != cfg.grid_height || img.width != cfg.grid_width) {
        throw_invalid("encode_image: grid " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                      " does not match model grid");
    }
    if (img.features.rows() != img.cells() || img.features.cols() != cfg.patch_dim) {
        throw_invalid("encode_image: patch features have shape " + img.features.shape_string());
    }
    ad::Tape& tape = *params.patch_proj.tape;
    ad::Var x = ad::add(ad::matmul(tape.constant(img.features), params.patch_proj), params.positional);
    for (const auto& b : params.blocks) x = transformer_block(b, x, cfg.heads, cfg.ln_eps, {});
    return x;
}

Tensor encode_text(const Model& model, const TokenSeq& seq, TokenId pad_id) {
    ad::Tape tape;
    const BoundParams p = bind_params(tape, model, {ParamGroup::TextTower, ParamGroup::ImageTower, ParamGroup::Head,
                                                    ParamGroup::SharedEmbedding, ParamGroup::Temperature});
    return encode_text(model.config, p.text, seq, pad_id).value();
}

Tensor encode_image(const Model& model, const PatchGrid& img) {
    ad::Tape tape;
    const BoundParams p = bind_params(tape, model, {ParamGroup::TextTower, ParamGroup::ImageTower, ParamGroup::Head,
                                                    ParamGroup::SharedEmbedding, ParamGroup::Temperature});
    return encode_image(model.config, p.image, img).value();
}

std::uint64_t text_forward_count() { return g_text_forwards.load(std::memory_order_relaxed); }

} // namespace stair
