#include <fstream>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "stair/errors.hpp"
#include "stair/gradcheck.hpp"
#include "stair/model.hpp"

using namespace stair;

namespace {

Model depth0_model(std::uint64_t seed) {
    auto cfg = testutil::tiny_config(static_cast<std::uint32_t>(testutil::toy_vocab().size()), 8, 0);
    return Model::initialize(cfg, seed);
}

TokenSeq seq_of(const Vocabulary& v, const std::string& text) { return tokenize(v, text, 12); }

void zero_blocks(Model& m) {
    visit_params(m.params, [](const std::string& name, Tensor& t, ParamGroup) {
        if (name.find(".block") != std::string::npos)
            for (auto& x : t.data()) x = 0.0;
    });
}

} // namespace

TEST_CASE("depth-0 text rows are token embedding plus position") {
    const auto v = testutil::toy_vocab();
    const Model m = depth0_model(3);
    const auto seq = seq_of(v, "the red cat");
    const Tensor h = encode_text(m, seq, v.specials().pad);
    REQUIRE(h.rows() == seq.ids.size());
    REQUIRE(h.cols() == m.config.d_model);
    for (std::size_t j = 0; j < seq.ids.size(); ++j)
        for (std::size_t c = 0; c < h.cols(); ++c)
            CHECK(h(j, c) == m.params.text.token_embedding(seq.ids[j], c) + m.params.text.positional(j, c));
}

TEST_CASE("depth-0 text: swapping two tokens swaps their embedding contributions") {
    const auto v = testutil::toy_vocab();
    const Model m = depth0_model(4);
    const auto a = seq_of(v, "cat dog");
    auto b = a;
    std::swap(b.ids[1], b.ids[2]);
    const Tensor ha = encode_text(m, a, v.specials().pad);
    const Tensor hb = encode_text(m, b, v.specials().pad);
    const auto& pos = m.params.text.positional;
    for (std::size_t c = 0; c < ha.cols(); ++c) {
        CHECK(ha(1, c) - pos(1, c) == doctest::Approx(hb(2, c) - pos(2, c)).epsilon(1e-15));
        CHECK(ha(2, c) - pos(2, c) == doctest::Approx(hb(1, c) - pos(1, c)).epsilon(1e-15));
        CHECK(ha(0, c) == hb(0, c));
    }
}

TEST_CASE("depth-0 image rows are projected patches plus position") {
    Model m = depth0_model(5);
    std::mt19937_64 rng(9);
    const PatchGrid g = testutil::random_grid(m.config, rng);
    const Tensor h = encode_image(m, g);
    REQUIRE(h.rows() == g.cells());
    for (std::size_t r = 0; r < g.cells(); ++r)
        for (std::size_t c = 0; c < m.config.d_model; ++c) {
            double expect = 0.0;
            for (std::size_t k = 0; k < m.config.patch_dim; ++k) expect += g.features(r, k) * m.params.image.patch_proj(k, c);
            CHECK(h(r, c) == doctest::Approx(expect + m.params.image.positional(r, c)).epsilon(1e-14));
        }

    PatchGrid zero = g;
    for (auto& x : zero.features.data()) x = 0.0;
    for (auto& x : m.params.image.positional.data()) x = 0.0;
    const Tensor z = encode_image(m, zero);
    for (double x : z.data()) CHECK(x == 0.0);
}

TEST_CASE("zeroed blocks leave the embedding sum untouched") {
    const auto v = testutil::toy_vocab();
    Model deep = Model::initialize(testutil::tiny_config(static_cast<std::uint32_t>(v.size()), 8, 2), 6);
    zero_blocks(deep);
    Model flat = depth0_model(6);
    flat.params.text.token_embedding = deep.params.text.token_embedding;
    flat.params.text.positional = deep.params.text.positional;
    flat.params.image.patch_proj = deep.params.image.patch_proj;
    flat.params.image.positional = deep.params.image.positional;

    const auto seq = seq_of(v, "a red dog");
    CHECK(encode_text(deep, seq, v.specials().pad) == encode_text(flat, seq, v.specials().pad));
    std::mt19937_64 rng(2);
    const PatchGrid g = testutil::random_grid(deep.config, rng);
    CHECK(encode_image(deep, g) == encode_image(flat, g));
}

TEST_CASE("output keeps one row per position") {
    const auto v = testutil::toy_vocab();
    const Model m = Model::initialize(testutil::tiny_config(static_cast<std::uint32_t>(v.size()), 8, 1), 8);
    for (const char* text : {"", "cat", "the red cat dog", "a b c d e f g h i j"}) {
        const auto seq = seq_of(v, text);
        const Tensor h = encode_text(m, seq, v.specials().pad);
        CHECK(h.rows() == seq.ids.size());
        CHECK(h.cols() == m.config.d_model);
    }
    TokenSeq too_long;
    too_long.ids.assign(m.config.max_text_len + 1, *v.find("cat"));
    CHECK_THROWS_AS(encode_text(m, too_long, v.specials().pad), Error);
}

TEST_CASE("golden encoder outputs at a fixed seed") {
    const auto v = testutil::toy_vocab();
    const Model m = Model::initialize(testutil::golden_config(), testutil::kGoldenSeed);
    const auto seq = tokenize(v, testutil::kGoldenText, m.config.max_text_len);
    REQUIRE(seq.ids.size() == 5);
    const Tensor ht = encode_text(m, seq, v.specials().pad);
    const Tensor hi = encode_image(m, testutil::golden_grid());
    const auto gt = testutil::read_golden("encoder_text.txt");
    const auto gi = testutil::read_golden("encoder_image.txt");
    CHECK(std::vector<double>(ht.data().begin(), ht.data().end()) == gt);
    CHECK(std::vector<double>(hi.data().begin(), hi.data().end()) == gi);
}

TEST_CASE("gradients through both encoders match finite differences") {
    const auto v = testutil::toy_vocab();
    const Model m = Model::initialize(testutil::tiny_config(static_cast<std::uint32_t>(v.size()), 8, 2), 12);
    const auto seq = seq_of(v, "the cat");
    std::mt19937_64 rng(13);
    const PatchGrid g = testutil::random_grid(m.config, rng);
    const Tensor wt = testutil::random_tensor({seq.ids.size(), 8}, rng);
    const Tensor wi = testutil::random_tensor({g.cells(), 8}, rng);

    const auto report = ad::grad_check(
        [&](ad::Tape&, std::span<const ad::Var> vars) {
            const BoundParams p = assemble_params(m, vars);
            const ad::Var t = ad::mul_const(encode_text(m.config, p.text, seq, v.specials().pad), wt);
            const ad::Var i = ad::mul_const(encode_image(m.config, p.image, g), wi);
            return ad::add(ad::sum(t), ad::sum(i));
        },
        parameter_tensors(m), 1e-5);
    CHECK(report.checked > 0);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
    const Model m = Model::initialize(testutil::tiny_config(39, 8, 2), 21);
    const auto dir = testutil::scratch_dir("ckpt");
    m.save(dir / "m.ckpt");
    const Model back = Model::load(dir / "m.ckpt");
    CHECK(back.config == m.config);
    CHECK(back.serialize() == m.serialize());
    CHECK(parameter_tensors(back) == parameter_tensors(m));

    std::string bytes = m.serialize();
    std::string bad_magic = bytes;
    bad_magic[0] ^= 0x5a;
    CHECK_THROWS_AS(Model::deserialize(bad_magic), Error);
    CHECK_THROWS_AS(Model::deserialize(bytes.substr(0, bytes.size() / 2)), Error);
    CHECK_THROWS_AS(Model::load(dir / "absent.ckpt"), Error);
}
