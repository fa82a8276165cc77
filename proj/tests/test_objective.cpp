#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "helpers.hpp"
#include "stair/gradcheck.hpp"
#include "stair/objective.hpp"
#include "stair/trainer.hpp"

using namespace stair;

namespace {

SparseEmbedding emb(std::initializer_list<std::pair<TokenId, double>> entries) {
    SparseEmbedding e;
    for (auto [t, w] : entries) e.entries.push_back({t, w});
    return e;
}

LossConfig unit_temperature() {
    LossConfig c;
    c.log_temperature = 0.0;
    return c;
}

BatchEmbeddings random_batch(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
    BatchEmbeddings b;
    for (std::size_t i = 0; i < n; ++i) {
        b.image_embs.push_back(testutil::random_sparse(vocab, 0.3, rng));
        b.text_embs.push_back(testutil::random_sparse(vocab, 0.3, rng));
    }
    return b;
}

// Independent evaluation: dense cosine matrix, explicit exp and log.
double naive_contrastive(const BatchEmbeddings& b, std::size_t vocab, double temperature) {
    const std::size_t n = b.image_embs.size();
    auto cos = [&](const SparseEmbedding& x, const SparseEmbedding& y) {
        const auto a = x.densify(vocab), c = y.densify(vocab);
        double d = 0, na = 0, nc = 0;
        for (std::size_t k = 0; k < vocab; ++k) {
            d += a[k] * c[k];
            na += a[k] * a[k];
            nc += c[k] * c[k];
        }
        return na == 0 || nc == 0 ? 0.0 : d / std::sqrt(na * nc);
    };
    double i2t = 0, t2i = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double zi = 0, zt = 0;
        for (std::size_t j = 0; j < n; ++j) {
            zi += std::exp(cos(b.image_embs[i], b.text_embs[j]) / temperature);
            zt += std::exp(cos(b.image_embs[j], b.text_embs[i]) / temperature);
        }
        const double diag = std::exp(cos(b.image_embs[i], b.text_embs[i]) / temperature);
        i2t -= std::log(diag / zi);
        t2i -= std::log(diag / zt);
    }
    return 0.5 * (i2t + t2i) / static_cast<double>(n);
}

double naive_flops(const std::vector<SparseEmbedding>& embs, std::size_t vocab) {
    std::vector<double> mean(vocab, 0.0);
    for (const auto& e : embs) {
        const auto d = e.densify(vocab);
        for (std::size_t k = 0; k < vocab; ++k) mean[k] += d[k];
    }
    double s = 0.0;
    for (double m : mean) s += (m / static_cast<double>(embs.size())) * (m / static_cast<double>(embs.size()));
    return s;
}

Tensor dense_rows(const std::vector<SparseEmbedding>& embs, std::size_t vocab) {
    Tensor t({embs.size(), vocab});
    for (std::size_t i = 0; i < embs.size(); ++i) {
        const auto d = embs[i].densify(vocab);
        std::copy(d.begin(), d.end(), t.row(i).begin());
    }
    return t;
}

} // namespace

TEST_CASE("cosine similarity examples") {
    const auto a = emb({{1, 3}, {4, 4}});
    const auto b = emb({{1, 4}, {2, 3}});
    CHECK(cosine_sim(a, a) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(cosine_sim(a, emb({{2, 1}, {7, 2}})) == 0.0);
    CHECK(cosine_sim(a, b) == doctest::Approx(0.48).epsilon(1e-15));
    CHECK(cosine_sim(a, SparseEmbedding{}) == 0.0);
}

TEST_CASE("contrastive loss examples") {
    std::mt19937_64 rng(1);
    BatchEmbeddings one{{testutil::random_sparse(20, 0.3, rng)}, {testutil::random_sparse(20, 0.3, rng)}};
    CHECK(contrastive_loss(one, LossConfig{}) == 0.0);

    BatchEmbeddings two{{emb({{0, 1.0}}), emb({{1, 2.0}})}, {emb({{0, 0.5}}), emb({{1, 1.0}})}};
    CHECK(contrastive_loss(two, unit_temperature()) == doctest::Approx(std::log1p(std::exp(-1.0))).epsilon(1e-14));
    CHECK(contrastive_loss(two, unit_temperature()) == doctest::Approx(0.3133).epsilon(1e-4));

    for (int trial = 0; trial < 20; ++trial) {
        const auto b = random_batch(5, 30, rng);
        LossConfig c;
        c.log_temperature = std::uniform_real_distribution<double>(-3.0, 0.5)(rng);
        CHECK(std::abs(contrastive_loss(b, c) - naive_contrastive(b, 30, c.temperature())) < 1e-12);
    }
}

TEST_CASE("temperature is floored") {
    LossConfig c;
    c.log_temperature = std::log(1e-4);
    CHECK(c.temperature() == 0.01);
    c.log_temperature = std::log(0.5);
    CHECK(c.temperature() == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("contrastive loss is non-negative and falls as matched pairs grow more similar") {
    std::mt19937_64 rng(2);
    for (int trial = 0; trial < 50; ++trial) {
        // Orthogonal off-diagonal structure: image i = e_i, text i = e_i + s * e_{n+i}.
        const std::size_t n = 4;
        auto batch_at = [&](double s) {
            BatchEmbeddings b;
            for (std::size_t i = 0; i < n; ++i) {
                b.image_embs.push_back(emb({{static_cast<TokenId>(i), 1.0}}));
                b.text_embs.push_back(emb({{static_cast<TokenId>(i), 1.0}, {static_cast<TokenId>(n + i), s}}));
            }
            return b;
        };
        const double s = std::uniform_real_distribution<double>(0.5, 3.0)(rng);
        const double far = contrastive_loss(batch_at(s), LossConfig{});
        const double near = contrastive_loss(batch_at(s * 0.5), LossConfig{});
        CHECK(far >= 0.0);
        CHECK(near < far);
        CHECK(contrastive_loss(random_batch(6, 25, rng), LossConfig{}) >= 0.0);
    }
}

TEST_CASE("FLOPs loss examples and properties") {
    CHECK(flops_loss(std::vector<SparseEmbedding>{{}, {}}, 10) == 0.0);
    const std::vector<SparseEmbedding> pair = {emb({{0, 1.0}}), emb({{0, 1.0}, {1, 2.0}})};
    CHECK(flops_loss(pair, 2) == 2.0);

    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        auto b = random_batch(7, 40, rng).image_embs;
        const double base = flops_loss(b, 40);
        std::shuffle(b.begin(), b.end(), rng);
        CHECK(flops_loss(b, 40) == doctest::Approx(base).epsilon(1e-15));
        auto& victim = b[trial % b.size()];
        if (victim.entries.empty()) continue;
        victim.entries[0].weight += 0.25;
        CHECK(flops_loss(b, 40) > base);
    }
}

TEST_CASE("FLOPs loss equals the densified formula on random batches") {
    std::mt19937_64 rng(4);
    std::uniform_int_distribution<std::size_t> nd(1, 16), vd(1, 300);
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t vocab = vd(rng);
        const auto embs = random_batch(nd(rng), vocab, rng).text_embs;
        const double got = flops_loss(embs, vocab), expect = naive_flops(embs, vocab);
        if (expect > 0) worst = std::max(worst, testutil::rel_err(got, expect));
        else CHECK(got == 0.0);
    }
    CHECK(worst < 1e-12);
}

TEST_CASE("total loss combines the terms") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const auto b = random_batch(6, 50, rng);
        LossConfig zero;
        const auto z = total_loss(b, 50, zero);
        CHECK(z.total == contrastive_loss(b, zero));

        LossConfig c;
        c.lambda_image = 0.3;
        c.lambda_text = 0.05;
        const auto t = total_loss(b, 50, c);
        const double fused = contrastive_loss(b, c) + 0.3 * flops_loss(b.image_embs, 50) +
                             0.05 * flops_loss(b.text_embs, 50);
        CHECK(std::abs(t.total - fused) < 1e-12);
        CHECK(t.flops_image == flops_loss(b.image_embs, 50));
    }
}

TEST_CASE("scaling both towers keeps the contrastive term but not FLOPs") {
    std::mt19937_64 rng(6);
    const auto b = random_batch(5, 30, rng);
    BatchEmbeddings s = b;
    for (auto* side : {&s.image_embs, &s.text_embs})
        for (auto& e : *side)
            for (auto& en : e.entries) en.weight *= 3.0;
    CHECK(std::abs(contrastive_loss(s, LossConfig{}) - contrastive_loss(b, LossConfig{})) < 1e-12);
    CHECK(flops_loss(s.image_embs, 30) == doctest::Approx(9.0 * flops_loss(b.image_embs, 30)).epsilon(1e-12));
    CHECK(flops_loss(s.image_embs, 30) != flops_loss(b.image_embs, 30));
}

TEST_CASE("dense baseline loss") {
    std::mt19937_64 rng(7);
    CHECK(dense_baseline_loss(testutil::random_tensor({1, 6}, rng), testutil::random_tensor({1, 6}, rng),
                              LossConfig{}) == 0.0);
    for (int trial = 0; trial < 10; ++trial) {
        const auto b = random_batch(4, 20, rng);
        const double sparse = contrastive_loss(b, LossConfig{});
        const double dense = dense_baseline_loss(dense_rows(b.image_embs, 20), dense_rows(b.text_embs, 20), LossConfig{});
        CHECK(std::abs(sparse - dense) < 1e-12);
        CHECK(std::abs(dense - naive_contrastive(b, 20, LossConfig{}.temperature())) < 1e-12);
    }
}

TEST_CASE("tape losses agree with the value forms") {
    std::mt19937_64 rng(8);
    const auto b = random_batch(5, 30, rng);
    ad::Tape tape;
    const auto img = tape.constant(dense_rows(b.image_embs, 30));
    const auto txt = tape.constant(dense_rows(b.text_embs, 30));
    const auto logt = tape.constant(Tensor::vector({std::log(0.2)}));
    const auto v = total_loss(img, txt, logt, 0.1, 0.2, 0.01);
    LossConfig c;
    c.lambda_image = 0.1;
    c.lambda_text = 0.2;
    c.log_temperature = std::log(0.2);
    const auto ref = total_loss(b, 30, c);
    CHECK(std::abs(v.total.value()[0] - ref.total) < 1e-12);
    CHECK(std::abs(v.contrastive.value()[0] - ref.contrastive) < 1e-12);
    CHECK(std::abs(v.flops_text.value()[0] - ref.flops_text) < 1e-12);
}

TEST_CASE("gradient with respect to the log temperature") {
    std::mt19937_64 rng(9);
    const std::vector<Tensor> params = {testutil::random_tensor({4, 10}, rng), testutil::random_tensor({4, 10}, rng),
                                        Tensor::vector({std::log(0.3)})};
    const auto report = ad::grad_check(
        [](ad::Tape&, std::span<const ad::Var> v) { return total_loss(v[0], v[1], v[2], 0.1, 0.1, 0.01).total; },
        params, 1e-6);
    CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("full loss through both towers, head and pooling matches finite differences") {
    // |V| = 64: the toy vocabulary plus 25 continuation pieces (it already has ##s).
    std::vector<std::string> extra;
    for (char c = 'a'; c <= 'z'; ++c)
        if (c != 's') extra.push_back(std::string("##") + c);
    const auto v = testutil::toy_vocab(extra);
    REQUIRE(v.size() == 64);
    // Weights at the training init scale give gradients near 1e-7, below
    // what a central difference resolves; a wider init keeps them measurable.
    auto cfg = testutil::tiny_config(64, 8, 1);
    cfg.init_std = 0.5;
    Model m = Model::initialize(cfg, 31);
    std::mt19937_64 rng(32);
    for (auto& x : m.params.projection.logit_bias.data()) x = std::normal_distribution<double>(0.0, 0.5)(rng);

    std::vector<TrainExample> batch(2);
    const char* texts[] = {"the red cat", "dogs playing"};
    for (int i = 0; i < 2; ++i) {
        batch[i].image = testutil::random_grid(cfg, rng);
        batch[i].text = tokenize(v, texts[i], cfg.max_text_len);
        batch[i].mask = build_mask(v, batch[i].text);
    }
    const std::vector<const TrainExample*> ptrs = {&batch[0], &batch[1]};

    for (bool masked : {false, true}) {
        CAPTURE(masked);
        StepFlags flags;
        flags.mask_text = masked;
        flags.lambda_image = 0.05;
        flags.lambda_text = 0.02;
        const auto report = ad::grad_check(
            [&](ad::Tape&, std::span<const ad::Var> vars) {
                return forward_loss(cfg, assemble_params(m, vars), ptrs, flags, v.specials().pad).loss.total;
            },
            parameter_tensors(m), 1e-5);
        CHECK(report.checked > 1000);
        // Only the two attention key biases may vanish.
        CHECK(report.vanishing <= 16);
        CHECK(report.max_rel_error < 1e-4);
    }
}
