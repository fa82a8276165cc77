#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "helpers.hpp"
#include "stair/datagen.hpp"
#include "stair/errors.hpp"
#include "stair/evalsuite.hpp"

using namespace stair;

namespace {

DatagenConfig small_config(std::uint64_t seed) {
    DatagenConfig c;
    c.seed = seed;
    c.n_train = 300;
    c.n_val = 40;
    c.n_test = 30;
    c.n_labeled = 40;
    return c;
}

bool contains_word(const std::string& caption, const std::string& word) {
    std::istringstream in(caption);
    for (std::string w; in >> w;)
        if (w == word) return true;
    return false;
}

} // namespace

TEST_CASE("the default bank is valid") {
    const DatagenConfig cfg;
    const ConceptBank bank = default_concept_bank(cfg);
    const Vocabulary vocab = default_vocabulary(bank);
    CHECK(bank.concepts.size() == 10);
    CHECK_NOTHROW(bank.validate(vocab));
    for (std::size_t i = 0; i < bank.concepts.size(); ++i)
        for (std::size_t j = i + 1; j < bank.concepts.size(); ++j) {
            const auto& a = bank.concepts[i].signature;
            const auto& b = bank.concepts[j].signature;
            double dot = 0, na = 0, nb = 0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                dot += a[k] * b[k];
                na += a[k] * a[k];
                nb += b[k] * b[k];
            }
            CHECK(std::acos(std::abs(dot) / std::sqrt(na * nb)) > 15.0 * std::acos(-1.0) / 180.0);
        }
}

TEST_CASE("noise-free single-concept sample carries the bare signature") {
    DatagenConfig cfg;
    cfg.noise_sigma = 0.0;
    const auto bank = default_concept_bank(cfg);
    std::mt19937_64 rng(3);
    const auto s = make_sample(cfg, bank, {4}, rng);
    REQUIRE(s.placements.size() == 1);
    const auto& cells = s.placements.at(4);
    CHECK(cells.size() == cfg.block * cfg.block);
    const std::set<std::uint32_t> placed(cells.begin(), cells.end());
    for (std::uint32_t c = 0; c < s.image.cells(); ++c)
        for (std::size_t k = 0; k < cfg.patch_dim; ++k)
            CHECK(s.image.features(c, k) == (placed.contains(c) ? bank.concepts[4].signature[k] : 0.0));
    CHECK(contains_word(s.caption, bank.concepts[4].word));
}

TEST_CASE("too many blocks for the grid is an error") {
    DatagenConfig cfg;
    cfg.grid_height = cfg.grid_width = 2;
    const auto bank = default_concept_bank(cfg);
    std::mt19937_64 rng(4);
    CHECK_THROWS_AS(make_sample(cfg, bank, {0, 1}, rng), Error);
}

TEST_CASE("generation is deterministic under the seed") {
    const auto a = generate(small_config(5));
    const auto b = generate(small_config(5));
    std::ostringstream sa, sb;
    write_corpus(sa, a.train, a.config.patch_dim);
    write_corpus(sb, b.train, b.config.patch_dim);
    CHECK(sa.str() == sb.str());
    const auto c = generate(small_config(6));
    std::ostringstream sc;
    write_corpus(sc, c.train, c.config.patch_dim);
    CHECK(sc.str() != sa.str());
}

TEST_CASE("every sample is consistent with its ground truth") {
    const auto d = generate(small_config(7));
    for (const auto* split : {&d.train, &d.val, &d.test, &d.labeled})
        for (const auto& s : *split) {
            REQUIRE(!s.concepts.empty());
            CHECK(s.concepts.size() <= d.config.max_concepts);
            CHECK(std::is_sorted(s.concepts.begin(), s.concepts.end()));
            for (auto c : s.concepts) {
                REQUIRE(s.placements.contains(c));
                CHECK(!s.placements.at(c).empty());
                CHECK(contains_word(s.caption, d.bank.concepts[c].word));
            }
            // Words only: no coordinates or numbers leak into captions.
            CHECK(s.caption.find_first_of("0123456789") == std::string::npos);
        }
    for (std::size_t i = 0; i < d.labeled.size(); ++i) CHECK(d.labeled[i].concepts.size() == 1);
}

TEST_CASE("test combinations are held out and each appears once") {
    const auto d = generate(small_config(8));
    std::set<std::vector<std::uint32_t>> seen, test;
    for (const auto* split : {&d.train, &d.val})
        for (const auto& s : *split) seen.insert(s.concepts);
    for (const auto& s : d.test) {
        CHECK(s.concepts.size() >= 2);
        CHECK(!seen.contains(s.concepts));
        CHECK(test.insert(s.concepts).second);
    }
    CHECK(test.size() == d.test.size());

    DatagenConfig too_many = small_config(8);
    too_many.n_test = static_cast<std::uint32_t>(held_out_count(too_many)) + 1;
    CHECK_THROWS_AS(generate(too_many), Error);
}

TEST_CASE("concept frequencies match the requested weights") {
    DatagenConfig cfg = small_config(9);
    cfg.n_train = 10000;
    cfg.max_concepts = 1;
    const auto d = generate(cfg);
    double total = 0.0;
    for (double f : d.bank.frequencies) total += f;
    std::vector<double> counts(d.bank.concepts.size(), 0.0);
    for (const auto& s : d.train) {
        counts[s.concepts[0]] += 1.0;
        CHECK(contains_word(s.caption, d.bank.concepts[s.concepts[0]].word));
    }
    for (std::size_t k = 0; k < counts.size(); ++k) {
        const double p = d.bank.frequencies[k] / total;
        const double mean = 10000.0 * p;
        const double sigma = std::sqrt(10000.0 * p * (1.0 - p));
        CAPTURE(k);
        CHECK(std::abs(counts[k] - mean) <= 3.0 * sigma);
    }
}

TEST_CASE("placed cells are linearly separable by concept") {
    DatagenConfig cfg = small_config(10);
    cfg.n_labeled = 400;
    const auto d = generate(cfg);
    std::vector<std::vector<double>> train_x, test_x;
    std::vector<std::uint32_t> train_y, test_y;
    for (std::size_t i = 0; i < d.labeled.size(); ++i) {
        const auto& s = d.labeled[i];
        const auto c = s.concepts[0];
        for (auto cell : s.placements.at(c)) {
            const auto row = s.image.features.row(cell);
            // Labeled images cycle through the concepts; alternate whole cycles.
            const bool held = (i / d.bank.concepts.size()) % 2 == 1;
            auto& x = held ? test_x : train_x;
            auto& y = held ? test_y : train_y;
            x.emplace_back(row.begin(), row.end());
            y.push_back(c);
        }
    }
    const auto r = linear_probe(train_x, train_y, test_x, test_y, 10, ProbeConfig{});
    CHECK(r.test_accuracy >= 0.99);
}

TEST_CASE("class prompts") {
    const DatagenConfig cfg;
    const auto bank = default_concept_bank(cfg);
    const auto vocab = default_vocabulary(bank);
    CHECK(with_prompt("cat") == "a photo of cat");
    const auto classes = prompt_classes(bank);
    REQUIRE(classes.size() == bank.concepts.size());
    CHECK(classes[0].first == bank.concepts[0].word);
    CHECK(classes[0].second == "a photo of " + bank.concepts[0].word);
    for (const auto& [name, prompt] : classes) {
        const auto seq = tokenize(vocab, prompt, 64);
        for (TokenId id : seq.ids) CHECK(id != vocab.specials().unk);
    }
    CHECK(prompt_classes(ConceptBank{}).empty());
}

TEST_CASE("corpus and dataset files round-trip") {
    const auto d = generate(small_config(11));
    std::stringstream buf;
    write_corpus(buf, d.test, d.config.patch_dim);
    const auto back = read_corpus(buf);
    REQUIRE(back.size() == d.test.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(back[i].caption == d.test[i].caption);
        CHECK(back[i].concepts == d.test[i].concepts);
        CHECK(back[i].placements == d.test[i].placements);
        CHECK(back[i].image.features == d.test[i].image.features);
    }

    const auto dir = testutil::scratch_dir("dataset");
    const auto vocab = default_vocabulary(d.bank);
    save_dataset(dir, d, vocab);
    const auto loaded = load_dataset(dir);
    CHECK(loaded.train.size() == d.train.size());
    CHECK(loaded.labeled.size() == d.labeled.size());
    CHECK(loaded.bank.concepts.size() == d.bank.concepts.size());
    CHECK(loaded.bank.concepts[3].signature == d.bank.concepts[3].signature);
    CHECK(loaded.bank.frequencies == d.bank.frequencies);
    CHECK(Vocabulary::load(dir / "vocab.txt").tokens() == vocab.tokens());

    std::stringstream bad("STAIR-CORPUS 2\n");
    CHECK_THROWS_AS(read_corpus(bad), Error);
}

TEST_CASE("config validation") {
    auto broken = [](auto&& edit) {
        DatagenConfig c;
        edit(c);
        CHECK_THROWS_AS(c.validate(), Error);
    };
    broken([](DatagenConfig& c) { c.n_concepts = 0; });
    broken([](DatagenConfig& c) { c.max_concepts = 11; });
    broken([](DatagenConfig& c) { c.block = 5; });
    broken([](DatagenConfig& c) { c.noise_sigma = -1; });
    broken([](DatagenConfig& c) { c.holdout_fraction = 1.0; });
    broken([](DatagenConfig& c) { c.n_test = 1000; });
    CHECK_NOTHROW(DatagenConfig{}.validate());
    CHECK(held_out_count(DatagenConfig{}) == 66);
}
