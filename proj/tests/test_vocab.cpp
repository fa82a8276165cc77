#include <algorithm>
#include <fstream>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "helpers.hpp"
#include "stair/errors.hpp"
#include "stair/vocab.hpp"

using namespace stair;

namespace {

// Every way to cut `word` into in-vocabulary pieces (first piece bare,
// later ones with the continuation marker).
void all_splits(const Vocabulary& v, const std::string& word, std::size_t start, std::vector<TokenId>& cur,
                std::vector<std::vector<TokenId>>& out) {
    if (start == word.size()) {
        out.push_back(cur);
        return;
    }
    for (std::size_t end = start + 1; end <= word.size(); ++end) {
        std::string piece = word.substr(start, end - start);
        if (start > 0) piece = "##" + piece;
        if (auto id = v.find(piece)) {
            cur.push_back(*id);
            all_splits(v, word, end, cur, out);
            cur.pop_back();
        }
    }
}

} // namespace

TEST_CASE("minimal five-line vocabulary loads") {
    auto dir = testutil::scratch_dir("vocab-min");
    {
        std::ofstream f(dir / "v.txt");
        f << "[PAD]\n[UNK]\n[CLS]\n[SEP]\na\n";
    }
    const auto v = Vocabulary::load(dir / "v.txt");
    CHECK(v.size() == 5);
    CHECK(v.find("a") == TokenId{4});
    CHECK(v.specials().pad == 0);
    CHECK(v.specials().sep == 3);
}

TEST_CASE("duplicate tokens are rejected naming both lines") {
    try {
        Vocabulary::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "c", "a", "t", "cat", "cat"});
        FAIL("expected a duplicate error");
    } catch (const Error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("lines 8 and 9") != std::string::npos);
    }
}

TEST_CASE("missing specials and uncovered characters are rejected") {
    CHECK_THROWS_AS(Vocabulary::from_tokens({"[PAD]", "[UNK]", "[CLS]", "a"}), Error);
    CHECK_THROWS_AS(Vocabulary::from_tokens({"[PAD]", "[UNK]", "[CLS]", "[SEP]", "ab", "a"}), Error);
}

TEST_CASE("ids follow line order; lookup agrees with an independent pass") {
    const auto v = testutil::toy_vocab();
    std::map<std::string, TokenId> reference;
    TokenId next = 0;
    for (const auto& t : v.tokens()) reference.emplace(t, next++);
    for (const auto& [t, id] : reference) {
        CHECK(v.find(t) == id);
        CHECK(v.token(id) == t);
    }
    CHECK(v.find("play").has_value());
    CHECK(*v.find("##ing") == *v.find("play") + 1);
}

TEST_CASE("save then load round-trips") {
    const auto v = testutil::toy_vocab();
    auto dir = testutil::scratch_dir("vocab-rt");
    v.save(dir / "v.txt");
    CHECK(Vocabulary::load(dir / "v.txt").tokens() == v.tokens());
}

TEST_CASE("tokenize edge cases") {
    const auto v = testutil::toy_vocab();
    const auto& sp = v.specials();
    CHECK(tokenize(v, "", 8).ids == std::vector<TokenId>{sp.cls, sp.sep});
    CHECK(tokenize(v, "playing", 8).ids == std::vector<TokenId>{sp.cls, *v.find("play"), *v.find("##ing"), sp.sep});
    // 'z' exists only as a word-initial character, so "zzz" cannot be covered.
    CHECK(tokenize(v, "zzz", 8).ids == std::vector<TokenId>{sp.cls, sp.unk, sp.sep});
    CHECK_THROWS_AS(tokenize(v, "cat", 2), Error);
}

TEST_CASE("greedy longest match picks the split with the longest first piece") {
    const auto v = testutil::toy_vocab({"##i", "##n", "##g", "##in", "##l", "##a", "##y", "pl"});
    for (const std::string word : {"playing", "plays", "cats", "dogs", "reds"}) {
        const auto seq = tokenize(v, word, 32);
        std::vector<TokenId> got(seq.ids.begin() + 1, seq.ids.end() - 1);
        std::vector<std::vector<TokenId>> splits;
        std::vector<TokenId> cur;
        all_splits(v, word, 0, cur, splits);
        REQUIRE(!splits.empty());
        // Greedy = lexicographically maximal sequence of piece lengths.
        auto lengths = [&](const std::vector<TokenId>& s) {
            std::vector<std::size_t> l;
            for (TokenId id : s) l.push_back(v.surface(id).size());
            return l;
        };
        auto best = *std::max_element(splits.begin(), splits.end(),
                                      [&](const auto& a, const auto& b) { return lengths(a) < lengths(b); });
        if (v.find(word)) best = {*v.find(word)};
        CHECK(got == best);
    }
}

TEST_CASE("lowercasing, punctuation and truncation") {
    const auto v = testutil::toy_vocab();
    const auto& sp = v.specials();
    CHECK(tokenize(v, "The CAT.", 8).ids == std::vector<TokenId>{sp.cls, *v.find("the"), *v.find("cat"), *v.find("."), sp.sep});
    const auto t = tokenize(v, "cat dog red the cat", 4);
    CHECK(t.ids == std::vector<TokenId>{sp.cls, *v.find("cat"), *v.find("dog"), sp.sep});
}

TEST_CASE("surface forms reproduce in-vocabulary word strings") {
    const auto v = testutil::toy_vocab();
    std::mt19937_64 rng(5);
    const std::vector<std::string> words = {"cat", "dog", "red", "the", "play", "playing", "cats"};
    for (int trial = 0; trial < 50; ++trial) {
        std::string text;
        std::uniform_int_distribution<std::size_t> pick(0, words.size() - 1);
        for (int w = 0; w < 5; ++w) text += (w ? " " : "") + words[pick(rng)];
        const auto seq = tokenize(v, text, 64);
        std::string rebuilt;
        for (std::size_t i = 1; i + 1 < seq.ids.size(); ++i) {
            if (!v.is_continuation(seq.ids[i]) && !rebuilt.empty()) rebuilt += ' ';
            rebuilt += v.surface(seq.ids[i]);
        }
        CHECK(rebuilt == text);
        CHECK(tokenize(v, text, 64) == seq);
    }
}

TEST_CASE("build_mask dedupes and drops specials") {
    std::vector<std::string> toks = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    for (char c = 'a'; c < 'g'; ++c) toks.emplace_back(1, c);
    const auto v = Vocabulary::from_tokens(toks);
    REQUIRE(v.size() == 10);
    const auto& sp = v.specials();
    CHECK(build_mask(v, {{sp.cls, 7, 5, 7, sp.sep}}).active == std::vector<TokenId>{5, 7});
    CHECK(build_mask(v, {{sp.cls, sp.sep}}).active.empty());

    std::mt19937_64 rng(11);
    std::uniform_int_distribution<TokenId> id(0, 9);
    for (int trial = 0; trial < 100; ++trial) {
        TokenSeq seq;
        for (int i = 0; i < 20; ++i) seq.ids.push_back(id(rng));
        std::set<TokenId> oracle;
        for (TokenId t : seq.ids)
            if (t != sp.pad && t != sp.unk && t != sp.cls && t != sp.sep) oracle.insert(t);
        const auto m = build_mask(v, seq);
        CHECK(std::vector<TokenId>(oracle.begin(), oracle.end()) == m.active);
    }
}
