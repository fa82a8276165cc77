#include "stair/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "stair/errors.hpp"

namespace stair {

namespace {

constexpr std::size_t kMaxCharsPerWord = 100;

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> words;
    std::string current;
    auto flush = [&] {
        if (!current.empty()) words.push_back(std::move(current));
        current.clear();
    };
    for (char raw : text) {
        const auto ch = static_cast<unsigned char>(raw);
        if (ch == ' ') {
            flush();
        } else if (ch < 0x80 && std::ispunct(ch)) {
            flush();
            words.emplace_back(1, raw);
        } else {
            current.push_back(ch < 0x80 ? static_cast<char>(std::tolower(ch)) : raw);
        }
    }
    flush();
    return words;
}

// Byte length of the UTF-8 sequence starting with `lead`.
std::size_t utf8_length(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
}

} // namespace

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        const std::string& t = v.tokens_[i];
        if (t.empty()) throw_format("vocabulary line " + std::to_string(i + 1) + " is empty");
        auto [it, inserted] = v.lookup_.emplace(t, static_cast<TokenId>(i));
        if (!inserted) {
            throw_format("duplicate token '" + t + "' on lines " + std::to_string(it->second + 1) + " and " +
                         std::to_string(i + 1));
        }
    }
    auto require = [&](std::string_view name) {
        auto id = v.find(name);
        if (!id) throw_format("vocabulary is missing special token " + std::string(name));
        return *id;
    };
    v.specials_ = {require(kPad), require(kUnk), require(kCls), require(kSep)};

    for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
        if (v.is_special(static_cast<TokenId>(i))) continue;
        const std::string_view s = v.surface(static_cast<TokenId>(i));
        for (std::size_t pos = 0; pos < s.size();) {
            const std::size_t n = std::min(utf8_length(static_cast<unsigned char>(s[pos])), s.size() - pos);
            const std::string ch(s.substr(pos, n));
            if (!v.find(ch)) {
                throw_format("character '" + ch + "' of token '" + v.tokens_[i] + "' (line " + std::to_string(i + 1) +
                             ") is not itself a token");
            }
            pos += n;
        }
    }
    return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw_io("cannot open vocabulary file " + path.string());
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw_io("cannot write vocabulary file " + path.string());
    for (const auto& t : tokens_) out << t << '\n';
    if (!out) throw_io("failed writing vocabulary file " + path.string());
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
    auto it = lookup_.find(std::string(token));
    if (it == lookup_.end()) return std::nullopt;
    return it->second;
}

bool Vocabulary::is_special(TokenId id) const noexcept {
    return id == specials_.pad || id == specials_.unk || id == specials_.cls || id == specials_.sep;
}

bool Vocabulary::is_continuation(TokenId id) const {
    const std::string& t = tokens_.at(id);
    return t.size() > kContinuation.size() && t.starts_with(kContinuation);
}

std::string_view Vocabulary::surface(TokenId id) const {
    std::string_view t = tokens_.at(id);
    if (is_continuation(id)) t.remove_prefix(kContinuation.size());
    return t;
}

bool MaskVec::contains(TokenId id) const { return std::binary_search(active.begin(), active.end(), id); }

TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t max_len) {
    if (max_len < 3) throw_invalid("tokenize: max_len must be at least 3");
    const auto& sp = vocab.specials();
    TokenSeq out;
    out.ids.push_back(sp.cls);
    const std::size_t content_cap = max_len - 2;

    for (const std::string& word : split_words(text)) {
        if (out.ids.size() - 1 >= content_cap) break;
        if (auto whole = vocab.find(word)) {
            out.ids.push_back(*whole);
            continue;
        }
        std::vector<TokenId> pieces;
        bool bad = word.size() > kMaxCharsPerWord;
        for (std::size_t start = 0; !bad && start < word.size();) {
            std::optional<TokenId> match;
            std::size_t end = word.size();
            for (; end > start; --end) {
                std::string piece = word.substr(start, end - start);
                if (start > 0) piece.insert(0, Vocabulary::kContinuation);
                if ((match = vocab.find(piece))) break;
            }
            if (!match) {
                bad = true;
                break;
            }
            pieces.push_back(*match);
            start = end;
        }
        if (bad) pieces.assign(1, sp.unk);
        for (TokenId id : pieces) {
            if (out.ids.size() - 1 >= content_cap) break;
            out.ids.push_back(id);
        }
    }
    out.ids.push_back(sp.sep);
    return out;
}

MaskVec build_mask(const Vocabulary& vocab, const TokenSeq& seq) {
    MaskVec m;
    for (TokenId id : seq.ids) {
        if (id >= vocab.size()) throw_invalid("build_mask: token id " + std::to_string(id) + " out of range");
        if (!vocab.is_special(id)) m.active.push_back(id);
    }
    std::sort(m.active.begin(), m.active.end());
    m.active.erase(std::unique(m.active.begin(), m.active.end()), m.active.end());
    return m;
}

std::size_t content_length(const Vocabulary& vocab, const TokenSeq& seq) {
    return static_cast<std::size_t>(
        std::count_if(seq.ids.begin(), seq.ids.end(), [&](TokenId id) { return !vocab.is_special(id); }));
}

} // namespace stair
