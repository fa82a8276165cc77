#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace stair {

using TokenId = std::uint32_t;

struct SpecialIds {
    TokenId pad = 0;
    TokenId unk = 0;
    TokenId cls = 0;
    TokenId sep = 0;
};

/// Immutable token table. Line order of the source file is the id order.
class Vocabulary {
public:
    static constexpr std::string_view kContinuation = "##";
    static constexpr std::string_view kPad = "[PAD]";
    static constexpr std::string_view kUnk = "[UNK]";
    static constexpr std::string_view kCls = "[CLS]";
    static constexpr std::string_view kSep = "[SEP]";

    /// Validates uniqueness, special tokens and single-character coverage.
    static Vocabulary from_tokens(std::vector<std::string> tokens);
    static Vocabulary load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::string& token(TokenId id) const { return tokens_.at(id); }
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }
    std::optional<TokenId> find(std::string_view token) const;

    const SpecialIds& specials() const noexcept { return specials_; }
    bool is_special(TokenId id) const noexcept;

    /// Token text with any continuation marker stripped.
    std::string_view surface(TokenId id) const;
    bool is_continuation(TokenId id) const;

private:
    Vocabulary() = default;

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> lookup_;
    SpecialIds specials_;
};

struct TokenSeq {
    std::vector<TokenId> ids;

    friend bool operator==(const TokenSeq&, const TokenSeq&) = default;
};

/// Sorted, duplicate-free set of content token ids.
struct MaskVec {
    std::vector<TokenId> active;

    bool contains(TokenId id) const;
};

/// Lowercases, splits on ASCII space, splits punctuation into single
/// characters, then applies greedy longest-match-first WordPiece per word.
/// Output is [CLS] ... [SEP], truncated to max_len keeping both markers.
TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t max_len);

MaskVec build_mask(const Vocabulary& vocab, const TokenSeq& seq);

/// Number of tokens in `seq` that are neither special nor padding.
std::size_t content_length(const Vocabulary& vocab, const TokenSeq& seq);

} // namespace stair
