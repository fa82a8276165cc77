#include "stair/sparse.hpp"

#include <algorithm>
#include <charconv>
#include <limits>
#include <cmath>
#include <istream>
#include <ostream>
#include <sstream>

#include "stair/errors.hpp"

namespace stair {

SparseEmbedding SparseEmbedding::from_dense(std::span<const double> dense) {
    SparseEmbedding e;
    for (std::size_t k = 0; k < dense.size(); ++k)
        if (dense[k] > 0.0) e.entries.push_back({static_cast<TokenId>(k), dense[k]});
    return e;
}

std::vector<double> SparseEmbedding::densify(std::size_t vocab_size) const {
    std::vector<double> d(vocab_size, 0.0);
    for (const auto& [t, w] : entries) d.at(t) = w;
    return d;
}

double SparseEmbedding::norm() const {
    double s = 0.0;
    for (const auto& e : entries) s += e.weight * e.weight;
    return std::sqrt(s);
}

double SparseEmbedding::weight(TokenId token) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), token,
                               [](const SparseEntry& e, TokenId t) { return e.token < t; });
    return (it != entries.end() && it->token == token) ? it->weight : 0.0;
}

void SparseEmbedding::validate(std::size_t vocab_size) const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& e = entries[i];
        if (e.token >= vocab_size) throw_invalid("sparse embedding: token " + std::to_string(e.token) + " out of range");
        if (!(e.weight > 0.0) || !std::isfinite(e.weight)) throw_invalid("sparse embedding: non-positive weight");
        if (i > 0 && entries[i - 1].token >= e.token) throw_invalid("sparse embedding: token ids not increasing");
    }
}

double dot(const SparseEmbedding& a, const SparseEmbedding& b) {
    double s = 0.0;
    auto ia = a.entries.begin();
    auto ib = b.entries.begin();
    while (ia != a.entries.end() && ib != b.entries.end()) {
        if (ia->token < ib->token) {
            ++ia;
        } else if (ib->token < ia->token) {
            ++ib;
        } else {
            s += ia->weight * ib->weight;
            ++ia;
            ++ib;
        }
    }
    return s;
}

void write_embeddings(std::ostream& out, std::span<const NamedEmbedding> items) {
    char buf[64];
    for (const auto& item : items) {
        if (item.id.find_first_of("\t\n") != std::string::npos) throw_invalid("embedding id contains tab or newline");
        out << item.id << '\t';
        for (std::size_t i = 0; i < item.embedding.entries.size(); ++i) {
            const auto& e = item.embedding.entries[i];
            auto res = std::to_chars(buf, buf + sizeof(buf), e.weight);
            if (i) out << ' ';
            out << e.token << ':' << std::string_view(buf, static_cast<std::size_t>(res.ptr - buf));
        }
        out << '\n';
    }
}

std::vector<NamedEmbedding> read_embeddings(std::istream& in) {
    std::vector<NamedEmbedding> items;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) throw_format("embedding line " + std::to_string(lineno) + ": missing tab");
        NamedEmbedding item{line.substr(0, tab), {}};
        std::istringstream fields(line.substr(tab + 1));
        std::string pair;
        while (fields >> pair) {
            const auto colon = pair.find(':');
            TokenId token = 0;
            double weight = 0.0;
            const char* end = pair.data() + pair.size();
            auto r1 = std::from_chars(pair.data(), pair.data() + colon, token);
            auto r2 = colon == std::string::npos ? std::from_chars_result{nullptr, std::errc::invalid_argument}
                                                  : std::from_chars(pair.data() + colon + 1, end, weight);
            if (colon == std::string::npos || r1.ec != std::errc{} || r2.ec != std::errc{} || r2.ptr != end) {
                throw_format("embedding line " + std::to_string(lineno) + ": bad entry '" + pair + "'");
            }
            item.embedding.entries.push_back({token, weight});
        }
        try {
            item.embedding.validate(std::numeric_limits<TokenId>::max());
        } catch (const Error& e) {
            throw_format("embedding line " + std::to_string(lineno) + ": " + e.what());
        }
        items.push_back(std::move(item));
    }
    return items;
}

} // namespace stair
