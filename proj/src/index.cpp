#include "stair/index.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>

#include "stair/binio.hpp"
#include "stair/errors.hpp"

namespace stair {

namespace {

constexpr std::string_view kIndexMagic = "STAIRIDX";
constexpr std::uint32_t kIndexVersion = 1;

bool ranks_before(const ScoredDoc& a, const ScoredDoc& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.doc < b.doc;
}

void take_top_k(std::vector<ScoredDoc>& docs, std::size_t k) {
    if (docs.size() > k) {
        std::partial_sort(docs.begin(), docs.begin() + static_cast<std::ptrdiff_t>(k), docs.end(), ranks_before);
        docs.resize(k);
    } else {
        std::sort(docs.begin(), docs.end(), ranks_before);
    }
}

} // namespace

InvertedIndex InvertedIndex::build(std::span<const std::pair<DocId, SparseEmbedding>> corpus) {
    std::vector<std::size_t> order(corpus.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return corpus[a].first < corpus[b].first; });

    InvertedIndex ix;
    std::map<TokenId, std::vector<Posting>> lists;
    for (std::size_t i : order) {
        const auto& [doc, emb] = corpus[i];
        if (!ix.doc_ids_.empty() && ix.doc_ids_.back() == doc) {
            throw_invalid("index build: duplicate doc id " + std::to_string(doc));
        }
        emb.validate(std::numeric_limits<TokenId>::max());
        ix.doc_ids_.push_back(doc);
        ix.norms_.push_back(emb.norm());
        for (const auto& [t, w] : emb.entries) lists[t].push_back({doc, w});
    }
    ix.lists_.reserve(lists.size());
    for (auto& [t, postings] : lists) ix.lists_.push_back({t, std::move(postings)});
    return ix;
}

double InvertedIndex::doc_norm(DocId doc) const {
    auto it = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), doc);
    if (it == doc_ids_.end() || *it != doc) throw_invalid("index: unknown doc id " + std::to_string(doc));
    return norms_[static_cast<std::size_t>(it - doc_ids_.begin())];
}

const PostingList* InvertedIndex::find(TokenId token) const {
    auto it = std::lower_bound(lists_.begin(), lists_.end(), token,
                               [](const PostingList& l, TokenId t) { return l.token < t; });
    return (it != lists_.end() && it->token == token) ? &*it : nullptr;
}

SearchResult InvertedIndex::search(const SparseEmbedding& query, std::size_t k, bool normalize) const {
    if (k == 0) throw_invalid("search: k must be >= 1");
    SearchResult out;
    out.k_requested = k;
    if (query.empty() || doc_ids_.empty()) return out;

    // Term-at-a-time over the query's posting lists. Accumulators are keyed
    // by the doc's slot in doc_ids_; posting lists and doc_ids_ are both
    // ascending, so each list is merged against doc_ids_ with a moving cursor.
    std::vector<double> acc(doc_ids_.size(), 0.0);
    std::vector<bool> touched(doc_ids_.size(), false);
    std::vector<std::uint32_t> hit;
    for (const auto& [token, qw] : query.entries) {
        const PostingList* list = find(token);
        if (list == nullptr) continue;
        std::size_t slot = 0;
        for (const auto& p : list->postings) {
            slot = static_cast<std::size_t>(
                std::lower_bound(doc_ids_.begin() + static_cast<std::ptrdiff_t>(slot), doc_ids_.end(), p.doc) -
                doc_ids_.begin());
            acc[slot] += qw * p.weight;
            ++out.touches;
            if (!touched[slot]) {
                touched[slot] = true;
                hit.push_back(static_cast<std::uint32_t>(slot));
            }
        }
    }
    const double qn = query.norm();
    out.ranked.reserve(hit.size());
    for (std::uint32_t slot : hit) {
        double score = acc[slot];
        if (normalize) score /= norms_[slot] * qn;
        out.ranked.push_back({doc_ids_[slot], score});
    }
    take_top_k(out.ranked, k);
    return out;
}

SparseEmbedding mask_query(const Vocabulary& vocab, std::string_view text, std::size_t max_len) {
    const MaskVec mask = build_mask(vocab, tokenize(vocab, text, max_len));
    SparseEmbedding q;
    for (TokenId t : mask.active) q.entries.push_back({t, 1.0});
    return q;
}

SearchResult InvertedIndex::mask_search(const Vocabulary& vocab, std::string_view text, std::size_t k,
                                        std::size_t max_len) const {
    return search(mask_query(vocab, text, max_len), k, false);
}

std::vector<std::pair<DocId, SparseEmbedding>> InvertedIndex::reconstruct() const {
    std::vector<std::pair<DocId, SparseEmbedding>> out;
    out.reserve(doc_ids_.size());
    for (DocId d : doc_ids_) out.push_back({d, {}});
    for (const auto& list : lists_) {
        for (const auto& p : list.postings) {
            const auto slot = std::lower_bound(doc_ids_.begin(), doc_ids_.end(), p.doc) - doc_ids_.begin();
            out[static_cast<std::size_t>(slot)].second.entries.push_back({list.token, p.weight});
        }
    }
    return out;
}

std::string InvertedIndex::serialize() const {
    std::ostringstream out;
    binio::write_bytes(out, kIndexMagic);
    binio::write_u32(out, kIndexVersion);
    binio::write_u64(out, doc_ids_.size());
    binio::write_u32(out, static_cast<std::uint32_t>(lists_.size()));
    for (const auto& list : lists_) {
        binio::write_u32(out, list.token);
        binio::write_u32(out, static_cast<std::uint32_t>(list.postings.size()));
        DocId prev = 0;
        for (const auto& p : list.postings) {
            binio::write_u32(out, p.doc - prev);
            prev = p.doc;
        }
        for (const auto& p : list.postings) binio::write_f64(out, p.weight);
    }
    for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
        binio::write_u32(out, doc_ids_[i]);
        binio::write_f64(out, norms_[i]);
    }
    return out.str();
}

InvertedIndex InvertedIndex::deserialize(const std::string& bytes) {
    std::istringstream in(bytes);
    if (bytes.size() < kIndexMagic.size() || binio::read_bytes(in, kIndexMagic.size()) != kIndexMagic) {
        throw_format("index: bad magic");
    }
    const std::uint32_t version = binio::read_u32(in);
    if (version != kIndexVersion) throw_format("index: unsupported version " + std::to_string(version));
    const std::uint64_t docs = binio::read_u64(in);
    const std::uint32_t tokens = binio::read_u32(in);
    // Every posting and doc entry takes at least 12 bytes; reject counts the
    // remaining payload cannot hold before allocating for them.
    if (docs > bytes.size() / 12 || tokens > bytes.size() / 8) throw_format("index: truncated");

    InvertedIndex ix;
    ix.lists_.reserve(tokens);
    for (std::uint32_t i = 0; i < tokens; ++i) {
        PostingList list;
        list.token = binio::read_u32(in);
        if (!ix.lists_.empty() && list.token <= ix.lists_.back().token) throw_format("index: token ids out of order");
        const std::uint32_t count = binio::read_u32(in);
        if (count == 0 || count > bytes.size() / 12) throw_format("index: bad posting count");
        list.postings.resize(count);
        DocId prev = 0;
        for (std::uint32_t j = 0; j < count; ++j) {
            const std::uint32_t delta = binio::read_u32(in);
            if (j > 0 && delta == 0) throw_format("index: doc ids not strictly increasing");
            list.postings[j].doc = prev + delta;
            if (list.postings[j].doc < prev) throw_format("index: doc id overflow");
            prev = list.postings[j].doc;
        }
        for (auto& p : list.postings) {
            p.weight = binio::read_f64(in);
            if (!(p.weight > 0.0) || !std::isfinite(p.weight)) throw_format("index: non-positive posting weight");
        }
        ix.lists_.push_back(std::move(list));
    }
    ix.doc_ids_.resize(docs);
    ix.norms_.resize(docs);
    for (std::uint64_t i = 0; i < docs; ++i) {
        ix.doc_ids_[i] = binio::read_u32(in);
        ix.norms_[i] = binio::read_f64(in);
        if (i > 0 && ix.doc_ids_[i] <= ix.doc_ids_[i - 1]) throw_format("index: doc table out of order");
        if (!(ix.norms_[i] >= 0.0) || !std::isfinite(ix.norms_[i])) throw_format("index: bad doc norm");
    }
    if (in.peek() != std::char_traits<char>::eof()) throw_format("index: trailing bytes");
    for (const auto& list : ix.lists_) {
        for (const auto& p : list.postings) {
            if (!std::binary_search(ix.doc_ids_.begin(), ix.doc_ids_.end(), p.doc)) {
                throw_format("index: posting references unknown doc " + std::to_string(p.doc));
            }
        }
    }
    return ix;
}

void InvertedIndex::save(const std::filesystem::path& path) const { binio::write_file_atomic(path, serialize()); }

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) { return deserialize(binio::read_file(path)); }

SearchResult brute_force_search(std::span<const std::pair<DocId, SparseEmbedding>> corpus,
                                const SparseEmbedding& query, std::size_t k, bool normalize) {
    if (k == 0) throw_invalid("search: k must be >= 1");
    SearchResult out;
    out.k_requested = k;
    std::size_t vsize = 0;
    for (const auto& e : query.entries) vsize = std::max<std::size_t>(vsize, e.token + 1);
    for (const auto& [doc, emb] : corpus)
        for (const auto& e : emb.entries) vsize = std::max<std::size_t>(vsize, e.token + 1);
    const std::vector<double> q = query.densify(vsize);
    const double qn = query.norm();
    for (const auto& [doc, emb] : corpus) {
        const std::vector<double> d = emb.densify(vsize);
        double score = 0.0;
        bool shared = false;
        for (std::size_t t = 0; t < vsize; ++t) {
            if (q[t] != 0.0 && d[t] != 0.0) {
                score += q[t] * d[t];
                shared = true;
            }
        }
        if (!shared) continue;
        if (normalize) score /= emb.norm() * qn;
        out.ranked.push_back({doc, score});
    }
    take_top_k(out.ranked, k);
    return out;
}

} // namespace stair
