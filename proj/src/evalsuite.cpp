#include "stair/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "stair/errors.hpp"
#include "stair/index.hpp"
#include "stair/objective.hpp"

namespace stair {

namespace {

double dense_cosine(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = std::sqrt(std::inner_product(a.begin(), a.end(), a.begin(), 0.0));
    const double nb = std::sqrt(std::inner_product(b.begin(), b.end(), b.begin(), 0.0));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0) / (na * nb);
}

// 1-based rank of item `mate` under score-descending, id-ascending order.
std::size_t rank_of(std::span<const double> scores, std::size_t mate) {
    std::size_t rank = 1;
    for (std::size_t j = 0; j < scores.size(); ++j) {
        if (scores[j] > scores[mate] || (scores[j] == scores[mate] && j < mate)) ++rank;
    }
    return rank;
}

std::uint32_t max_k(std::span<const std::uint32_t> ks) {
    if (ks.empty()) throw_invalid("recall: at least one K is required");
    std::uint32_t m = 0;
    for (auto k : ks) {
        if (k == 0) throw_invalid("recall: K must be >= 1");
        m = std::max(m, k);
    }
    return m;
}

// Mate position in a search result, 0 when it was not retrieved.
std::size_t position_in(const SearchResult& r, DocId mate) {
    for (std::size_t i = 0; i < r.ranked.size(); ++i)
        if (r.ranked[i].doc == mate) return i + 1;
    return 0;
}

std::map<std::uint32_t, double> recall_from_ranks(std::span<const std::size_t> ranks, std::span<const std::uint32_t> ks) {
    std::map<std::uint32_t, double> out;
    for (auto k : ks) {
        std::size_t hits = 0;
        for (auto r : ranks) hits += (r != 0 && r <= k);
        out[k] = ranks.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(ranks.size());
    }
    return out;
}

std::vector<std::size_t> sparse_ranks(std::span<const SparseEmbedding> queries, std::span<const SparseEmbedding> docs,
                                      std::uint32_t k, Ranker ranker) {
    std::vector<std::pair<DocId, SparseEmbedding>> corpus;
    corpus.reserve(docs.size());
    for (std::size_t i = 0; i < docs.size(); ++i) corpus.emplace_back(static_cast<DocId>(i), docs[i]);
    std::vector<std::size_t> ranks(queries.size());
    if (ranker == Ranker::Index) {
        const InvertedIndex ix = InvertedIndex::build(corpus);
        for (std::size_t i = 0; i < queries.size(); ++i)
            ranks[i] = position_in(ix.search(queries[i], k, true), static_cast<DocId>(i));
    } else {
        for (std::size_t i = 0; i < queries.size(); ++i)
            ranks[i] = position_in(brute_force_search(corpus, queries[i], k, true), static_cast<DocId>(i));
    }
    return ranks;
}

std::vector<std::size_t> dense_ranks(const std::vector<std::vector<double>>& queries,
                                     const std::vector<std::vector<double>>& docs) {
    std::vector<std::size_t> ranks(queries.size());
    std::vector<double> scores(docs.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        for (std::size_t j = 0; j < docs.size(); ++j) scores[j] = dense_cosine(queries[i], docs[j]);
        ranks[i] = rank_of(scores, i);
    }
    return ranks;
}

} // namespace

EncodedSplit encode_split(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples,
                          bool prompt) {
    EncodedSplit out;
    out.dense = model.config.head == HeadKind::Dense;
    Embedder emb(model);
    const TokenId pad = vocab.specials().pad;
    for (const auto& s : samples) {
        const TokenSeq seq = tokenize(vocab, prompt ? with_prompt(s.caption) : s.caption, model.config.max_text_len);
        if (out.dense) {
            out.dense_images.push_back(emb.dense_image(s.image));
            out.dense_texts.push_back(emb.dense_text(seq, pad));
        } else {
            out.images.push_back(emb.image(s.image));
            out.texts.push_back(emb.text(seq, pad));
        }
    }
    return out;
}

// ---- retrieval --------------------------------------------------------------

const std::vector<std::uint32_t>& default_recall_ks() {
    static const std::vector<std::uint32_t> ks = {1, 5, 10};
    return ks;
}

RetrievalReport retrieval_from_embeddings(const EncodedSplit& enc, std::span<const std::uint32_t> ks, Ranker ranker) {
    const std::uint32_t k = max_k(ks);
    RetrievalReport rep;
    std::vector<std::size_t> t2i, i2t;
    if (enc.dense) {
        if (enc.dense_images.size() != enc.dense_texts.size()) throw_invalid("retrieval: unaligned split");
        rep.queries = enc.dense_images.size();
        t2i = dense_ranks(enc.dense_texts, enc.dense_images);
        i2t = dense_ranks(enc.dense_images, enc.dense_texts);
    } else {
        if (enc.images.size() != enc.texts.size()) throw_invalid("retrieval: unaligned split");
        rep.queries = enc.images.size();
        t2i = sparse_ranks(enc.texts, enc.images, k, ranker);
        i2t = sparse_ranks(enc.images, enc.texts, k, ranker);
    }
    if (rep.queries == 0) throw_invalid("retrieval: at least one pair is required");
    rep.text_to_image = recall_from_ranks(t2i, ks);
    rep.image_to_text = recall_from_ranks(i2t, ks);
    return rep;
}

RetrievalReport eval_retrieval(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples,
                               std::span<const std::uint32_t> ks, Ranker ranker) {
    if (samples.empty()) throw_invalid("eval_retrieval: at least one pair is required");
    return retrieval_from_embeddings(encode_split(model, vocab, samples, true), ks, ranker);
}

std::map<std::uint32_t, double> mask_retrieval(const Vocabulary& vocab, std::span<const SparseEmbedding> images,
                                               std::span<const PairedSample> samples, std::span<const std::uint32_t> ks,
                                               std::size_t max_len) {
    if (images.size() != samples.size() || images.empty()) throw_invalid("mask_retrieval: unaligned split");
    const std::uint32_t k = max_k(ks);
    std::vector<std::pair<DocId, SparseEmbedding>> corpus;
    for (std::size_t i = 0; i < images.size(); ++i) corpus.emplace_back(static_cast<DocId>(i), images[i]);
    const InvertedIndex ix = InvertedIndex::build(corpus);
    std::vector<std::size_t> ranks(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        ranks[i] = position_in(ix.mask_search(vocab, with_prompt(samples[i].caption), k, max_len),
                               static_cast<DocId>(i));
    }
    return recall_from_ranks(ranks, ks);
}

PermutationNull permutation_null(std::size_t n, std::size_t trials, std::uint64_t seed) {
    if (n == 0 || trials < 2) throw_invalid("permutation_null: need n >= 1 and trials >= 2");
    PermutationNull out;
    const double p = 1.0 / static_cast<double>(n);
    out.mean = p;
    out.stddev = std::sqrt(p * (1.0 - p) / static_cast<double>(n));
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> perm(n);
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t t = 0; t < trials; ++t) {
        // Each query ranks the items by an independent random permutation.
        std::size_t hits = 0;
        for (std::size_t q = 0; q < n; ++q) {
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            std::shuffle(perm.begin(), perm.end(), rng);
            hits += perm[0] == q;
        }
        const double r = static_cast<double>(hits) / static_cast<double>(n);
        sum += r;
        sum_sq += r * r;
    }
    const double tn = static_cast<double>(trials);
    out.simulated_mean = sum / tn;
    out.simulated_stddev = std::sqrt(std::max(0.0, (sum_sq - sum * sum / tn) / (tn - 1.0)));
    return out;
}

// ---- classification -----------------------------------------------------------

double zeroshot_accuracy(std::span<const SparseEmbedding> images, std::span<const SparseEmbedding> classes,
                         std::span<const std::uint32_t> labels) {
    if (images.size() != labels.size()) throw_invalid("zeroshot: labels and images differ in length");
    if (classes.empty() || images.empty()) throw_invalid("zeroshot: need classes and images");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::size_t best = 0;
        double best_sim = -INFINITY;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            const double s = cosine_sim(images[i], classes[c]);
            if (s > best_sim) {
                best_sim = s;
                best = c;
            }
        }
        correct += best == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

double zeroshot_accuracy_dense(std::span<const std::vector<double>> images,
                               std::span<const std::vector<double>> classes, std::span<const std::uint32_t> labels) {
    if (images.size() != labels.size()) throw_invalid("zeroshot: labels and images differ in length");
    if (classes.empty() || images.empty()) throw_invalid("zeroshot: need classes and images");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < images.size(); ++i) {
        std::size_t best = 0;
        double best_sim = -INFINITY;
        for (std::size_t c = 0; c < classes.size(); ++c) {
            const double s = dense_cosine(images[i], classes[c]);
            if (s > best_sim) {
                best_sim = s;
                best = c;
            }
        }
        correct += best == labels[i];
    }
    return static_cast<double>(correct) / static_cast<double>(images.size());
}

std::vector<std::uint32_t> labels_of(std::span<const PairedSample> samples) {
    std::vector<std::uint32_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        if (s.concepts.size() != 1) throw_invalid("labels: sample does not hold exactly one concept");
        out.push_back(s.concepts[0]);
    }
    return out;
}

double eval_zeroshot(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> labeled,
                     const ConceptBank& bank) {
    if (bank.concepts.size() < 2) throw_invalid("eval_zeroshot: at least two classes are required");
    const auto labels = labels_of(labeled);
    Embedder emb(model);
    const TokenId pad = vocab.specials().pad;
    const bool dense = model.config.head == HeadKind::Dense;
    std::vector<SparseEmbedding> classes, images;
    std::vector<std::vector<double>> dclasses, dimages;
    for (const auto& [word, prompt] : prompt_classes(bank)) {
        const TokenSeq word_seq = tokenize(vocab, word, model.config.max_text_len);
        bool known = false;
        for (TokenId t : word_seq.ids) known = known || (!vocab.is_special(t));
        if (!known) throw_invalid("eval_zeroshot: class '" + word + "' tokenizes to [UNK] only");
        const TokenSeq seq = tokenize(vocab, prompt, model.config.max_text_len);
        if (dense) {
            dclasses.push_back(emb.dense_text(seq, pad));
        } else {
            classes.push_back(emb.text(seq, pad));
        }
    }
    for (const auto& s : labeled) {
        if (dense) {
            dimages.push_back(emb.dense_image(s.image));
        } else {
            images.push_back(emb.image(s.image));
        }
    }
    return dense ? zeroshot_accuracy_dense(dimages, dclasses, labels) : zeroshot_accuracy(images, classes, labels);
}

ProbeResult linear_probe(const std::vector<std::vector<double>>& train_x, std::span<const std::uint32_t> train_y,
                         const std::vector<std::vector<double>>& test_x, std::span<const std::uint32_t> test_y,
                         std::uint32_t classes, const ProbeConfig& cfg) {
    if (train_x.empty() || train_x.size() != train_y.size() || test_x.size() != test_y.size()) {
        throw_invalid("linear_probe: features and labels must be non-empty and aligned");
    }
    if (classes < 2) throw_invalid("linear_probe: at least two classes are required");
    bool varied = false;
    for (auto y : train_y) {
        if (y >= classes) throw_invalid("linear_probe: label out of range");
        varied = varied || y != train_y[0];
    }
    if (!varied) throw_invalid("linear_probe: training split holds a single class");
    const std::size_t dim = train_x[0].size();
    const std::size_t n = train_x.size();
    std::vector<double> w(dim * classes, 0.0), b(classes, 0.0);
    std::vector<double> gw(w.size()), gb(classes), logits(classes);

    auto predict = [&](const std::vector<double>& x) {
        for (std::uint32_t c = 0; c < classes; ++c) {
            double z = b[c];
            for (std::size_t d = 0; d < dim; ++d) z += x[d] * w[d * classes + c];
            logits[c] = z;
        }
    };
    for (std::uint32_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            if (train_x[i].size() != dim) throw_invalid("linear_probe: ragged features");
            predict(train_x[i]);
            const double mx = *std::max_element(logits.begin(), logits.end());
            double z = 0.0;
            for (auto& l : logits) z += (l = std::exp(l - mx));
            for (std::uint32_t c = 0; c < classes; ++c) {
                const double g = logits[c] / z - (c == train_y[i] ? 1.0 : 0.0);
                gb[c] += g;
                for (std::size_t d = 0; d < dim; ++d) gw[d * classes + c] += train_x[i][d] * g;
            }
        }
        const double step = cfg.lr / static_cast<double>(n);
        for (std::size_t k = 0; k < w.size(); ++k) w[k] -= step * gw[k];
        for (std::uint32_t c = 0; c < classes; ++c) b[c] -= step * gb[c];
    }
    auto accuracy = [&](const std::vector<std::vector<double>>& xs, std::span<const std::uint32_t> ys) {
        if (xs.empty()) return 0.0;
        std::size_t correct = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            predict(xs[i]);
            const auto best = static_cast<std::uint32_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
            correct += best == ys[i];
        }
        return static_cast<double>(correct) / static_cast<double>(xs.size());
    };
    return {accuracy(train_x, train_y), accuracy(test_x, test_y)};
}

ProbeResult eval_linear_probe(const Model& model, std::span<const PairedSample> labeled, std::uint32_t classes,
                              const ProbeConfig& cfg) {
    const auto labels = labels_of(labeled);
    const std::size_t half = labeled.size() / 2;
    if (half == 0) throw_invalid("eval_linear_probe: need at least two labeled images");
    Embedder emb(model);
    std::vector<std::vector<double>> feats;
    feats.reserve(labeled.size());
    for (const auto& s : labeled) {
        feats.push_back(model.config.head == HeadKind::Dense ? emb.dense_image(s.image)
                                                               : emb.image(s.image).densify(model.config.vocab_size));
    }
    const std::vector<std::vector<double>> train(feats.begin(), feats.begin() + static_cast<std::ptrdiff_t>(half));
    const std::vector<std::vector<double>> test(feats.begin() + static_cast<std::ptrdiff_t>(half), feats.end());
    return linear_probe(train, std::span(labels).first(half), test, std::span(labels).subspan(half), classes, cfg);
}

// ---- interpretability ---------------------------------------------------------

const std::vector<std::uint32_t>& default_interp_ks() {
    static const std::vector<std::uint32_t> ks = {1, 10, 50, 100};
    return ks;
}

std::size_t token_rank(std::span<const double> scores, TokenId token, std::span<const TokenId> candidates) {
    if (token >= scores.size()) throw_invalid("token_rank: token out of range");
    const double s = scores[token];
    std::size_t rank = 1;
    auto consider = [&](TokenId c) {
        if (scores[c] > s || (scores[c] == s && c < token)) ++rank;
    };
    if (candidates.empty()) {
        for (std::size_t c = 0; c < scores.size(); ++c) consider(static_cast<TokenId>(c));
    } else {
        for (TokenId c : candidates) {
            if (c >= scores.size()) throw_invalid("token_rank: candidate out of range");
            consider(c);
        }
    }
    return rank;
}

std::vector<std::vector<TokenId>> class_tokens(const Vocabulary& vocab, const ConceptBank& bank) {
    std::vector<std::vector<TokenId>> out;
    for (const auto& c : bank.concepts) {
        std::vector<TokenId> toks;
        for (TokenId t : tokenize(vocab, c.word, 64).ids)
            if (!vocab.is_special(t)) toks.push_back(t);
        if (toks.empty()) throw_invalid("interpretability: class '" + c.word + "' has no content tokens");
        out.push_back(std::move(toks));
    }
    return out;
}

InterpReport interpretability_from_scores(const std::vector<std::vector<double>>& scores,
                                          std::span<const std::uint32_t> labels,
                                          const std::vector<std::vector<TokenId>>& classes,
                                          std::span<const std::uint32_t> ks, std::span<const TokenId> candidates) {
    if (scores.size() != labels.size()) throw_invalid("interpretability: labels and images differ in length");
    InterpReport rep;
    rep.images = scores.size();
    rep.candidate_space = candidates.empty() ? (scores.empty() ? 0 : scores[0].size()) : candidates.size();
    std::vector<std::size_t> best(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const auto& subwords = classes.at(labels[i]);
        std::size_t r = SIZE_MAX;
        for (TokenId t : subwords) r = std::min(r, token_rank(scores[i], t, candidates));
        best[i] = r;
    }
    for (auto k : ks) {
        std::size_t hits = 0;
        for (auto r : best) hits += r <= k;
        rep.top_k[k] = scores.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(scores.size());
    }
    return rep;
}

InterpReport eval_interpretability(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> labeled,
                                   const ConceptBank& bank, std::span<const std::uint32_t> ks,
                                   std::span<const TokenId> candidates) {
    const auto labels = labels_of(labeled);
    const auto classes = class_tokens(vocab, bank);
    const std::size_t vsize = model.config.vocab_size;
    Embedder emb(model);
    std::vector<std::vector<double>> scores;
    scores.reserve(labeled.size());
    if (model.config.head == HeadKind::Sparse) {
        for (const auto& s : labeled) scores.push_back(emb.image(s.image).densify(vsize));
    } else {
        // Lexicon space for a dense model: each token's own text embedding.
        std::vector<std::vector<double>> lexicon(vsize);
        const SpecialIds sp = vocab.specials();
        for (std::size_t t = 0; t < vsize; ++t) {
            TokenSeq seq;
            seq.ids = vocab.is_special(static_cast<TokenId>(t)) ? std::vector<TokenId>{sp.cls, sp.sep}
                                                                 : std::vector<TokenId>{sp.cls, static_cast<TokenId>(t), sp.sep};
            lexicon[t] = emb.dense_text(seq, sp.pad);
        }
        for (const auto& s : labeled) {
            const auto img = emb.dense_image(s.image);
            std::vector<double> row(vsize);
            for (std::size_t t = 0; t < vsize; ++t) row[t] = dense_cosine(img, lexicon[t]);
            scores.push_back(std::move(row));
        }
    }
    return interpretability_from_scores(scores, labels, classes, ks, candidates);
}

// ---- sparsity -----------------------------------------------------------------

ActivationStats activation_stats(std::span<const SparseEmbedding> embs) {
    ActivationStats st;
    st.count = embs.size();
    if (embs.empty()) return st;
    std::vector<std::size_t> sizes;
    sizes.reserve(embs.size());
    for (const auto& e : embs) sizes.push_back(e.active_count());
    std::sort(sizes.begin(), sizes.end());
    st.mean = static_cast<double>(std::accumulate(sizes.begin(), sizes.end(), std::size_t{0})) /
              static_cast<double>(sizes.size());
    const std::size_t m = sizes.size() / 2;
    st.median = sizes.size() % 2 ? static_cast<double>(sizes[m]) : 0.5 * static_cast<double>(sizes[m - 1] + sizes[m]);
    st.max = sizes.back();
    return st;
}

SparsityStats eval_sparsity(const Model& model, const Vocabulary& vocab, std::span<const PairedSample> samples) {
    if (samples.empty()) throw_invalid("eval_sparsity: corpus is empty");
    if (model.config.head != HeadKind::Sparse) throw_invalid("eval_sparsity: needs a sparse-head model");
    const EncodedSplit enc = encode_split(model, vocab, samples, false);
    return {activation_stats(enc.images), activation_stats(enc.texts)};
}

// ---- localization ---------------------------------------------------------------

LocalizationReport eval_localization(const Model& model, const Vocabulary& vocab,
                                     std::span<const PairedSample> labeled, const ConceptBank& bank) {
    const auto labels = labels_of(labeled);
    const auto classes = class_tokens(vocab, bank);
    Embedder emb(model);
    LocalizationReport rep;
    rep.images = labeled.size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < labeled.size(); ++i) {
        const auto& s = labeled[i];
        const Heatmap h = heatmap_from_logits(emb.image_logits(s.image), s.image.height, s.image.width,
                                              classes.at(labels[i]));
        const auto vals = h.values.data();
        const auto cell = static_cast<std::uint32_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
        const auto it = s.placements.find(labels[i]);
        if (it != s.placements.end() && std::find(it->second.begin(), it->second.end(), cell) != it->second.end()) ++hits;
    }
    rep.hit_rate = labeled.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(labeled.size());
    return rep;
}

} // namespace stair
