#include "stair/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <istream>
#include <numbers>
#include <ostream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "stair/binio.hpp"
#include "stair/config.hpp"
#include "stair/errors.hpp"

namespace stair {

namespace {

const std::vector<std::string> kConceptWords = {"cat",   "dog",   "car",   "tree",  "boat",
                                                "bird",  "house", "horse", "apple", "sunflower",
                                                "chair", "train", "cup",   "fish",  "kite",
                                                "lamp"};

const std::vector<std::string> kAdjectives = {"small", "big", "red",   "blue",  "green",
                                              "old",   "young", "bright", "dark", "happy"};

const std::vector<std::string> kPrefixes = {"", "the", "there is a", "i see a", "here is the", "this is a"};
const std::vector<std::string> kConnectors = {"and a", "with the", "near a", "beside the", "next to a"};
const std::vector<std::string> kSuffixes = {"", "today", "outside", "in the scene", "at night", "on the grass"};

// Vocabulary filler that the generator never emits, so the candidate space is
// larger than the caption lexicon.
const std::vector<std::string> kExtraWords = {
    "man",    "woman",  "person", "road",   "sky",   "water",  "table",  "window", "door",  "street",
    "city",   "field",  "flower", "light",  "ball",  "game",   "food",   "plate",  "phone", "book",
    "bag",    "hat",    "shirt",  "room",   "wall",  "floor",  "snow",   "beach",  "sea",   "river",
    "hill",   "mountain", "cloud", "sunset", "day",  "child",  "boy",    "girl",   "group", "people",
    "bike",   "bus",    "truck",  "plane",  "sign",  "tower",  "bridge", "park",   "garden", "kitchen",
    "bed",    "box",    "toy",    "picture", "image", "photo", "of",     "some",   "two",   "three",
    "one",    "it",     "are",    "was",    "very",  "many",   "white",  "black",  "yellow", "brown",
    "large",  "little", "front",  "top",    "under", "over",   "by",     "from",   "for",   "to"};

const std::vector<std::string> kSubwordPieces = {"##s", "##ing", "##ed", "##er", "##ly", "##est", "##y", "##flower"};

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

template <class T>
const T& pick(const std::vector<T>& items, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> d(0, items.size() - 1);
    return items[d(rng)];
}

bool place_blocks(const DatagenConfig& cfg, std::size_t index, const std::vector<std::uint32_t>& concepts,
                  std::vector<bool>& occupied, std::vector<std::pair<std::uint32_t, std::uint32_t>>& corners,
                  std::mt19937_64& rng) {
    if (index == concepts.size()) return true;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> options;
    for (std::uint32_t r = 0; r + cfg.block <= cfg.grid_height; ++r)
        for (std::uint32_t c = 0; c + cfg.block <= cfg.grid_width; ++c) options.emplace_back(r, c);
    std::shuffle(options.begin(), options.end(), rng);
    for (const auto& [r0, c0] : options) {
        bool free = true;
        for (std::uint32_t r = r0; r < r0 + cfg.block && free; ++r)
            for (std::uint32_t c = c0; c < c0 + cfg.block && free; ++c) free = !occupied[r * cfg.grid_width + c];
        if (!free) continue;
        auto mark = [&](bool v) {
            for (std::uint32_t r = r0; r < r0 + cfg.block; ++r)
                for (std::uint32_t c = c0; c < c0 + cfg.block; ++c) occupied[r * cfg.grid_width + c] = v;
        };
        mark(true);
        corners.emplace_back(r0, c0);
        if (place_blocks(cfg, index + 1, concepts, occupied, corners, rng)) return true;
        corners.pop_back();
        mark(false);
    }
    return false;
}

std::vector<std::vector<std::uint32_t>> multi_concept_combos(std::uint32_t n, std::uint32_t max_k) {
    std::vector<std::vector<std::uint32_t>> out;
    std::vector<std::uint32_t> cur;
    auto rec = [&](auto&& self, std::uint32_t start) -> void {
        if (cur.size() >= 2) out.push_back(cur);
        if (cur.size() == max_k) return;
        for (std::uint32_t i = start; i < n; ++i) {
            cur.push_back(i);
            self(self, i + 1);
            cur.pop_back();
        }
    };
    rec(rec, 0);
    return out;
}

} // namespace

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix(splitmix(seed) ^ stream); }

void DatagenConfig::validate() const {
    if (n_concepts == 0 || n_concepts > kConceptWords.size()) {
        throw_config("datagen: n_concepts must be in [1, " + std::to_string(kConceptWords.size()) + "]");
    }
    if (n_concepts > patch_dim) throw_config("datagen: n_concepts cannot exceed patch_dim (signatures are orthogonal)");
    if (max_concepts == 0 || max_concepts > n_concepts) throw_config("datagen: max_concepts must be in [1, n_concepts]");
    if (block == 0 || block > grid_height || block > grid_width) throw_config("datagen: block does not fit the grid");
    if (!(noise_sigma >= 0.0) || !(signature_norm > 0.0)) throw_config("datagen: noise_sigma >= 0, signature_norm > 0");
    if (!(holdout_fraction >= 0.0 && holdout_fraction < 1.0)) throw_config("datagen: holdout_fraction must be in [0, 1)");
    if (!(distractor_prob >= 0.0 && distractor_prob <= 1.0)) throw_config("datagen: distractor_prob must be in [0, 1]");
    const std::size_t held = held_out_count(*this);
    if (held > 0 && n_test > held) {
        throw_config("datagen: n_test (" + std::to_string(n_test) + ") exceeds the " + std::to_string(held) +
                     " held-out concept combinations; lower n_test or raise holdout_fraction");
    }
}

std::size_t held_out_count(const DatagenConfig& cfg) {
    std::size_t combos = 0;
    for (std::uint32_t k = 2; k <= cfg.max_concepts; ++k) {
        std::size_t c = 1;
        for (std::uint32_t i = 0; i < k; ++i) c = c * (cfg.n_concepts - i) / (i + 1);
        combos += c;
    }
    return static_cast<std::size_t>(std::llround(cfg.holdout_fraction * static_cast<double>(combos)));
}

void ConceptBank::validate(const Vocabulary& vocab) const {
    if (frequencies.size() != concepts.size()) throw_config("concept bank: one frequency per concept required");
    for (double f : frequencies)
        if (!(f > 0.0)) throw_config("concept bank: frequencies must be positive");
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const auto& c = concepts[i];
        if (c.id != i) throw_config("concept bank: ids must be dense and ordered");
        const TokenSeq seq = tokenize(vocab, c.word, 64);
        std::size_t content = 0;
        for (TokenId t : seq.ids) {
            if (t == vocab.specials().unk) throw_config("concept bank: word '" + c.word + "' tokenizes to [UNK]");
            if (!vocab.is_special(t)) ++content;
        }
        if (content == 0) throw_config("concept bank: word '" + c.word + "' has no content tokens");
        for (std::size_t j = 0; j < i; ++j) {
            const auto& a = concepts[j].signature;
            const auto& b = c.signature;
            if (a.size() != b.size()) throw_config("concept bank: signature lengths differ");
            double ab = 0.0, aa = 0.0, bb = 0.0;
            for (std::size_t k = 0; k < a.size(); ++k) {
                ab += a[k] * b[k];
                aa += a[k] * a[k];
                bb += b[k] * b[k];
            }
            const double cosang = std::abs(ab) / std::sqrt(aa * bb);
            if (!(cosang < std::cos(15.0 * std::numbers::pi / 180.0))) {
                throw_config("concept bank: signatures of '" + concepts[j].word + "' and '" + c.word +
                             "' are within 15 degrees");
            }
        }
    }
}

ConceptBank default_concept_bank(const DatagenConfig& cfg) {
    cfg.validate();
    std::mt19937_64 rng(derive_seed(cfg.seed, 0xBA11));
    std::normal_distribution<double> normal(0.0, 1.0);
    ConceptBank bank;
    std::vector<std::vector<double>> basis;
    for (std::uint32_t i = 0; i < cfg.n_concepts; ++i) {
        // Gram-Schmidt against the previous signatures.
        std::vector<double> v(cfg.patch_dim);
        for (auto& x : v) x = normal(rng);
        for (const auto& b : basis) {
            double d = 0.0;
            for (std::size_t k = 0; k < v.size(); ++k) d += v[k] * b[k];
            for (std::size_t k = 0; k < v.size(); ++k) v[k] -= d * b[k];
        }
        double n = 0.0;
        for (double x : v) n += x * x;
        n = std::sqrt(n);
        for (auto& x : v) x /= n;
        basis.push_back(v);

        ConceptSpec c;
        c.id = i;
        c.word = kConceptWords[i];
        c.signature = Tensor({cfg.patch_dim});
        for (std::size_t k = 0; k < v.size(); ++k) c.signature[k] = v[k] * cfg.signature_norm;
        std::vector<std::string> adj = kAdjectives;
        std::shuffle(adj.begin(), adj.end(), rng);
        c.distractor_words.assign(adj.begin(), adj.begin() + 3);
        bank.concepts.push_back(std::move(c));
    }
    bank.frequencies.assign(cfg.n_concepts, 1.0);
    return bank;
}

Vocabulary default_vocabulary(const ConceptBank& bank) {
    std::vector<std::string> tokens = {std::string(Vocabulary::kPad), std::string(Vocabulary::kUnk),
                                       std::string(Vocabulary::kCls), std::string(Vocabulary::kSep)};
    std::set<std::string> seen(tokens.begin(), tokens.end());
    auto add = [&](const std::string& t) {
        if (!t.empty() && seen.insert(t).second) tokens.push_back(t);
    };
    for (char c = 'a'; c <= 'z'; ++c) add(std::string(1, c));
    for (char c = '0'; c <= '9'; ++c) add(std::string(1, c));
    for (char c : std::string(".,!?'-")) add(std::string(1, c));
    for (char c = 'a'; c <= 'z'; ++c) add("##" + std::string(1, c));
    auto add_words = [&](const std::string& phrase) {
        std::istringstream ss(phrase);
        std::string w;
        while (ss >> w) add(w);
    };
    for (const auto& p : kPrefixes) add_words(p);
    for (const auto& p : kConnectors) add_words(p);
    for (const auto& p : kSuffixes) add_words(p);
    add_words("a photo of");
    for (const auto& a : kAdjectives) add(a);
    for (const auto& c : bank.concepts) {
        // "sunflower" is deliberately left out so it splits into sub-words.
        if (c.word == "sunflower") {
            add("sun");
        } else {
            add(c.word);
        }
    }
    for (const auto& w : kExtraWords) add(w);
    for (const auto& p : kSubwordPieces) add(p);
    return Vocabulary::from_tokens(std::move(tokens));
}

std::vector<std::uint32_t> draw_concepts(const DatagenConfig& cfg, const ConceptBank& bank, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::uint32_t> count(1, cfg.max_concepts);
    const std::uint32_t k = count(rng);
    std::vector<double> weights = bank.frequencies;
    std::vector<std::uint32_t> out;
    for (std::uint32_t j = 0; j < k; ++j) {
        std::discrete_distribution<std::uint32_t> d(weights.begin(), weights.end());
        const std::uint32_t c = d(rng);
        out.push_back(c);
        weights[c] = 0.0;
    }
    std::sort(out.begin(), out.end());
    return out;
}

PairedSample make_sample(const DatagenConfig& cfg, const ConceptBank& bank, std::vector<std::uint32_t> concepts,
                         std::mt19937_64& rng) {
    std::sort(concepts.begin(), concepts.end());
    PairedSample s;
    s.concepts = concepts;
    s.image.height = cfg.grid_height;
    s.image.width = cfg.grid_width;
    s.image.features = Tensor({static_cast<std::size_t>(cfg.grid_height) * cfg.grid_width, cfg.patch_dim});
    std::normal_distribution<double> noise(0.0, 1.0);
    if (cfg.noise_sigma > 0.0)
        for (auto& v : s.image.features.data()) v = cfg.noise_sigma * noise(rng);

    std::vector<bool> occupied(s.image.cells(), false);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> corners;
    if (!place_blocks(cfg, 0, concepts, occupied, corners, rng)) {
        throw_invalid("datagen: a " + std::to_string(cfg.grid_height) + "x" + std::to_string(cfg.grid_width) +
                      " grid cannot hold " + std::to_string(concepts.size()) + " blocks of side " +
                      std::to_string(cfg.block));
    }
    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const Tensor& sig = bank.concepts.at(concepts[i]).signature;
        auto& cells = s.placements[concepts[i]];
        const auto [r0, c0] = corners[i];
        for (std::uint32_t r = r0; r < r0 + cfg.block; ++r) {
            for (std::uint32_t c = c0; c < c0 + cfg.block; ++c) {
                const std::uint32_t cell = r * cfg.grid_width + c;
                cells.push_back(cell);
                auto row = s.image.features.row(cell);
                for (std::size_t k = 0; k < row.size(); ++k) row[k] += sig[k];
            }
        }
    }

    // Caption: concept words in random order, each optionally preceded by a
    // distractor adjective, joined by connectors, with optional filler.
    std::vector<std::uint32_t> order = concepts;
    std::shuffle(order.begin(), order.end(), rng);
    std::bernoulli_distribution use_adj(cfg.distractor_prob);
    std::string caption = pick(kPrefixes, rng);
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& c = bank.concepts.at(order[i]);
        if (i > 0) caption += " " + pick(kConnectors, rng);
        if (use_adj(rng) && !c.distractor_words.empty()) caption += " " + pick(c.distractor_words, rng);
        caption += " " + c.word;
    }
    const std::string& suffix = pick(kSuffixes, rng);
    if (!suffix.empty()) caption += " " + suffix;
    if (!caption.empty() && caption.front() == ' ') caption.erase(0, 1);
    s.caption = std::move(caption);
    return s;
}

Dataset generate(const DatagenConfig& cfg, const ConceptBank& bank) {
    cfg.validate();
    Dataset data;
    data.config = cfg;
    data.bank = bank;
    const auto n = static_cast<std::uint32_t>(bank.concepts.size());

    std::mt19937_64 split_rng(derive_seed(cfg.seed, 1));
    auto combos = multi_concept_combos(n, cfg.max_concepts);
    std::shuffle(combos.begin(), combos.end(), split_rng);
    const std::size_t held = held_out_count(cfg);
    std::set<std::vector<std::uint32_t>> held_out(combos.begin(), combos.begin() + static_cast<std::ptrdiff_t>(held));

    auto draw_seen = [&](std::mt19937_64& rng) {
        for (;;) {
            auto c = draw_concepts(cfg, bank, rng);
            if (!held_out.contains(c)) return c;
        }
    };
    auto fill = [&](std::vector<PairedSample>& out, std::uint32_t count, std::uint64_t stream, auto&& chooser) {
        std::mt19937_64 rng(derive_seed(cfg.seed, stream));
        out.reserve(count);
        for (std::uint32_t i = 0; i < count; ++i) out.push_back(make_sample(cfg, bank, chooser(rng, i), rng));
    };
    fill(data.train, cfg.n_train, 2, [&](std::mt19937_64& rng, std::uint32_t) { return draw_seen(rng); });
    fill(data.val, cfg.n_val, 3, [&](std::mt19937_64& rng, std::uint32_t) { return draw_seen(rng); });
    // Each test pair gets its own held-out combination, so no two test
    // images share a concept set and retrieval has a unique right answer.
    std::vector<std::vector<std::uint32_t>> held_list(combos.begin(), combos.begin() + static_cast<std::ptrdiff_t>(held));
    std::sort(held_list.begin(), held_list.end());
    std::mt19937_64 test_order(derive_seed(cfg.seed, 6));
    std::shuffle(held_list.begin(), held_list.end(), test_order);
    fill(data.test, cfg.n_test, 4, [&](std::mt19937_64& rng, std::uint32_t i) {
        return held_list.empty() ? draw_concepts(cfg, bank, rng) : held_list[i];
    });
    fill(data.labeled, cfg.n_labeled, 5,
         [&](std::mt19937_64&, std::uint32_t i) { return std::vector<std::uint32_t>{i % n}; });
    return data;
}

Dataset generate(const DatagenConfig& cfg) { return generate(cfg, default_concept_bank(cfg)); }

std::vector<std::pair<std::string, std::string>> prompt_classes(const ConceptBank& bank) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& c : bank.concepts) out.emplace_back(c.word, with_prompt(c.word));
    return out;
}

std::string with_prompt(const std::string& caption) { return "a photo of " + caption; }

// ---- files ------------------------------------------------------------------

namespace {
constexpr std::string_view kCorpusHeader = "STAIR-CORPUS 1";
}

void write_corpus(std::ostream& out, const std::vector<PairedSample>& samples, std::uint32_t patch_dim) {
    const std::uint32_t h = samples.empty() ? 0 : samples[0].image.height;
    const std::uint32_t w = samples.empty() ? 0 : samples[0].image.width;
    out << kCorpusHeader << '\n' << "count " << samples.size() << " grid " << h << ' ' << w << " patch " << patch_dim
        << '\n';
    for (std::size_t i = 0; i < samples.size(); ++i) {
        const auto& s = samples[i];
        if (s.image.height != h || s.image.width != w || s.image.features.cols() != patch_dim) {
            throw_invalid("write_corpus: samples must share grid and patch dimensions");
        }
        if (s.caption.find_first_of("\t\n") != std::string::npos) throw_invalid("write_corpus: caption has tab/newline");
        out << "sample " << i << '\t';
        for (std::size_t j = 0; j < s.concepts.size(); ++j) out << (j ? "," : "") << s.concepts[j];
        out << '\t';
        bool first = true;
        for (const auto& [c, cells] : s.placements) {
            out << (first ? "" : "|") << c << '=';
            for (std::size_t j = 0; j < cells.size(); ++j) out << (j ? "," : "") << cells[j];
            first = false;
        }
        out << '\t' << s.caption << '\n';
        for (double v : s.image.features.data()) binio::write_f64(out, v);
    }
    if (!out) throw_io("write_corpus: stream failure");
}

std::vector<PairedSample> read_corpus(std::istream& in) {
    std::string line;
    if (!std::getline(in, line) || line != kCorpusHeader) throw_format("corpus: missing header");
    std::size_t count = 0;
    std::uint32_t h = 0, w = 0, p = 0;
    {
        if (!std::getline(in, line)) throw_format("corpus: missing dimensions line");
        std::istringstream ss(line);
        std::string k1, k2, k3;
        if (!(ss >> k1 >> count >> k2 >> h >> w >> k3 >> p) || k1 != "count" || k2 != "grid" || k3 != "patch") {
            throw_format("corpus: malformed dimensions line");
        }
    }
    auto parse_ids = [](const std::string& s) {
        std::vector<std::uint32_t> ids;
        std::istringstream ss(s);
        std::string tok;
        while (std::getline(ss, tok, ','))
            if (!tok.empty()) ids.push_back(static_cast<std::uint32_t>(std::stoul(tok)));
        return ids;
    };
    std::vector<PairedSample> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        if (!std::getline(in, line)) throw_format("corpus: truncated at record " + std::to_string(i));
        std::vector<std::string> fields;
        std::istringstream ss(line);
        std::string f;
        while (std::getline(ss, f, '\t')) fields.push_back(f);
        if (fields.size() == 3) fields.emplace_back();
        if (fields.size() != 4 || fields[0] != "sample " + std::to_string(i)) {
            throw_format("corpus: malformed record header " + std::to_string(i));
        }
        PairedSample s;
        try {
            s.concepts = parse_ids(fields[1]);
            std::istringstream ps(fields[2]);
            std::string item;
            while (std::getline(ps, item, '|')) {
                const auto eq = item.find('=');
                if (eq == std::string::npos) throw_format("corpus: malformed placement");
                s.placements[static_cast<std::uint32_t>(std::stoul(item.substr(0, eq)))] = parse_ids(item.substr(eq + 1));
            }
        } catch (const std::logic_error&) {
            throw_format("corpus: malformed ids in record " + std::to_string(i));
        }
        s.caption = fields[3];
        s.image.height = h;
        s.image.width = w;
        s.image.features = Tensor({static_cast<std::size_t>(h) * w, p});
        for (auto& v : s.image.features.data()) v = binio::read_f64(in);
        out.push_back(std::move(s));
    }
    return out;
}

void save_bank(const std::filesystem::path& path, const ConceptBank& bank) {
    nlohmann::ordered_json j;
    j["concepts"] = nlohmann::ordered_json::array();
    for (const auto& c : bank.concepts) {
        nlohmann::ordered_json e;
        e["id"] = c.id;
        e["word"] = c.word;
        e["signature"] = std::vector<double>(c.signature.data().begin(), c.signature.data().end());
        e["distractors"] = c.distractor_words;
        j["concepts"].push_back(e);
    }
    j["frequencies"] = bank.frequencies;
    binio::write_file_atomic(path, j.dump(2) + "\n");
}

ConceptBank load_bank(const std::filesystem::path& path) {
    ConceptBank bank;
    try {
        const auto j = nlohmann::json::parse(binio::read_file(path));
        for (const auto& e : j.at("concepts")) {
            ConceptSpec c;
            c.id = e.at("id").get<std::uint32_t>();
            c.word = e.at("word").get<std::string>();
            const auto sig = e.at("signature").get<std::vector<double>>();
            c.signature = Tensor({sig.size()}, sig);
            c.distractor_words = e.at("distractors").get<std::vector<std::string>>();
            bank.concepts.push_back(std::move(c));
        }
        bank.frequencies = j.at("frequencies").get<std::vector<double>>();
    } catch (const nlohmann::json::exception& e) {
        throw_format("concept bank " + path.string() + ": " + e.what());
    }
    return bank;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& data, const Vocabulary& vocab) {
    std::filesystem::create_directories(dir);
    vocab.save(dir / "vocab.txt");
    save_bank(dir / "concepts.json", data.bank);
    binio::write_file_atomic(dir / "datagen.json", to_json(data.config).dump(2) + "\n");
    auto write_split = [&](const char* name, const std::vector<PairedSample>& samples) {
        std::ostringstream ss;
        write_corpus(ss, samples, data.config.patch_dim);
        binio::write_file_atomic(dir / (std::string(name) + ".corpus"), ss.str());
    };
    write_split("train", data.train);
    write_split("val", data.val);
    write_split("test", data.test);
    write_split("labeled", data.labeled);
}

Dataset load_dataset(const std::filesystem::path& dir) {
    Dataset data;
    try {
        data.config = datagen_config_from_json(nlohmann::json::parse(binio::read_file(dir / "datagen.json")));
    } catch (const nlohmann::json::exception& e) {
        throw_format("datagen.json: " + std::string(e.what()));
    }
    data.bank = load_bank(dir / "concepts.json");
    auto read_split = [&](const char* name) {
        std::ifstream in(dir / (std::string(name) + ".corpus"), std::ios::binary);
        if (!in) throw_io("cannot open " + (dir / (std::string(name) + ".corpus")).string());
        return read_corpus(in);
    };
    data.train = read_split("train");
    data.val = read_split("val");
    data.test = read_split("test");
    data.labeled = read_split("labeled");
    return data;
}

} // namespace stair
