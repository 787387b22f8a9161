#include "advrank/variations.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "advrank/text.hpp"

namespace advrank {

std::string to_string(VariationFamily f) {
    switch (f) {
        case VariationFamily::kRandomChar: return "random_char";
        case VariationFamily::kNeighbChar: return "neighb_char";
        case VariationFamily::kQwertyChar: return "qwerty_char";
        case VariationFamily::kRmStopwords: return "rm_stopwords";
        case VariationFamily::kRandomOrder: return "random_order";
        case VariationFamily::kLexiconSyn: return "lexicon_syn";
    }
    return "?";
}

VariationFamily variation_family_from_string(const std::string& s) {
    static const std::map<std::string, VariationFamily> kNames{
        {"random_char", VariationFamily::kRandomChar},   {"neighb_char", VariationFamily::kNeighbChar},
        {"qwerty_char", VariationFamily::kQwertyChar},   {"rm_stopwords", VariationFamily::kRmStopwords},
        {"random_order", VariationFamily::kRandomOrder}, {"lexicon_syn", VariationFamily::kLexiconSyn}};
    auto it = kNames.find(s);
    if (it == kNames.end()) {
        throw std::invalid_argument("unknown variation family '" + s +
                                    "' (expected random_char|neighb_char|qwerty_char|rm_stopwords|random_order|lexicon_syn)");
    }
    return it->second;
}

void VariationSpec::validate() const {
    if (family == VariationFamily::kRmStopwords && stopwords.empty()) throw std::invalid_argument("rm_stopwords needs a stopword list");
    if (family == VariationFamily::kLexiconSyn && lexicon.empty()) throw std::invalid_argument("lexicon_syn needs a synonym lexicon");
    if (edits_per_query == 0) throw std::invalid_argument("edits_per_query must be >= 1");
}

std::set<std::string> load_stopwords(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open stopword list " + path.string());
    std::set<std::string> out;
    std::string line;
    while (std::getline(in, line))
        for (const auto& w : split_words(line)) out.insert(lowercase(w));
    return out;
}

SynonymLexicon load_lexicon(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open synonym lexicon " + path.string());
    SynonymLexicon out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos || tab == 0) throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected <word>\\t<syn1>,<syn2>,...");
        std::vector<std::string> syns;
        std::string rest = line.substr(tab + 1);
        std::size_t start = 0;
        while (start <= rest.size()) {
            auto comma = rest.find(',', start);
            if (comma == std::string::npos) comma = rest.size();
            auto words = split_words(rest.substr(start, comma - start));
            if (words.size() == 1) syns.push_back(words.front());
            start = comma + 1;
        }
        if (!syns.empty()) out[lowercase(line.substr(0, tab))] = std::move(syns);
    }
    return out;
}

std::string_view qwerty_neighbors(char c) {
    static const std::array<std::string_view, 26> kAdjacent{
        "qwsz",    // a
        "vghn",    // b
        "xdfv",    // c
        "serfcx",  // d
        "wsdr",    // e
        "drtgvc",  // f
        "ftyhbv",  // g
        "gyujnb",  // h
        "ujko",    // i
        "huikmn",  // j
        "jiolm",   // k
        "kop",     // l
        "njk",     // m
        "bhjm",    // n
        "iklp",    // o
        "ol",      // p
        "wa",      // q
        "edft",    // r
        "awedxz",  // s
        "rfgy",    // t
        "yhji",    // u
        "cfgb",    // v
        "qase",    // w
        "zsdc",    // x
        "tghu",    // y
        "asx",     // z
    };
    const char lower = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (lower < 'a' || lower > 'z') return {};
    return kAdjacent[static_cast<std::size_t>(lower - 'a')];
}

namespace {

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

template <typename Rng>
std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

bool is_letter(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }

// Adjacent pairs (i, i+1) strictly inside the word whose characters differ.
std::vector<std::size_t> interior_swaps(const std::string& w) {
    std::vector<std::size_t> out;
    for (std::size_t i = 1; i + 2 < w.size(); ++i)
        if (w[i] != w[i + 1]) out.push_back(i);
    return out;
}

std::vector<std::size_t> letter_positions(const std::string& w) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < w.size(); ++i)
        if (is_letter(w[i])) out.push_back(i);
    return out;
}

template <typename Rng>
bool char_edit(std::vector<std::string>& words, const VariationSpec& spec, Rng& rng, VariationResult& res) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < words.size(); ++i) {
        const auto& w = words[i];
        if (w.size() < spec.min_word_length) continue;
        const bool ok = spec.family == VariationFamily::kNeighbChar ? !interior_swaps(w).empty() : !letter_positions(w).empty();
        if (ok) eligible.push_back(i);
    }
    if (eligible.empty()) return false;
    const std::size_t wi = eligible[uniform_index(rng, eligible.size())];
    std::string& w = words[wi];
    const std::string before = w;
    switch (spec.family) {
        case VariationFamily::kRandomChar: {
            const auto positions = letter_positions(w);
            const std::size_t p = positions[uniform_index(rng, positions.size())];
            const char orig = static_cast<char>(std::tolower(static_cast<unsigned char>(w[p])));
            std::string pool;
            for (char c = 'a'; c <= 'z'; ++c)
                if (c != orig) pool += c;
            w[p] = pool[uniform_index(rng, pool.size())];
            break;
        }
        case VariationFamily::kNeighbChar: {
            const auto swaps = interior_swaps(w);
            const std::size_t p = swaps[uniform_index(rng, swaps.size())];
            std::swap(w[p], w[p + 1]);
            break;
        }
        case VariationFamily::kQwertyChar: {
            const auto positions = letter_positions(w);
            const std::size_t p = positions[uniform_index(rng, positions.size())];
            const auto neighbors = qwerty_neighbors(w[p]);
            w[p] = neighbors[uniform_index(rng, neighbors.size())];
            break;
        }
        default:
            return false;
    }
    res.edits.push_back(before + "->" + w);
    return true;
}

}  // namespace

VariationResult vary(std::string_view query, const VariationSpec& spec, std::uint64_t stream) {
    auto words = split_words(query);
    if (words.empty()) throw std::invalid_argument("cannot vary an empty query");
    spec.validate();
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    std::mt19937_64 rng(seq);
    VariationResult res;
    const std::string original = join(words);

    switch (spec.family) {
        case VariationFamily::kRandomChar:
        case VariationFamily::kNeighbChar:
        case VariationFamily::kQwertyChar:
            for (std::size_t e = 0; e < spec.edits_per_query; ++e) {
                if (!char_edit(words, spec, rng, res)) {
                    res.flags.push_back("no_eligible_word");
                    break;
                }
            }
            break;
        case VariationFamily::kRmStopwords: {
            std::vector<std::string> kept;
            for (const auto& w : words)
                if (!spec.stopwords.contains(lowercase(w))) kept.push_back(w);
            if (kept.empty()) {
                res.flags.push_back("all_stopwords");
            } else if (kept.size() == words.size()) {
                res.flags.push_back("no_stopword");
            } else {
                res.edits.push_back("removed " + std::to_string(words.size() - kept.size()));
                words = std::move(kept);
            }
            break;
        }
        case VariationFamily::kRandomOrder: {
            if (std::set<std::string>(words.begin(), words.end()).size() < 2) {
                res.flags.push_back("single_distinct_word");
                break;
            }
            auto shuffled = words;
            do {
                std::shuffle(shuffled.begin(), shuffled.end(), rng);
            } while (shuffled == words);
            words = std::move(shuffled);
            res.edits.push_back("reordered");
            break;
        }
        case VariationFamily::kLexiconSyn:
            for (std::size_t e = 0; e < spec.edits_per_query; ++e) {
                std::vector<std::size_t> eligible;
                for (std::size_t i = 0; i < words.size(); ++i)
                    if (spec.lexicon.contains(lowercase(words[i]))) eligible.push_back(i);
                if (eligible.empty()) {
                    res.flags.push_back("no_lexicon_entry");
                    break;
                }
                const std::size_t wi = eligible[uniform_index(rng, eligible.size())];
                const auto& syns = spec.lexicon.at(lowercase(words[wi]));
                const std::string before = words[wi];
                words[wi] = syns[uniform_index(rng, syns.size())];
                res.edits.push_back(before + "->" + words[wi]);
            }
            break;
    }
    res.text = join(words);
    if (res.text == original && res.flags.empty()) res.flags.push_back("unchanged");
    return res;
}

VariedFile vary_file(const std::filesystem::path& queries, const VariationSpec& spec, const std::filesystem::path& output,
                     const std::filesystem::path& manifest) {
    spec.validate();
    const auto rows = read_id_text_tsv(queries);
    std::map<std::int64_t, std::string> varied;
    std::vector<nlohmann::json> records;
    VariedFile stats;
    for (const auto& [id, text] : rows) {
        if (split_words(text).empty()) throw std::invalid_argument(queries.string() + ": query " + std::to_string(id) + " is empty");
        VariationResult r = vary(text, spec, static_cast<std::uint64_t>(id));
        std::string edit;
        for (std::size_t i = 0; i < r.edits.size(); ++i) edit += (i ? "; " : "") + r.edits[i];
        records.push_back({{"id", id}, {"family", to_string(spec.family)}, {"edit", edit}, {"flags", r.flags}});
        if (!r.flags.empty()) ++stats.flagged;
        varied[id] = std::move(r.text);
        ++stats.queries;
    }
    write_id_text_tsv(output, varied);
    if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
    std::ofstream out(manifest, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + manifest.string());
    for (const auto& rec : records) out << rec.dump() << '\n';
    return stats;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
    std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j)
            cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

std::size_t damerau_levenshtein(std::string_view a, std::string_view b) {
    const std::size_t n = a.size(), m = b.size();
    std::vector<std::vector<std::size_t>> d(n + 1, std::vector<std::size_t>(m + 1));
    for (std::size_t i = 0; i <= n; ++i) d[i][0] = i;
    for (std::size_t j = 0; j <= m; ++j) d[0][j] = j;
    for (std::size_t i = 1; i <= n; ++i)
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t cost = a[i - 1] == b[j - 1] ? 0 : 1;
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + cost});
            if (i > 1 && j > 1 && a[i - 1] == b[j - 2] && a[i - 2] == b[j - 1]) d[i][j] = std::min(d[i][j], d[i - 2][j - 2] + 1);
        }
    return d[n][m];
}

}  // namespace advrank
