#include "advrank/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <charconv>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace advrank {

namespace {

std::ifstream open_in(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    return out;
}

[[noreturn]] void malformed(const std::filesystem::path& path, std::size_t line_no, const std::string& why) {
    throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + why);
}

bool parse_int(std::string_view s, std::int64_t& out) {
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

std::string_view trim_cr(std::string_view s) {
    if (!s.empty() && s.back() == '\r') s.remove_suffix(1);
    return s;
}

}  // namespace

// ---- Vocabulary ------------------------------------------------------------

Vocabulary::Vocabulary() {
    add("<pad>");
    add("<unk>");
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < kSpecialCount || tokens[0] != "<pad>" || tokens[1] != "<unk>") {
        throw std::invalid_argument("vocabulary must start with <pad> and <unk>");
    }
    Vocabulary v;
    for (std::size_t i = kSpecialCount; i < tokens.size(); ++i) {
        if (v.contains(tokens[i])) throw std::invalid_argument("duplicate vocabulary token '" + tokens[i] + "'");
        v.add(tokens[i]);
    }
    return v;
}

TokenId Vocabulary::add(const std::string& token) {
    auto it = index_.find(token);
    if (it != index_.end()) return it->second;
    const auto id = static_cast<TokenId>(tokens_.size());
    tokens_.push_back(token);
    index_.emplace(token, id);
    return id;
}

TokenId Vocabulary::lookup(std::string_view token) const {
    auto it = index_.find(std::string(token));
    return it == index_.end() ? kUnk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return index_.contains(std::string(token)); }

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) throw std::out_of_range("token id " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

TokenSeq Vocabulary::encode(std::string_view text) const {
    TokenSeq out;
    for (const auto& w : split_words(lowercase(text))) out.push_back(lookup(w));
    return out;
}

TokenSeq Vocabulary::encode_growing(std::string_view text) {
    TokenSeq out;
    for (const auto& w : split_words(lowercase(text))) out.push_back(add(w));
    return out;
}

std::string Vocabulary::decode(const TokenSeq& ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (i) out += ' ';
        out += token(ids[i]);
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path& path) const {
    auto out = open_out(path);
    for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) tokens.emplace_back(trim_cr(line));
    return from_tokens(std::move(tokens));
}

std::vector<std::string> split_words(std::string_view text) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < text.size()) {
        while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        const std::size_t start = i;
        while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
        if (i > start) out.emplace_back(text.substr(start, i - start));
    }
    return out;
}

std::string lowercase(std::string_view text) {
    std::string out(text);
    for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// ---- Corpus ----------------------------------------------------------------

std::vector<DocId> Corpus::positives(QueryId q) const {
    std::vector<DocId> out;
    auto it = qrels.find(q);
    if (it == qrels.end()) return out;
    for (const auto& [doc, grade] : it->second)
        if (grade >= 1) out.push_back(doc);
    return out;
}

bool Corpus::is_positive(QueryId q, DocId d) const {
    auto it = qrels.find(q);
    if (it == qrels.end()) return false;
    auto jt = it->second.find(d);
    return jt != it->second.end() && jt->second >= 1;
}

// ---- file formats ----------------------------------------------------------

std::map<std::int64_t, std::string> read_id_text_tsv(const std::filesystem::path& path) {
    auto in = open_in(path);
    std::map<std::int64_t, std::string> rows;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim_cr(raw);
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string_view::npos) malformed(path, line_no, "expected <id>\\t<text>");
        std::int64_t id = 0;
        if (!parse_int(line.substr(0, tab), id)) malformed(path, line_no, "non-integer id '" + std::string(line.substr(0, tab)) + "'");
        if (!rows.emplace(id, std::string(line.substr(tab + 1))).second) malformed(path, line_no, "duplicate id " + std::to_string(id));
    }
    return rows;
}

void write_id_text_tsv(const std::filesystem::path& path, const std::map<std::int64_t, std::string>& rows) {
    auto out = open_out(path);
    for (const auto& [id, text] : rows) out << id << '\t' << text << '\n';
}

Qrels read_qrels(const std::filesystem::path& path) {
    auto in = open_in(path);
    Qrels qrels;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        const auto fields = split_words(raw);
        if (fields.empty()) continue;
        std::int64_t q = 0, d = 0, g = 0;
        if (fields.size() != 4 || !parse_int(fields[0], q) || !parse_int(fields[2], d) || !parse_int(fields[3], g) || g < 0) {
            malformed(path, line_no, "expected '<qid> 0 <docid> <grade>'");
        }
        qrels[q][d] = static_cast<int>(g);
    }
    return qrels;
}

void write_qrels(const std::filesystem::path& path, const Qrels& qrels) {
    auto out = open_out(path);
    for (const auto& [q, docs] : qrels)
        for (const auto& [d, g] : docs) out << q << " 0 " << d << ' ' << g << '\n';
}

HardNegatives read_hard_negatives(const std::filesystem::path& path) {
    auto in = open_in(path);
    HardNegatives negatives;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim_cr(raw);
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        std::int64_t q = 0;
        if (tab == std::string_view::npos || !parse_int(line.substr(0, tab), q)) malformed(path, line_no, "expected <qid>\\t<docid>,...");
        auto& list = negatives[q];
        std::string_view rest = line.substr(tab + 1);
        while (!rest.empty()) {
            const auto comma = rest.find(',');
            std::int64_t d = 0;
            if (!parse_int(rest.substr(0, comma), d)) malformed(path, line_no, "bad document id in candidate list");
            list.push_back(d);
            if (comma == std::string_view::npos) break;
            rest.remove_prefix(comma + 1);
        }
    }
    return negatives;
}

void write_hard_negatives(const std::filesystem::path& path, const HardNegatives& negatives) {
    auto out = open_out(path);
    for (const auto& [q, docs] : negatives) {
        out << q << '\t';
        for (std::size_t i = 0; i < docs.size(); ++i) out << (i ? "," : "") << docs[i];
        out << '\n';
    }
}

TeacherMargins read_teacher_margins(const std::filesystem::path& path) {
    auto in = open_in(path);
    TeacherMargins margins;
    std::string raw;
    std::size_t line_no = 0;
    while (std::getline(in, raw)) {
        ++line_no;
        std::string_view line = trim_cr(raw);
        if (line.empty()) continue;
        std::vector<std::string_view> f;
        std::size_t start = 0;
        for (;;) {
            const auto tab = line.find('\t', start);
            f.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
            if (tab == std::string_view::npos) break;
            start = tab + 1;
        }
        TripletKey key{};
        if (f.size() != 4 || !parse_int(f[0], key.query) || !parse_int(f[1], key.positive) || !parse_int(f[2], key.negative)) {
            malformed(path, line_no, "expected <qid>\\t<posid>\\t<negid>\\t<margin>");
        }
        double m = 0.0;
        auto [ptr, ec] = std::from_chars(f[3].data(), f[3].data() + f[3].size(), m);
        if (ec != std::errc() || ptr != f[3].data() + f[3].size() || !std::isfinite(m)) malformed(path, line_no, "bad margin");
        margins[key] = m;
    }
    return margins;
}

void write_teacher_margins(const std::filesystem::path& path, const TeacherMargins& margins) {
    auto out = open_out(path);
    char buf[64];
    for (const auto& [key, m] : margins) {
        auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), m);
        out << key.query << '\t' << key.positive << '\t' << key.negative << '\t' << std::string_view(buf, static_cast<std::size_t>(ptr - buf)) << '\n';
    }
}

Corpus load_corpus(const std::filesystem::path& collection, const std::filesystem::path& queries,
                   const std::filesystem::path& qrels, Vocabulary& vocab, VocabMode mode) {
    Corpus corpus;
    auto encode = [&](const std::string& text) { return mode == VocabMode::kGrow ? vocab.encode_growing(text) : vocab.encode(text); };
    for (const auto& [id, text] : read_id_text_tsv(collection)) corpus.documents.emplace(id, encode(text));
    for (const auto& [id, text] : read_id_text_tsv(queries)) corpus.queries.emplace(id, encode(text));
    corpus.qrels = read_qrels(qrels);
    for (const auto& [q, docs] : corpus.qrels)
        for (const auto& [d, g] : docs)
            if (!corpus.documents.contains(d)) {
                throw std::runtime_error(qrels.string() + ": query " + std::to_string(q) + " judges unknown document " + std::to_string(d));
            }
    return corpus;
}

std::map<QueryId, TokenSeq> load_queries(const std::filesystem::path& queries, const Vocabulary& vocab) {
    std::map<QueryId, TokenSeq> out;
    for (const auto& [id, text] : read_id_text_tsv(queries)) out.emplace(id, vocab.encode(text));
    return out;
}

void write_corpus(const Corpus& corpus, const Vocabulary& vocab, const std::filesystem::path& collection,
                  const std::filesystem::path& queries, const std::filesystem::path& qrels) {
    std::map<std::int64_t, std::string> rows;
    for (const auto& [id, seq] : corpus.documents) rows[id] = vocab.decode(seq);
    write_id_text_tsv(collection, rows);
    rows.clear();
    for (const auto& [id, seq] : corpus.queries) rows[id] = vocab.decode(seq);
    write_id_text_tsv(queries, rows);
    write_qrels(qrels, corpus.qrels);
}

// ---- synthetic corpora -----------------------------------------------------

void SynthSpec::validate() const {
    if (vocab_size <= Vocabulary::kSpecialCount || topics == 0 || docs_per_topic == 0 || salient_tokens == 0 ||
        background_tokens == 0 || doc_len_min == 0 || query_len_min == 0) {
        throw std::invalid_argument("synthetic spec: vocab size, topics, docs per topic, salient/background token counts and lengths must be positive");
    }
    if (doc_len_max < doc_len_min || query_len_max < query_len_min) throw std::invalid_argument("synthetic spec: length range max < min");
    if (!(noise_rate >= 0.0 && noise_rate <= 1.0)) throw std::invalid_argument("synthetic spec: noise rate outside [0, 1]");
    const std::size_t available = vocab_size - Vocabulary::kSpecialCount;
    if (background_tokens > available || (first_topic + topics) * salient_tokens > available - background_tokens) {
        throw std::invalid_argument("synthetic spec: " + std::to_string(first_topic + topics) + " topics x " +
                                    std::to_string(salient_tokens) + " salient tokens exceed the " +
                                    std::to_string(available - std::min(available, background_tokens)) +
                                    " ids left after the background pool");
    }
    if (train_queries + dev_queries + test_queries == 0) throw std::invalid_argument("synthetic spec: no queries requested");
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
    j = nlohmann::json{{"vocab_size", s.vocab_size},       {"topics", s.topics},
                       {"first_topic", s.first_topic},     {"docs_per_topic", s.docs_per_topic},
                       {"doc_len_min", s.doc_len_min},     {"doc_len_max", s.doc_len_max},
                       {"query_len_min", s.query_len_min}, {"query_len_max", s.query_len_max},
                       {"salient_tokens", s.salient_tokens}, {"background_tokens", s.background_tokens},
                       {"noise_rate", s.noise_rate},       {"train_queries", s.train_queries},
                       {"dev_queries", s.dev_queries},     {"test_queries", s.test_queries},
                       {"topic_zero_grades", s.topic_zero_grades}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
    SynthSpec d;
    s.vocab_size = j.value("vocab_size", d.vocab_size);
    s.topics = j.value("topics", d.topics);
    s.first_topic = j.value("first_topic", d.first_topic);
    s.docs_per_topic = j.value("docs_per_topic", d.docs_per_topic);
    s.doc_len_min = j.value("doc_len_min", d.doc_len_min);
    s.doc_len_max = j.value("doc_len_max", d.doc_len_max);
    s.query_len_min = j.value("query_len_min", d.query_len_min);
    s.query_len_max = j.value("query_len_max", d.query_len_max);
    s.salient_tokens = j.value("salient_tokens", d.salient_tokens);
    s.background_tokens = j.value("background_tokens", d.background_tokens);
    s.noise_rate = j.value("noise_rate", d.noise_rate);
    s.train_queries = j.value("train_queries", d.train_queries);
    s.dev_queries = j.value("dev_queries", d.dev_queries);
    s.test_queries = j.value("test_queries", d.test_queries);
    s.topic_zero_grades = j.value("topic_zero_grades", d.topic_zero_grades);
    s.seed = j.value("seed", d.seed);
}

Vocabulary synthetic_vocabulary(std::size_t vocab_size) {
    // Pronounceable-ish lowercase words, 4 to 8 letters, so character-level
    // query variations have material to work on.
    static constexpr std::string_view kConsonants = "bcdfghjklmnprstvwz";
    static constexpr std::string_view kVowels = "aeiou";
    std::mt19937_64 rng(0x9e3779b97f4a7c15ULL ^ vocab_size);
    Vocabulary vocab;
    while (vocab.size() < vocab_size) {
        const std::size_t len = 4 + rng() % 5;
        std::string w;
        for (std::size_t i = 0; i < len; ++i) {
            const auto& pool = (i % 2 == 0) ? kConsonants : kVowels;
            w += pool[rng() % pool.size()];
        }
        if (!vocab.contains(w)) vocab.add(w);
    }
    return vocab;
}

SyntheticCorpus generate_synthetic(const SynthSpec& spec) {
    spec.validate();
    SyntheticCorpus out;
    out.vocab = synthetic_vocabulary(spec.vocab_size);
    std::mt19937_64 rng(spec.seed);

    const auto background_base = static_cast<TokenId>(Vocabulary::kSpecialCount);
    const auto salient_base = static_cast<TokenId>(Vocabulary::kSpecialCount + spec.background_tokens);
    auto salient_token = [&](std::size_t topic, std::size_t k) {
        return static_cast<TokenId>(salient_base + static_cast<TokenId>((spec.first_topic + topic) * spec.salient_tokens + k));
    };
    std::uniform_int_distribution<std::size_t> pick_background(0, spec.background_tokens - 1);
    std::uniform_int_distribution<std::size_t> pick_salient(0, spec.salient_tokens - 1);
    std::uniform_int_distribution<std::size_t> doc_len(spec.doc_len_min, spec.doc_len_max);
    std::bernoulli_distribution noisy(spec.noise_rate);

    DocId next_doc = 0;
    std::map<DocId, std::vector<TokenId>> doc_salient;
    for (std::size_t t = 0; t < spec.topics; ++t) {
        for (std::size_t i = 0; i < spec.docs_per_topic; ++i) {
            const DocId id = next_doc++;
            TokenSeq seq;
            std::set<TokenId> salient;
            const std::size_t len = doc_len(rng);
            for (std::size_t p = 0; p < len; ++p) {
                if (noisy(rng)) {
                    seq.push_back(static_cast<TokenId>(background_base + static_cast<TokenId>(pick_background(rng))));
                } else {
                    const TokenId tok = salient_token(t, pick_salient(rng));
                    seq.push_back(tok);
                    salient.insert(tok);
                }
            }
            // A fully noisy document still needs one salient token to be queryable.
            if (salient.empty()) {
                const TokenId tok = salient_token(t, pick_salient(rng));
                seq.back() = tok;
                salient.insert(tok);
            }
            out.corpus.documents.emplace(id, std::move(seq));
            doc_salient.emplace(id, std::vector<TokenId>(salient.begin(), salient.end()));
            out.doc_topic.emplace(id, t);
        }
    }

    std::uniform_int_distribution<DocId> pick_doc(0, next_doc - 1);
    std::uniform_int_distribution<std::size_t> query_len(spec.query_len_min, spec.query_len_max);
    QueryId next_query = 0;
    auto make_queries = [&](std::size_t count, std::vector<QueryId>& ids) {
        for (std::size_t i = 0; i < count; ++i) {
            const QueryId qid = next_query++;
            const DocId doc = pick_doc(rng);
            std::vector<TokenId> pool = doc_salient.at(doc);
            std::shuffle(pool.begin(), pool.end(), rng);
            pool.resize(std::min(pool.size(), query_len(rng)));
            for (auto& tok : pool)
                if (noisy(rng)) tok = static_cast<TokenId>(background_base + static_cast<TokenId>(pick_background(rng)));
            out.corpus.queries.emplace(qid, std::move(pool));
            auto& judged = out.corpus.qrels[qid];
            if (spec.topic_zero_grades) {
                const auto topic = out.doc_topic.at(doc);
                for (const auto& [d, t] : out.doc_topic)
                    if (t == topic) judged[d] = 0;
            }
            judged[doc] = 1;
            ids.push_back(qid);
        }
    };
    make_queries(spec.train_queries, out.train_queries);
    make_queries(spec.dev_queries, out.dev_queries);
    make_queries(spec.test_queries, out.test_queries);
    return out;
}

double lexical_overlap(const TokenSeq& query, const TokenSeq& doc) {
    std::set<TokenId> distinct(query.begin(), query.end());
    distinct.erase(Vocabulary::kPad);
    distinct.erase(Vocabulary::kUnk);
    double score = 0.0;
    for (TokenId t : doc)
        if (distinct.contains(t)) score += 1.0;
    return score;
}

HardNegatives mine_lexical_negatives(const Corpus& corpus, const std::vector<QueryId>& queries, std::size_t depth) {
    HardNegatives out;
    for (QueryId q : queries) {
        const auto& qseq = corpus.queries.at(q);
        std::vector<std::pair<double, DocId>> scored;
        for (const auto& [d, seq] : corpus.documents) {
            if (corpus.is_positive(q, d)) continue;
            const double s = lexical_overlap(qseq, seq);
            if (s > 0.0) scored.emplace_back(s, d);
        }
        std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        auto& list = out[q];
        for (std::size_t i = 0; i < std::min(depth, scored.size()); ++i) list.push_back(scored[i].second);
    }
    return out;
}

void write_synthetic(const SyntheticCorpus& synth, const std::filesystem::path& dir, std::size_t hard_negative_depth) {
    std::filesystem::create_directories(dir);
    synth.vocab.save(dir / "vocab.txt");
    std::map<std::int64_t, std::string> rows;
    for (const auto& [id, seq] : synth.corpus.documents) rows[id] = synth.vocab.decode(seq);
    write_id_text_tsv(dir / "collection.tsv", rows);
    auto write_split = [&](const std::string& name, const std::vector<QueryId>& ids) {
        std::map<std::int64_t, std::string> qrows;
        Qrels qrels;
        for (QueryId q : ids) {
            qrows[q] = synth.vocab.decode(synth.corpus.queries.at(q));
            qrels[q] = synth.corpus.qrels.at(q);
        }
        write_id_text_tsv(dir / ("queries." + name + ".tsv"), qrows);
        write_qrels(dir / ("qrels." + name + ".txt"), qrels);
    };
    write_split("train", synth.train_queries);
    write_split("dev", synth.dev_queries);
    write_split("test", synth.test_queries);
    if (hard_negative_depth > 0) {
        write_hard_negatives(dir / "hard_negatives.train.tsv", mine_lexical_negatives(synth.corpus, synth.train_queries, hard_negative_depth));
    }
}

// ---- batching --------------------------------------------------------------

PaddedSequences PaddedSequences::from(const std::vector<TokenSeq>& seqs) {
    PaddedSequences p;
    p.count = seqs.size();
    p.max_len = 1;
    for (const auto& s : seqs) p.max_len = std::max(p.max_len, s.size());
    p.ids.assign(p.count * p.max_len, Vocabulary::kPad);
    for (std::size_t i = 0; i < seqs.size(); ++i) std::copy(seqs[i].begin(), seqs[i].end(), p.ids.begin() + static_cast<std::ptrdiff_t>(i * p.max_len));
    return p;
}

std::vector<double> PaddedSequences::mask() const {
    std::vector<double> m(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) m[i] = ids[i] == Vocabulary::kPad ? 0.0 : 1.0;
    return m;
}

BatchSampler::BatchSampler(const Corpus& corpus, std::vector<QueryId> train_queries, SamplerConfig config,
                           const HardNegatives* hard, const TeacherMargins* teacher)
    : corpus_(corpus), config_(config), hard_(hard), teacher_(teacher), rng_(config.seed) {
    if (config_.batch_size == 0 || config_.negatives_per_query == 0) throw std::invalid_argument("batch size and negatives per query must be positive");
    for (const auto& [d, seq] : corpus_.documents) doc_ids_.push_back(d);
    if (teacher_) {
        for (const auto& [key, m] : *teacher_) teacher_candidates_[{key.query, key.positive}].push_back(key.negative);
    }
    for (QueryId q : train_queries) {
        auto pos = corpus_.positives(q);
        if (teacher_) {
            std::erase_if(pos, [&](DocId d) { return !teacher_candidates_.contains({q, d}); });
        }
        if (pos.empty() || !corpus_.queries.contains(q)) {
            ++skipped_queries_;
            continue;
        }
        eligible_.push_back({q, std::move(pos)});
    }
    if (doc_ids_.size() < 2) throw std::invalid_argument("batch sampling needs at least two documents");
}

std::optional<std::vector<DocId>> BatchSampler::draw_negatives(QueryId q, DocId positive) {
    const std::size_t k = config_.negatives_per_query;
    std::vector<DocId> out;
    std::vector<DocId> candidates;
    if (teacher_) {
        candidates = teacher_candidates_.at({q, positive});
    } else if (hard_) {
        if (auto it = hard_->find(q); it != hard_->end()) candidates = it->second;
    }
    std::erase_if(candidates, [&](DocId d) { return corpus_.is_positive(q, d) || !corpus_.documents.contains(d); });
    if (teacher_ && candidates.empty()) return std::nullopt;
    if (!candidates.empty()) {
        if (candidates.size() >= k) {
            std::vector<std::size_t> idx(candidates.size());
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            for (std::size_t i = 0; i < k; ++i) {
                std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
                std::swap(idx[i], idx[pick(rng_)]);
                out.push_back(candidates[idx[i]]);
            }
            return out;
        }
        if (teacher_) {
            std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
            while (out.size() < k) out.push_back(candidates[pick(rng_)]);
            return out;
        }
        out = candidates;
    }
    std::uniform_int_distribution<std::size_t> pick(0, doc_ids_.size() - 1);
    std::size_t guard = 0;
    while (out.size() < k) {
        const DocId d = doc_ids_[pick(rng_)];
        if (corpus_.is_positive(q, d)) {
            if (++guard > 1000 * k) throw std::runtime_error("query " + std::to_string(q) + " has no non-relevant documents to sample");
            continue;
        }
        out.push_back(d);
    }
    return out;
}

TripletBatch BatchSampler::assemble(const std::vector<std::tuple<QueryId, DocId, std::vector<DocId>>>& rows) const {
    TripletBatch b;
    b.negatives_per_query = config_.negatives_per_query;
    std::vector<TokenSeq> qs, ps, ns;
    std::vector<double> margins;
    for (const auto& [q, p, negs] : rows) {
        b.query_ids.push_back(q);
        b.positive_ids.push_back(p);
        qs.push_back(corpus_.queries.at(q));
        ps.push_back(corpus_.documents.at(p));
        for (DocId n : negs) {
            b.negative_ids.push_back(n);
            ns.push_back(corpus_.documents.at(n));
            if (teacher_) margins.push_back(teacher_->at({q, p, n}));
        }
    }
    b.queries = PaddedSequences::from(qs);
    b.positives = PaddedSequences::from(ps);
    b.negatives = PaddedSequences::from(ns);
    if (teacher_) b.teacher_margins = std::move(margins);
    return b;
}

std::vector<TripletBatch> BatchSampler::next_epoch() {
    std::vector<std::size_t> order(eligible_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng_);
    std::vector<TripletBatch> batches;
    std::vector<std::tuple<QueryId, DocId, std::vector<DocId>>> rows;
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& e = eligible_[order[i]];
        std::uniform_int_distribution<std::size_t> pick(0, e.positives.size() - 1);
        const DocId pos = e.positives[pick(rng_)];
        auto negs = draw_negatives(e.query, pos);
        if (!negs) {
            ++skipped_triplets_;
        } else {
            rows.emplace_back(e.query, pos, std::move(*negs));
        }
        if (rows.size() == config_.batch_size) {
            batches.push_back(assemble(rows));
            rows.clear();
        }
    }
    if (!rows.empty()) batches.push_back(assemble(rows));
    return batches;
}

std::string BatchSampler::rng_state() const {
    std::ostringstream os;
    os << rng_;
    return os.str();
}

void BatchSampler::set_rng_state(const std::string& state) {
    std::istringstream is(state);
    is >> rng_;
    if (!is) throw std::invalid_argument("invalid sampler RNG state");
}

}  // namespace advrank
