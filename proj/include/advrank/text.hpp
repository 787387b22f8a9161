#pragma once

// Vocabulary, TSV corpus ingestion, synthetic topic corpora and triplet
// batch sampling.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace advrank {

using TokenId = std::int32_t;
using TokenSeq = std::vector<TokenId>;
using DocId = std::int64_t;
using QueryId = std::int64_t;

/// Closed whitespace vocabulary. Id 0 is padding, id 1 the unknown token.
class Vocabulary {
public:
    static constexpr TokenId kPad = 0;
    static constexpr TokenId kUnk = 1;
    static constexpr std::size_t kSpecialCount = 2;

    Vocabulary();
    /// `tokens` must start with the two special tokens.
    static Vocabulary from_tokens(std::vector<std::string> tokens);

    TokenId add(const std::string& token);
    TokenId lookup(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::string& token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    /// Lowercases and splits on whitespace; out-of-vocabulary words map to kUnk.
    TokenSeq encode(std::string_view text) const;
    /// Same, but grows the vocabulary with unseen words.
    TokenSeq encode_growing(std::string_view text);
    std::string decode(const TokenSeq& ids) const;

    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

std::vector<std::string> split_words(std::string_view text);
std::string lowercase(std::string_view text);

/// qrels[query][doc] = grade
using Qrels = std::map<QueryId, std::map<DocId, int>>;
using HardNegatives = std::map<QueryId, std::vector<DocId>>;

struct TripletKey {
    QueryId query;
    DocId positive;
    DocId negative;
    auto operator<=>(const TripletKey&) const = default;
};
using TeacherMargins = std::map<TripletKey, double>;

struct Corpus {
    std::map<DocId, TokenSeq> documents;
    std::map<QueryId, TokenSeq> queries;
    Qrels qrels;

    /// Relevant (grade >= 1) documents of a query; empty when unjudged.
    std::vector<DocId> positives(QueryId q) const;
    bool is_positive(QueryId q, DocId d) const;
};

enum class VocabMode { kGrow, kFrozen };

std::map<std::int64_t, std::string> read_id_text_tsv(const std::filesystem::path& path);
void write_id_text_tsv(const std::filesystem::path& path, const std::map<std::int64_t, std::string>& rows);
Qrels read_qrels(const std::filesystem::path& path);
void write_qrels(const std::filesystem::path& path, const Qrels& qrels);
HardNegatives read_hard_negatives(const std::filesystem::path& path);
void write_hard_negatives(const std::filesystem::path& path, const HardNegatives& negatives);
TeacherMargins read_teacher_margins(const std::filesystem::path& path);
void write_teacher_margins(const std::filesystem::path& path, const TeacherMargins& margins);

/// Loads MS MARCO-style TSV files. With VocabMode::kGrow unseen words extend
/// `vocab`; with kFrozen they become kUnk. Throws on malformed lines (with
/// the line number) and on qrels naming unknown documents.
Corpus load_corpus(const std::filesystem::path& collection, const std::filesystem::path& queries,
                   const std::filesystem::path& qrels, Vocabulary& vocab, VocabMode mode);
std::map<QueryId, TokenSeq> load_queries(const std::filesystem::path& queries, const Vocabulary& vocab);
void write_corpus(const Corpus& corpus, const Vocabulary& vocab, const std::filesystem::path& collection,
                  const std::filesystem::path& queries, const std::filesystem::path& qrels);

// ---- synthetic corpora -----------------------------------------------------

struct SynthSpec {
    std::size_t vocab_size = 1000;
    std::size_t topics = 20;
    /// Index of the first topic; corpora with disjoint topic ranges share the
    /// vocabulary but not their salient tokens.
    std::size_t first_topic = 0;
    std::size_t docs_per_topic = 50;
    std::size_t doc_len_min = 6;
    std::size_t doc_len_max = 10;
    std::size_t query_len_min = 3;
    std::size_t query_len_max = 5;
    std::size_t salient_tokens = 40;
    std::size_t background_tokens = 100;
    double noise_rate = 0.1;
    std::size_t train_queries = 500;
    std::size_t dev_queries = 100;
    std::size_t test_queries = 100;
    /// Judge same-topic documents with grade 0 (unjudged for metrics).
    bool topic_zero_grades = false;
    std::uint64_t seed = 7;

    void validate() const;
};

void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);

struct SyntheticCorpus {
    Vocabulary vocab;
    Corpus corpus;
    std::vector<QueryId> train_queries;
    std::vector<QueryId> dev_queries;
    std::vector<QueryId> test_queries;
    std::map<DocId, std::size_t> doc_topic;
};

/// Word list shared by every synthetic corpus of the same vocabulary size.
Vocabulary synthetic_vocabulary(std::size_t vocab_size);
SyntheticCorpus generate_synthetic(const SynthSpec& spec);

/// Token-overlap score: sum over distinct query tokens of their term
/// frequency in the document.
double lexical_overlap(const TokenSeq& query, const TokenSeq& doc);
/// Top-`depth` documents by lexical overlap (ties by ascending id), excluding
/// qrels positives.
HardNegatives mine_lexical_negatives(const Corpus& corpus, const std::vector<QueryId>& queries, std::size_t depth);

/// Writes collection.tsv, queries.{train,dev,test}.tsv, qrels.{...}.txt and
/// vocab.txt (plus hard_negatives.train.tsv when depth > 0).
void write_synthetic(const SyntheticCorpus& synth, const std::filesystem::path& dir, std::size_t hard_negative_depth);

// ---- batching --------------------------------------------------------------

/// `count` sequences right-padded to a common length (at least 1).
struct PaddedSequences {
    std::size_t count = 0;
    std::size_t max_len = 0;
    std::vector<TokenId> ids;

    static PaddedSequences from(const std::vector<TokenSeq>& seqs);
    std::vector<double> mask() const;
    TokenId at(std::size_t seq, std::size_t pos) const { return ids[seq * max_len + pos]; }
};

struct TripletBatch {
    std::vector<QueryId> query_ids;
    std::vector<DocId> positive_ids;
    /// Row-major [B x K].
    std::vector<DocId> negative_ids;
    std::size_t negatives_per_query = 0;
    PaddedSequences queries;
    PaddedSequences positives;
    PaddedSequences negatives;
    /// Row-major [B x K]; present only in distillation mode.
    std::optional<std::vector<double>> teacher_margins;

    std::size_t size() const { return query_ids.size(); }
};

struct SamplerConfig {
    std::size_t batch_size = 16;
    std::size_t negatives_per_query = 4;
    std::uint64_t seed = 0;
};

/// Deterministic epoch-wise triplet stream. Negatives come from `hard` when
/// given (relevant candidates filtered out, topped up uniformly when short),
/// from the teacher's scored triplets in distillation mode, else uniformly
/// from non-relevant documents.
class BatchSampler {
public:
    BatchSampler(const Corpus& corpus, std::vector<QueryId> train_queries, SamplerConfig config,
                 const HardNegatives* hard = nullptr, const TeacherMargins* teacher = nullptr);

    std::vector<TripletBatch> next_epoch();

    std::size_t skipped_queries() const { return skipped_queries_; }
    std::size_t skipped_triplets() const { return skipped_triplets_; }
    std::size_t epoch_size() const { return eligible_.size(); }

    std::string rng_state() const;
    void set_rng_state(const std::string& state);

private:
    struct Eligible {
        QueryId query;
        std::vector<DocId> positives;
    };

    std::optional<std::vector<DocId>> draw_negatives(QueryId q, DocId positive);
    TripletBatch assemble(const std::vector<std::tuple<QueryId, DocId, std::vector<DocId>>>& rows) const;

    const Corpus& corpus_;
    SamplerConfig config_;
    const HardNegatives* hard_;
    const TeacherMargins* teacher_;
    std::vector<Eligible> eligible_;
    std::vector<DocId> doc_ids_;
    std::map<std::pair<QueryId, DocId>, std::vector<DocId>> teacher_candidates_;
    std::mt19937_64 rng_;
    std::size_t skipped_queries_ = 0;
    std::size_t skipped_triplets_ = 0;
};

}  // namespace advrank
