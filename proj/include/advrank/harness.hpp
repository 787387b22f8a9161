#pragma once

// Run configuration, checkpoints and the end-to-end protocols behind the
// command-line tool: base training, AT resume, distillation with an oracle
// teacher, finetuning, evaluation and report comparison.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "advrank/adversarial.hpp"
#include "advrank/encoder.hpp"
#include "advrank/losses.hpp"
#include "advrank/metrics.hpp"
#include "advrank/tensor.hpp"
#include "advrank/text.hpp"
#include "advrank/variations.hpp"

namespace advrank {

// ---- configuration ---------------------------------------------------------

/// Input files. Empty entries fall back to the standard file names inside
/// `data_dir` (the layout written by gen-corpus) when that file exists.
struct PathsConfig {
    std::string data_dir;
    std::string vocab;
    std::string collection;
    std::string train_queries;
    std::string train_qrels;
    std::string dev_queries;
    std::string dev_qrels;
    std::string test_queries;
    std::string test_qrels;
    std::string hard_negatives;
    std::string teacher_margins;
};

enum class OptimizerKind { kAdam, kSgd };
enum class Scheduler { kLinear, kConstant };

struct TrainingConfig {
    std::size_t epochs = 5;
    std::size_t batch_size = 16;
    std::size_t negatives = 4;
    double learning_rate = 1e-3;
    OptimizerKind optimizer = OptimizerKind::kAdam;
    Scheduler scheduler = Scheduler::kLinear;
    std::uint64_t seed = 0;
    /// Keep the epoch with the best dev MRR@10 (when a dev split exists).
    bool select_on_dev = true;
};

struct AtSchedule {
    /// When set, training loads this checkpoint and runs `epochs` more epochs
    /// with the configured perturbation.
    std::string from_checkpoint;
    std::size_t epochs = 2;
};

struct DistillConfig {
    /// Standard deviation of the Gaussian noise on oracle margins.
    double teacher_sigma = 0.0;
    /// Lexical hard negatives scored per (query, positive).
    std::size_t teacher_depth = 8;
};

struct FinetuneConfig {
    std::string from_checkpoint;
    /// 0 selects 0.1 x training.learning_rate.
    double learning_rate = 0.0;
};

struct VariationConfig {
    /// Empty: evaluate the queries as given.
    std::string family;
    std::uint64_t seed = 0;
    std::string stopwords;
    std::string lexicon;
    std::size_t min_word_length = 4;
    std::size_t edits_per_query = 1;
};

struct EvalConfig {
    std::string checkpoint;
    /// "test", "dev" or "train"; ignored when `queries` is given.
    std::string split = "test";
    std::string queries;
    std::string qrels;
    MetricCutoffs cutoffs;
    std::size_t run_depth = 1000;
    std::string tag;
    VariationConfig variation;
};

struct RunConfig {
    PathsConfig paths;
    EncoderConfig model;
    TrainingConfig training;
    LossConfig loss;
    PerturbationConfig perturbation;
    AtSchedule at;
    DistillConfig distill;
    FinetuneConfig finetune;
    EvalConfig eval;
    std::string out = "runs/default";
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

RunConfig default_config();
/// Defaults merged with `overrides`; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& overrides);
/// Applies `key.path=value`; the value is parsed as JSON when possible,
/// else taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);
/// Stable 64-bit hash (hex) of the canonical config JSON.
std::string config_hash(const RunConfig& c);

// ---- data ------------------------------------------------------------------

struct Dataset {
    Vocabulary vocab;
    Corpus corpus;  // every split's queries and qrels
    std::vector<QueryId> train;
    std::vector<QueryId> dev;
    std::vector<QueryId> test;
    std::map<QueryId, std::string> query_text;
    HardNegatives hard_negatives;
    std::optional<TeacherMargins> teacher;
};

Dataset load_dataset(const PathsConfig& paths);
Dataset dataset_from_synthetic(const SyntheticCorpus& synth, std::size_t hard_negative_depth);

// ---- checkpoints -----------------------------------------------------------

struct Checkpoint {
    static constexpr std::uint32_t kFormatVersion = 1;

    EncoderModel model;
    std::vector<std::string> vocab;
    AdamState optimizer;
    std::optional<Tensor> universal_epsilon;
    /// epoch, step, config_hash, strategy, rng states, ...
    nlohmann::json metadata = nlohmann::json::object();
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// Overwrites the parameters of `model` with same-named tensors of `source`.
void copy_parameters(const EncoderModel& source, const EncoderModel& model);

// ---- training --------------------------------------------------------------

struct StepLog {
    std::size_t epoch = 0;
    std::size_t step = 0;
    double learning_rate = 0.0;
    StepResult result;
    double grad_norm = 0.0;
};

nlohmann::json to_json(const StepLog& log);

struct EpochLog {
    std::size_t epoch = 0;
    double mean_loss = 0.0;
    std::optional<double> dev_mrr;
};

struct TrainResult {
    EncoderModel best;
    EncoderModel last;
    AdamState optimizer;
    std::optional<Tensor> universal_epsilon;
    /// Total epochs of parameter updates, including any resumed-from epochs.
    std::size_t epochs_completed = 0;
    std::size_t steps = 0;
    std::size_t best_epoch = 0;
    std::optional<double> best_dev_mrr;
    std::vector<EpochLog> epochs;
    std::size_t skipped_triplets = 0;
};

struct TrainOptions {
    /// Continue from this state (AT resume / finetune); nullopt trains from
    /// a fresh initialization.
    const Checkpoint* resume = nullptr;
    /// Epochs to run in this invocation.
    std::size_t epochs = 0;
    double learning_rate = 0.0;
    /// Per-step callback (log sink).
    std::function<void(const StepLog&)> on_step;
    /// Written after every epoch so a NaN abort leaves the last good state.
    std::filesystem::path last_good_path;
};

/// Thrown when a step produces a non-finite loss.
struct NonFiniteLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

TrainResult train_model(const RunConfig& config, const Dataset& data, const TrainOptions& options);

// ---- evaluation ------------------------------------------------------------

/// Ranks `queries` (raw text, encoded with the frozen vocabulary) and scores
/// the run against `qrels`.
EvalReport evaluate_model(const EncoderModel& model, const Dataset& data, const std::map<QueryId, std::string>& queries,
                          const Qrels& qrels, const EvalConfig& eval, Run* run_out = nullptr);
/// Applies the configured variation to every query (no-op when the family is empty).
std::map<QueryId, std::string> vary_queries(const std::map<QueryId, std::string>& queries, const VariationConfig& config);
std::map<QueryId, std::string> split_queries(const Dataset& data, const std::vector<QueryId>& ids);
Qrels split_qrels(const Dataset& data, const std::vector<QueryId>& ids);
double dev_mrr(const EncoderModel& model, const Dataset& data, std::size_t cutoff = 10);
/// Ranking by lexical_overlap (ties by ascending doc id): the reference a
/// trained model is measured against on synthetic corpora.
Run lexical_run(const Corpus& corpus, const std::map<QueryId, TokenSeq>& queries, std::size_t cutoff);

/// Oracle teacher: overlap(q, d+) - overlap(q, d-) + N(0, sigma) for the
/// top `depth` lexical negatives of every (query, positive) pair.
TeacherMargins oracle_teacher(const Corpus& corpus, const std::vector<QueryId>& queries, std::size_t depth,
                              double sigma, std::uint64_t seed);
/// Student margins s(q, d+) - s(q, d-) for each triplet, in map order.
std::vector<double> student_margins_for(const EncoderModel& model, const Corpus& corpus, const TeacherMargins& triplets);
double pearson(const std::vector<double>& a, const std::vector<double>& b);

// ---- commands --------------------------------------------------------------
// Each command writes into config.out and returns a JSON summary.

nlohmann::json cmd_gen_corpus(const SynthSpec& spec, std::size_t hard_negative_depth, const std::filesystem::path& out);
nlohmann::json cmd_train(const RunConfig& config);
nlohmann::json cmd_distill(const RunConfig& config);
nlohmann::json cmd_finetune(const RunConfig& config);
nlohmann::json cmd_evaluate(const RunConfig& config);
nlohmann::json cmd_perturb_queries(const std::filesystem::path& queries, const VariationConfig& variation,
                                   const std::filesystem::path& out);
/// Writes comparison.md and comparison.tsv; returns the markdown in "table".
nlohmann::json cmd_compare(const std::filesystem::path& report_a, const std::filesystem::path& report_b,
                           const std::filesystem::path& out);

}  // namespace advrank
