#pragma once

// Exhaustive ranking, MRR@k / Recall@k / nDCG@k, paired t-tests and the
// JSON report / TREC run formats.

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advrank/encoder.hpp"
#include "advrank/text.hpp"

namespace advrank {

struct RankedList {
    QueryId query = 0;
    std::vector<DocId> docs;     // best first
    std::vector<double> scores;  // non-increasing
};

using Run = std::map<QueryId, RankedList>;

/// Exact top-`cutoff` by dot product over every document; ties broken by
/// ascending document id.
Run rank_all(const EncoderModel& model, const std::map<DocId, TokenSeq>& documents,
             const std::map<QueryId, TokenSeq>& queries, std::size_t cutoff);
/// Ranks precomputed scores: scores[q][i] belongs to doc_ids[i].
RankedList rank_scores(QueryId query, std::span<const double> scores, std::span<const DocId> doc_ids, std::size_t cutoff);

struct MetricValues {
    std::string name;
    std::map<QueryId, double> per_query;
    double mean = 0.0;
    /// Run queries left out because they have no relevant judgment.
    std::size_t excluded = 0;
};

MetricValues mrr_at_k(const Run& run, const Qrels& qrels, std::size_t k = 10);
MetricValues recall_at_k(const Run& run, const Qrels& qrels, std::size_t k = 1000);
/// Gain 2^grade - 1, discount 1/log2(rank + 1).
MetricValues ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k = 10);

struct TTestResult {
    double t = 0.0;
    double p = 1.0;
    bool significant = false;  // p < 0.05
    /// Nonzero mean difference with zero variance (p reported as 0).
    bool degenerate_variance = false;
    std::size_t n = 0;
};

/// Two-sided paired t-test on aligned samples.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b);

struct EvalReport {
    std::string tag;
    std::map<std::string, MetricValues> metrics;
    /// Optional significance block against a baseline, keyed by metric.
    std::map<std::string, TTestResult> ttests;

    nlohmann::json to_json() const;
    static EvalReport from_json(const nlohmann::json& j);
    void save(const std::filesystem::path& path) const;
    static EvalReport load(const std::filesystem::path& path);
};

struct MetricCutoffs {
    std::size_t mrr = 10;
    std::size_t recall = 1000;
    std::size_t ndcg = 10;
};

EvalReport evaluate_run(const Run& run, const Qrels& qrels, const MetricCutoffs& cutoffs, std::string tag = {});

/// TREC 6-column run file: <qid> Q0 <docid> <rank> <score> <tag>.
void write_run_file(const std::filesystem::path& path, const Run& run, const std::string& tag);

struct ComparisonRow {
    std::string metric;
    double mean_a = 0.0;
    double mean_b = 0.0;
    TTestResult test;
};

/// Per-metric paired t-tests of B against A. Rejects reports whose query
/// sets differ.
std::vector<ComparisonRow> compare_reports(const EvalReport& a, const EvalReport& b);
/// Markdown table; B's mean carries a dagger when p < 0.05.
std::string format_comparison_markdown(const std::vector<ComparisonRow>& rows, const std::string& name_a,
                                       const std::string& name_b);
std::string format_comparison_tsv(const std::vector<ComparisonRow>& rows);

}  // namespace advrank
