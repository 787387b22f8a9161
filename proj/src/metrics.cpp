#include "advrank/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

namespace advrank {

namespace {

constexpr std::size_t kEncodeChunk = 256;

Tensor encode_all(const EncoderModel& model, const std::vector<const TokenSeq*>& seqs, Side side) {
    std::vector<double> out;
    out.reserve(seqs.size() * model.output_dim());
    for (std::size_t start = 0; start < seqs.size(); start += kEncodeChunk) {
        std::vector<TokenSeq> chunk;
        for (std::size_t i = start; i < std::min(seqs.size(), start + kEncodeChunk); ++i) chunk.push_back(*seqs[i]);
        Tensor v = encode_sequences(model, PaddedSequences::from(chunk), side);
        out.insert(out.end(), v.data().begin(), v.data().end());
    }
    return Tensor::from({seqs.size(), model.output_dim()}, std::move(out));
}

std::size_t relevant_count(const std::map<DocId, int>& judged) {
    return static_cast<std::size_t>(std::count_if(judged.begin(), judged.end(), [](const auto& kv) { return kv.second >= 1; }));
}

template <typename PerQuery>
MetricValues compute_metric(const std::string& name, const Run& run, const Qrels& qrels, PerQuery&& per_query) {
    MetricValues m;
    m.name = name;
    for (const auto& [q, list] : run) {
        auto it = qrels.find(q);
        if (it == qrels.end() || relevant_count(it->second) == 0) {
            ++m.excluded;
            continue;
        }
        m.per_query[q] = per_query(list, it->second);
    }
    if (m.per_query.empty()) throw std::invalid_argument(name + ": no judged queries to evaluate");
    double s = 0.0;
    for (const auto& [q, v] : m.per_query) s += v;
    m.mean = s / static_cast<double>(m.per_query.size());
    return m;
}

int grade_of(const std::map<DocId, int>& judged, DocId d) {
    auto it = judged.find(d);
    return it == judged.end() ? 0 : it->second;
}

}  // namespace

RankedList rank_scores(QueryId query, std::span<const double> scores, std::span<const DocId> doc_ids, std::size_t cutoff) {
    if (scores.size() != doc_ids.size()) throw std::invalid_argument("rank_scores: score and id counts differ");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    const std::size_t keep = std::min(cutoff, order.size());
    auto better = [&](std::size_t a, std::size_t b) {
        if (scores[a] != scores[b]) return scores[a] > scores[b];
        return doc_ids[a] < doc_ids[b];
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(), better);
    RankedList r;
    r.query = query;
    for (std::size_t i = 0; i < keep; ++i) {
        r.docs.push_back(doc_ids[order[i]]);
        r.scores.push_back(scores[order[i]]);
    }
    return r;
}

Run rank_all(const EncoderModel& model, const std::map<DocId, TokenSeq>& documents,
             const std::map<QueryId, TokenSeq>& queries, std::size_t cutoff) {
    if (documents.empty()) throw std::invalid_argument("rank_all: empty corpus");
    NoGradGuard no_grad;
    std::vector<DocId> doc_ids;
    std::vector<const TokenSeq*> doc_seqs;
    for (const auto& [d, seq] : documents) {
        doc_ids.push_back(d);
        doc_seqs.push_back(&seq);
    }
    std::vector<QueryId> query_ids;
    std::vector<const TokenSeq*> query_seqs;
    for (const auto& [q, seq] : queries) {
        query_ids.push_back(q);
        query_seqs.push_back(&seq);
    }
    Run run;
    if (queries.empty()) return run;
    const Tensor doc_vecs = encode_all(model, doc_seqs, Side::kDocument);
    const Tensor query_vecs = encode_all(model, query_seqs, Side::kQuery);
    const Tensor scores = score(query_vecs, doc_vecs);
    const std::size_t n_docs = doc_ids.size();
    for (std::size_t i = 0; i < query_ids.size(); ++i) {
        run.emplace(query_ids[i], rank_scores(query_ids[i], scores.data().subspan(i * n_docs, n_docs), doc_ids, cutoff));
    }
    return run;
}

MetricValues mrr_at_k(const Run& run, const Qrels& qrels, std::size_t k) {
    return compute_metric("MRR@" + std::to_string(k), run, qrels, [k](const RankedList& list, const std::map<DocId, int>& judged) {
        for (std::size_t r = 0; r < std::min(k, list.docs.size()); ++r)
            if (grade_of(judged, list.docs[r]) >= 1) return 1.0 / static_cast<double>(r + 1);
        return 0.0;
    });
}

MetricValues recall_at_k(const Run& run, const Qrels& qrels, std::size_t k) {
    return compute_metric("R@" + std::to_string(k), run, qrels, [k](const RankedList& list, const std::map<DocId, int>& judged) {
        std::size_t hit = 0;
        for (std::size_t r = 0; r < std::min(k, list.docs.size()); ++r)
            if (grade_of(judged, list.docs[r]) >= 1) ++hit;
        return static_cast<double>(hit) / static_cast<double>(relevant_count(judged));
    });
}

MetricValues ndcg_at_k(const Run& run, const Qrels& qrels, std::size_t k) {
    auto gain = [](int grade) { return std::exp2(static_cast<double>(grade)) - 1.0; };
    auto discount = [](std::size_t rank0) { return 1.0 / std::log2(static_cast<double>(rank0) + 2.0); };
    return compute_metric("nDCG@" + std::to_string(k), run, qrels, [&](const RankedList& list, const std::map<DocId, int>& judged) {
        double dcg = 0.0;
        for (std::size_t r = 0; r < std::min(k, list.docs.size()); ++r) dcg += gain(grade_of(judged, list.docs[r])) * discount(r);
        std::vector<int> grades;
        for (const auto& [d, g] : judged) grades.push_back(g);
        std::sort(grades.begin(), grades.end(), std::greater<>());
        double ideal = 0.0;
        for (std::size_t r = 0; r < std::min(k, grades.size()); ++r) ideal += gain(grades[r]) * discount(r);
        return dcg / ideal;
    });
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("paired_t_test: sample sizes differ (" + std::to_string(a.size()) + " vs " + std::to_string(b.size()) + ")");
    }
    if (a.size() < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");
    TTestResult r;
    r.n = a.size();
    const double n = static_cast<double>(a.size());
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    double mean = 0.0;
    for (double v : d) mean += v;
    mean /= n;
    double ss = 0.0;
    for (double v : d) ss += (v - mean) * (v - mean);
    if (ss == 0.0) {
        if (mean == 0.0) return r;  // identical samples: t = 0, p = 1
        r.degenerate_variance = true;
        r.t = mean > 0.0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        r.significant = true;
        return r;
    }
    const double sd = std::sqrt(ss / (n - 1.0));
    r.t = mean / (sd / std::sqrt(n));
    boost::math::students_t dist(n - 1.0);
    r.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(r.t)));
    r.p = std::min(1.0, r.p);
    r.significant = r.p < 0.05;
    return r;
}

// ---- reports ---------------------------------------------------------------

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [name, m] : metrics) {
        nlohmann::json per = nlohmann::json::object();
        for (const auto& [q, v] : m.per_query) per[std::to_string(q)] = v;
        j[name] = {{"mean", m.mean}, {"n", m.per_query.size()}, {"excluded", m.excluded}, {"per_query", per}};
    }
    j["tag"] = tag;
    if (!ttests.empty()) {
        nlohmann::json t = nlohmann::json::object();
        for (const auto& [name, r] : ttests) {
            t[name] = {{"t", std::isfinite(r.t) ? nlohmann::json(r.t) : nlohmann::json(r.t > 0 ? "inf" : "-inf")},
                       {"p", r.p},
                       {"significant", r.significant},
                       {"degenerate_variance", r.degenerate_variance},
                       {"n", r.n}};
        }
        j["ttest"] = t;
    }
    return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
    EvalReport r;
    r.tag = j.value("tag", std::string());
    for (const auto& [name, body] : j.items()) {
        if (name == "tag" || name == "ttest") continue;
        MetricValues m;
        m.name = name;
        m.mean = body.at("mean").get<double>();
        m.excluded = body.value("excluded", std::size_t{0});
        for (const auto& [q, v] : body.at("per_query").items()) m.per_query[std::stoll(q)] = v.get<double>();
        r.metrics[name] = std::move(m);
    }
    if (j.contains("ttest")) {
        for (const auto& [name, body] : j["ttest"].items()) {
            TTestResult t;
            const auto& tv = body.at("t");
            t.t = tv.is_string() ? (tv.get<std::string>() == "inf" ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity())
                                 : tv.get<double>();
            t.p = body.at("p").get<double>();
            t.significant = body.value("significant", t.p < 0.05);
            t.degenerate_variance = body.value("degenerate_variance", false);
            t.n = body.value("n", std::size_t{0});
            r.ttests[name] = t;
        }
    }
    return r;
}

void EvalReport::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << to_json().dump(2) << '\n';
}

EvalReport EvalReport::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open report " + path.string());
    return from_json(nlohmann::json::parse(in));
}

EvalReport evaluate_run(const Run& run, const Qrels& qrels, const MetricCutoffs& cutoffs, std::string tag) {
    EvalReport r;
    r.tag = std::move(tag);
    for (auto m : {mrr_at_k(run, qrels, cutoffs.mrr), recall_at_k(run, qrels, cutoffs.recall), ndcg_at_k(run, qrels, cutoffs.ndcg)}) {
        r.metrics[m.name] = std::move(m);
    }
    return r;
}

void write_run_file(const std::filesystem::path& path, const Run& run, const std::string& tag) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << std::setprecision(17);
    for (const auto& [q, list] : run)
        for (std::size_t i = 0; i < list.docs.size(); ++i)
            out << q << " Q0 " << list.docs[i] << ' ' << (i + 1) << ' ' << list.scores[i] << ' ' << (tag.empty() ? "advrank" : tag) << '\n';
}

std::vector<ComparisonRow> compare_reports(const EvalReport& a, const EvalReport& b) {
    std::vector<ComparisonRow> rows;
    for (const auto& [name, ma] : a.metrics) {
        auto it = b.metrics.find(name);
        if (it == b.metrics.end()) continue;
        const auto& mb = it->second;
        std::set<QueryId> qa, qb;
        for (const auto& [q, v] : ma.per_query) qa.insert(q);
        for (const auto& [q, v] : mb.per_query) qb.insert(q);
        if (qa != qb) {
            std::vector<QueryId> common;
            std::set_intersection(qa.begin(), qa.end(), qb.begin(), qb.end(), std::back_inserter(common));
            throw std::invalid_argument(name + ": reports cover different query sets (" + std::to_string(qa.size()) + " vs " +
                                        std::to_string(qb.size()) + " queries, " + std::to_string(common.size()) + " shared)");
        }
        std::vector<double> va, vb;
        for (const auto& [q, v] : ma.per_query) {
            va.push_back(v);
            vb.push_back(mb.per_query.at(q));
        }
        ComparisonRow row;
        row.metric = name;
        row.mean_a = ma.mean;
        row.mean_b = mb.mean;
        row.test = paired_t_test(vb, va);
        rows.push_back(row);
    }
    if (rows.empty()) throw std::invalid_argument("compare: reports share no metric");
    return rows;
}

std::string format_comparison_markdown(const std::vector<ComparisonRow>& rows, const std::string& name_a,
                                       const std::string& name_b) {
    std::ostringstream os;
    os << std::fixed;
    os << "| metric | " << name_a << " | " << name_b << " | t | p |\n|---|---|---|---|---|\n";
    for (const auto& r : rows) {
        os << "| " << r.metric << " | " << std::setprecision(4) << r.mean_a << " | " << r.mean_b
           << (r.test.p < 0.05 ? "†" : "") << " | " << std::setprecision(3) << r.test.t << " | " << std::setprecision(4)
           << r.test.p << " |\n";
    }
    return os.str();
}

std::string format_comparison_tsv(const std::vector<ComparisonRow>& rows) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "metric\tmean_a\tmean_b\tt\tp\tsignificant\n";
    for (const auto& r : rows)
        os << r.metric << '\t' << r.mean_a << '\t' << r.mean_b << '\t' << r.test.t << '\t' << r.test.p << '\t'
           << (r.test.p < 0.05 ? "†" : "") << '\n';
    return os.str();
}

}  // namespace advrank
