// Python bindings. Structured results cross the boundary as JSON text and are
// decoded on the Python side.
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "advrank/harness.hpp"

namespace py = pybind11;
using namespace advrank;

namespace {

Run make_run(const std::map<QueryId, std::vector<DocId>>& ranked) {
    Run run;
    for (const auto& [q, docs] : ranked) {
        RankedList list{q, docs, {}};
        for (std::size_t i = 0; i < docs.size(); ++i) list.scores.push_back(-static_cast<double>(i));
        run[q] = std::move(list);
    }
    return run;
}

py::dict metric_dict(const MetricValues& m) {
    py::dict d;
    d["name"] = m.name;
    d["mean"] = m.mean;
    d["per_query"] = m.per_query;
    d["excluded"] = m.excluded;
    return d;
}

std::string run_command(const std::string& name, const std::string& config_json) {
    const RunConfig config = config_from_json(nlohmann::json::parse(config_json));
    py::gil_scoped_release release;
    if (name == "train") return cmd_train(config).dump();
    if (name == "distill") return cmd_distill(config).dump();
    if (name == "finetune") return cmd_finetune(config).dump();
    if (name == "evaluate") return cmd_evaluate(config).dump();
    throw std::invalid_argument("unknown command: " + name);
}

}  // namespace

PYBIND11_MODULE(_advrank, m) {
    m.doc() = "Adversarial training toolkit for first-stage neural retrieval";

    m.def("default_config", [] { return nlohmann::json(default_config()).dump(); });
    m.def("resolve_config", [](const std::string& overrides) { return nlohmann::json(config_from_json(nlohmann::json::parse(overrides))).dump(); });
    m.def("config_hash", [](const std::string& config) { return config_hash(config_from_json(nlohmann::json::parse(config))); });
    m.def("run_command", &run_command, py::arg("name"), py::arg("config_json"));

    m.def(
        "gen_corpus",
        [](const std::string& spec_json, std::size_t hard_depth, const std::filesystem::path& out) {
            const SynthSpec spec = nlohmann::json::parse(spec_json).get<SynthSpec>();
            py::gil_scoped_release release;
            return cmd_gen_corpus(spec, hard_depth, out).dump();
        },
        py::arg("spec_json"), py::arg("hard_depth"), py::arg("out"));
    m.def("default_synth_spec", [] { return nlohmann::json(SynthSpec{}).dump(); });
    m.def(
        "perturb_queries",
        [](const std::filesystem::path& queries, const std::string& family, std::uint64_t seed, const std::filesystem::path& out,
           const std::string& stopwords, const std::string& lexicon) {
            VariationConfig v;
            v.family = family;
            v.seed = seed;
            v.stopwords = stopwords;
            v.lexicon = lexicon;
            return cmd_perturb_queries(queries, v, out).dump();
        },
        py::arg("queries"), py::arg("family"), py::arg("seed"), py::arg("out"), py::arg("stopwords") = "", py::arg("lexicon") = "");
    m.def(
        "compare",
        [](const std::filesystem::path& a, const std::filesystem::path& b, const std::filesystem::path& out) { return cmd_compare(a, b, out).dump(); },
        py::arg("report_a"), py::arg("report_b"), py::arg("out"));

    m.def(
        "vary",
        [](const std::string& text, const std::string& family, std::uint64_t seed, std::uint64_t stream, std::set<std::string> stopwords,
           SynonymLexicon lexicon) {
            VariationSpec spec;
            spec.family = variation_family_from_string(family);
            spec.seed = seed;
            spec.stopwords = std::move(stopwords);
            spec.lexicon = std::move(lexicon);
            const VariationResult r = vary(text, spec, stream);
            return py::make_tuple(r.text, r.edits, r.flags);
        },
        py::arg("text"), py::arg("family"), py::arg("seed") = 0, py::arg("stream") = 0, py::arg("stopwords") = std::set<std::string>{},
        py::arg("lexicon") = SynonymLexicon{});
    m.def("levenshtein", &levenshtein);
    m.def("damerau_levenshtein", &damerau_levenshtein);

    m.def(
        "mrr_at_k", [](const std::map<QueryId, std::vector<DocId>>& run, const Qrels& qrels, std::size_t k) { return metric_dict(mrr_at_k(make_run(run), qrels, k)); },
        py::arg("run"), py::arg("qrels"), py::arg("k") = 10);
    m.def(
        "recall_at_k",
        [](const std::map<QueryId, std::vector<DocId>>& run, const Qrels& qrels, std::size_t k) { return metric_dict(recall_at_k(make_run(run), qrels, k)); },
        py::arg("run"), py::arg("qrels"), py::arg("k") = 1000);
    m.def(
        "ndcg_at_k", [](const std::map<QueryId, std::vector<DocId>>& run, const Qrels& qrels, std::size_t k) { return metric_dict(ndcg_at_k(make_run(run), qrels, k)); },
        py::arg("run"), py::arg("qrels"), py::arg("k") = 10);
    m.def("paired_t_test", [](const std::vector<double>& a, const std::vector<double>& b) {
        const TTestResult r = paired_t_test(a, b);
        py::dict d;
        d["t"] = r.t;
        d["p"] = r.p;
        d["significant"] = r.significant;
        d["n"] = r.n;
        return d;
    });

    m.def("infonce", [](const std::vector<std::vector<double>>& logits) { return infonce_logits(Tensor::matrix(logits)).item(); });
    m.def("kl_scores", [](const std::vector<std::vector<double>>& clean, const std::vector<std::vector<double>>& perturbed) {
        return kl_scores(Tensor::matrix(clean), Tensor::matrix(perturbed)).item();
    });

    py::register_exception<NonFiniteLoss>(m, "NonFiniteLoss", PyExc_ArithmeticError);
}
