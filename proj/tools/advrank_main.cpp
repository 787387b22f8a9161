// advrank command-line tool.

#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "advrank/harness.hpp"

namespace {

using advrank::RunConfig;

struct CommonOptions {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOptions& o, const char* config_help) {
    cmd->add_option("--config", o.config, config_help)->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "Random seed");
    cmd->add_option("--out", o.out, "Output directory");
    cmd->add_option("--set", o.sets, "Override a config field: key.path=value (repeatable)");
}

nlohmann::json read_json_file(const std::string& path) {
    if (path.empty()) return nlohmann::json::object();
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    return nlohmann::json::parse(in);
}

RunConfig run_config(const CommonOptions& o) {
    nlohmann::json j = read_json_file(o.config);
    for (const auto& s : o.sets) advrank::apply_override(j, s);
    if (o.seed) j["training"]["seed"] = *o.seed;
    if (!o.out.empty()) j["out"] = o.out;
    return advrank::config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial training and robustness evaluation for first-stage retrieval"};
    app.require_subcommand(1);

    CommonOptions gen_o, train_o, distill_o, finetune_o, eval_o;
    std::size_t hard_depth = 20;
    auto* gen = app.add_subcommand("gen-corpus", "Generate a synthetic topic corpus");
    add_common(gen, gen_o, "Synthetic spec JSON");
    gen->add_option("--hard-negatives", hard_depth, "Lexical hard negatives per training query (0 disables)");

    auto* train = app.add_subcommand("train", "Train a bi-encoder (or resume with adversarial training)");
    add_common(train, train_o, "Run config JSON");
    auto* distill = app.add_subcommand("distill", "Margin-MSE training against teacher margins");
    add_common(distill, distill_o, "Run config JSON");
    auto* finetune = app.add_subcommand("finetune", "Adapt a checkpoint to a new corpus");
    add_common(finetune, finetune_o, "Run config JSON");
    std::string finetune_from;
    finetune->add_option("--from", finetune_from, "Checkpoint to adapt (finetune.from_checkpoint)");

    auto* evaluate = app.add_subcommand("evaluate", "Rank and score queries with a checkpoint");
    add_common(evaluate, eval_o, "Run config JSON");
    std::string eval_ckpt;
    evaluate->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate (eval.checkpoint)");

    auto* perturb = app.add_subcommand("perturb-queries", "Write a varied copy of a query file");
    std::string pq_queries, pq_out = ".", pq_family;
    advrank::VariationConfig pq;
    perturb->add_option("--queries", pq_queries, "Query TSV")->required()->check(CLI::ExistingFile);
    perturb->add_option("--family", pq_family, "random_char | neighb_char | qwerty_char | rm_stopwords | random_order | lexicon_syn")->required();
    perturb->add_option("--seed", pq.seed, "Random seed");
    perturb->add_option("--stopwords", pq.stopwords, "Stop-word list (rm_stopwords)");
    perturb->add_option("--lexicon", pq.lexicon, "Synonym lexicon TSV (lexicon_syn)");
    perturb->add_option("--min-word-length", pq.min_word_length, "Shortest word eligible for character edits");
    perturb->add_option("--out", pq_out, "Output directory");

    auto* compare = app.add_subcommand("compare", "Paired t-tests between two evaluation reports");
    std::string report_a, report_b, cmp_out = ".";
    compare->add_option("report_a", report_a, "Baseline report.json")->required()->check(CLI::ExistingFile);
    compare->add_option("report_b", report_b, "Compared report.json")->required()->check(CLI::ExistingFile);
    compare->add_option("--out", cmp_out, "Output directory");

    CLI11_PARSE(app, argc, argv);

    try {
        nlohmann::json summary;
        if (*gen) {
            nlohmann::json spec = read_json_file(gen_o.config);
            for (const auto& s : gen_o.sets) advrank::apply_override(spec, s);
            if (gen_o.seed) spec["seed"] = *gen_o.seed;
            summary = advrank::cmd_gen_corpus(spec.get<advrank::SynthSpec>(), hard_depth, gen_o.out.empty() ? "corpus" : gen_o.out);
        } else if (*train) {
            summary = advrank::cmd_train(run_config(train_o));
        } else if (*distill) {
            summary = advrank::cmd_distill(run_config(distill_o));
        } else if (*finetune) {
            RunConfig c = run_config(finetune_o);
            if (!finetune_from.empty()) c.finetune.from_checkpoint = finetune_from;
            summary = advrank::cmd_finetune(c);
        } else if (*evaluate) {
            RunConfig c = run_config(eval_o);
            if (!eval_ckpt.empty()) c.eval.checkpoint = eval_ckpt;
            summary = advrank::cmd_evaluate(c);
        } else if (*perturb) {
            pq.family = pq_family;
            summary = advrank::cmd_perturb_queries(pq_queries, pq, pq_out);
        } else if (*compare) {
            summary = advrank::cmd_compare(report_a, report_b, cmp_out);
            std::cout << summary["table"].get<std::string>();
            return 0;
        }
        std::cout << summary.dump(2) << '\n';
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
