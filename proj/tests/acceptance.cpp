// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset.
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "advrank/harness.hpp"
#include "gradcheck.hpp"
#include "temp_dir.hpp"

using namespace advrank;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) { return std::chrono::duration<double>(Clock::now() - start).count(); }

// ---- shared fixtures -------------------------------------------------------

SynthSpec tiny_spec(std::uint64_t seed) {
    SynthSpec s;
    s.vocab_size = 200;
    s.topics = 4;
    s.docs_per_topic = 10;
    s.salient_tokens = 20;
    s.background_tokens = 50;
    s.doc_len_min = 2;
    s.doc_len_max = 7;
    s.train_queries = 12;
    s.dev_queries = 1;
    s.test_queries = 1;
    s.seed = seed;
    return s;
}

EncoderModel make_model(EncoderKind kind, std::size_t vocab, std::size_t dim, std::size_t layers, std::uint64_t seed,
                        double init_scale = 1.0) {
    EncoderConfig c;
    c.kind = kind;
    c.vocab_size = vocab;
    c.dim = dim;
    c.layers = layers;
    c.init_scale = init_scale;
    return EncoderModel::init(c, seed);
}

double loss_at(const EncoderModel& model, const TripletBatch& batch, const BatchEmbeddings& emb, const Perturbation& delta,
               const LossConfig& loss) {
    NoGradGuard no_grad;
    return ranking_loss(forward_batch(model, delta.apply(emb)), batch, loss).item();
}

Perturbation zero_like(const BatchEmbeddings& emb) {
    return {Tensor::zeros(emb.queries.values.shape()), Tensor::zeros(emb.positives.values.shape()),
            Tensor::zeros(emb.negatives.values.shape()), 0};
}

bool pads_zero(const Perturbation& p, const TripletBatch& batch) {
    const std::array<std::pair<const Tensor*, const PaddedSequences*>, 3> parts{
        std::pair{&p.queries, &batch.queries}, std::pair{&p.positives, &batch.positives}, std::pair{&p.negatives, &batch.negatives}};
    for (const auto& [t, seqs] : parts) {
        const auto mask = seqs->mask();
        for (std::size_t r = 0; r < mask.size(); ++r)
            for (std::size_t j = 0; j < t->cols(); ++j)
                if (mask[r] == 0.0 && t->at(r, j) != 0.0) return false;
    }
    return true;
}

// ---- 1. gradients ----------------------------------------------------------

Outcome gradient_correctness() {
    const auto start = Clock::now();
    constexpr double kTol = 1e-5;
    double worst_op = 0.0;
    std::string worst_op_name;
    std::size_t op_checks = 0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        for (auto& c : advrank::testing::op_cases(7000 + seed)) {
            const double e = advrank::testing::gradcheck(c.loss, c.inputs).max_rel_error;
            ++op_checks;
            if (e > worst_op) {
                worst_op = e;
                worst_op_name = c.name;
            }
        }
    }

    // End to end: L_total at a fixed FGSM perturbation, gradient with respect
    // to every model parameter.
    double worst_e2e = 0.0;
    std::string worst_e2e_name;
    const auto synth = generate_synthetic(tiny_spec(3));
    const TeacherMargins teacher = oracle_teacher(synth.corpus, synth.train_queries, 4, 0.5, 1);
    for (EncoderKind kind : {EncoderKind::kDense, EncoderKind::kSparse}) {
        for (const char* objective : {"infonce", "margin_mse", "kl_scores"}) {
            const EncoderModel model = make_model(kind, 200, 5, 2, 11, 0.5);
            // Zero biases put dead-relu tokens exactly on a kink (h = 0, so
            // every logit is 0); draw them away from zero instead.
            std::mt19937_64 bias_rng(17);
            for (const auto& p : model.parameters()) {
                if (p.name.find("bias") == std::string::npos) continue;
                Tensor b = p.tensor;
                const Tensor r = advrank::testing::random_tensor(b.shape(), bias_rng);
                std::copy(r.data().begin(), r.data().end(), b.mutable_data().begin());
            }
            LossConfig loss;
            PerturbationConfig pert;
            pert.strategy = Strategy::kFgsm;
            pert.r_max = 0.1;
            const TeacherMargins* t = nullptr;
            if (std::string(objective) == "margin_mse") {
                loss.objective = Objective::kMarginMse;
                t = &teacher;
            }
            if (std::string(objective) == "kl_scores") pert.adversarial_loss = AdversarialLoss::kKlScores;
            BatchSampler sampler(synth.corpus, synth.train_queries, {3, 2, 5}, nullptr, t);
            const TripletBatch batch = sampler.next_epoch().front();
            const Perturbation delta = fgsm_perturbation(model, batch, loss, pert);
            std::vector<Tensor> inputs;
            for (const auto& p : model.parameters()) inputs.push_back(p.tensor);
            const double e =
                advrank::testing::gradcheck([&] { return total_objective(model, batch, delta, loss, pert); }, inputs).max_rel_error;
            if (e > worst_e2e) {
                worst_e2e = e;
                worst_e2e_name = to_string(kind) + "/" + objective;
            }
        }
    }
    const double elapsed = seconds_since(start);
    return {worst_op < kTol && worst_e2e < kTol && elapsed < 60.0,
            fmt::format("{} op checks max rel {:.2e} ({}); L_total x 6 max rel {:.2e} ({}); tol 1e-5; {:.1f}s < 60s", op_checks,
                        worst_op, worst_op_name, worst_e2e, worst_e2e_name, elapsed)};
}

// ---- 2. loss oracles -------------------------------------------------------

Outcome loss_oracles() {
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<std::size_t> dim(1, 8);
    std::uniform_real_distribution<double> val(-5.0, 5.0);
    auto rows = [&](std::size_t r, std::size_t c) {
        std::vector<std::vector<double>> m(r, std::vector<double>(c));
        for (auto& row : m)
            for (auto& x : row) x = val(rng);
        return m;
    };
    double err_nce = 0.0, err_mse = 0.0, err_kl = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t b = dim(rng), k = dim(rng);
        // InfoNCE: -log(e^{s+} / (e^{s+} + sum_j e^{s-_j})), batch mean.
        const auto pos = rows(b, 1), neg = rows(b, k);
        double ref = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            double denom = std::exp(pos[i][0]);
            for (double s : neg[i]) denom += std::exp(s);
            ref += -std::log(std::exp(pos[i][0]) / denom);
        }
        ref /= static_cast<double>(b);
        err_nce = std::max(err_nce, std::fabs(infonce(Tensor::matrix(pos), Tensor::matrix(neg)).item() - ref));

        const auto s = rows(b, k), t = rows(b, k);
        double mse = 0.0;
        for (std::size_t i = 0; i < b; ++i)
            for (std::size_t j = 0; j < k; ++j) mse += (s[i][j] - t[i][j]) * (s[i][j] - t[i][j]);
        mse /= static_cast<double>(b * k);
        err_mse = std::max(err_mse, std::fabs(margin_mse(Tensor::matrix(s), Tensor::matrix(t)).item() - mse));

        const auto p = rows(b, k + 1), q = rows(b, k + 1);
        double kl = 0.0;
        for (std::size_t i = 0; i < b; ++i) {
            double zp = 0.0, zq = 0.0;
            for (std::size_t j = 0; j <= k; ++j) {
                zp += std::exp(p[i][j]);
                zq += std::exp(q[i][j]);
            }
            for (std::size_t j = 0; j <= k; ++j) {
                const double pj = std::exp(p[i][j]) / zp, qj = std::exp(q[i][j]) / zq;
                kl += pj * std::log(pj / qj);
            }
        }
        kl /= static_cast<double>(b);
        err_kl = std::max(err_kl, std::fabs(kl_scores(Tensor::matrix(p), Tensor::matrix(q)).item() - kl));
    }
    const double ln2 = std::fabs(infonce(Tensor::matrix({{0.4}}), Tensor::matrix({{0.4}})).item() - std::log(2.0));
    const double two_point =
        std::fabs(kl_scores(Tensor::matrix({{0.0, 0.0}}), Tensor::matrix({{0.0, std::log(3.0)}})).item() - 0.5 * std::log(4.0 / 3.0));
    const bool pass = err_nce < 1e-10 && err_mse < 1e-10 && err_kl < 1e-10 && ln2 < 1e-12 && two_point < 1e-12;
    return {pass, fmt::format("1000 instances each: infonce {:.1e}, margin_mse {:.1e}, kl {:.1e} (tol 1e-10); ln2 {:.1e}, "
                              "two-point KL {:.1e} (tol 1e-12)",
                              err_nce, err_mse, err_kl, ln2, two_point)};
}

// ---- 3. FGSM construction --------------------------------------------------

Outcome fgsm_construction() {
    const auto synth = generate_synthetic(SynthSpec{});
    const Dataset data = dataset_from_synthetic(synth, 20);
    const std::size_t vocab = data.vocab.size();
    double worst_norm = 0.0;
    std::size_t batches = 0, units = 0, pad_failures = 0, degenerate = 0, unreported = 0;
    struct Setup {
        EncoderKind kind;
        NormScope scope;
    };
    for (Setup s : {Setup{EncoderKind::kDense, NormScope::kJointTriplet}, Setup{EncoderKind::kDense, NormScope::kPerPart},
                    Setup{EncoderKind::kSparse, NormScope::kJointTriplet}}) {
        // One epoch of FGSM training, checking the perturbation of every batch.
        const EncoderModel model = make_model(s.kind, vocab, 32, 1, 1);
        const auto params = model.parameters();
        AdamState adam;
        LossConfig loss;
        PerturbationConfig pert;
        pert.strategy = Strategy::kFgsm;
        pert.scope = s.scope;
        pert.r_max = 0.5;
        PerturbationState state(1, 32);
        BatchSampler sampler(data.corpus, data.train, {16, 4, 1}, &data.hard_negatives);
        for (const TripletBatch& batch : sampler.next_epoch()) {
            zero_grads(params);
            const Perturbation delta = fgsm_perturbation(model, batch, loss, pert);
            // A unit whose loss gradient vanishes (all-dead sparse activations)
            // has no direction; it must be reported and left exactly zero.
            degenerate += delta.degenerate_units;
            std::size_t zero_units = 0;
            for (double n : unit_norms(delta, batch, s.scope)) {
                ++units;
                if (n == 0.0) {
                    ++zero_units;
                    continue;
                }
                worst_norm = std::max(worst_norm, std::fabs(n - pert.r_max));
            }
            unreported += zero_units != delta.degenerate_units;
            pad_failures += !pads_zero(delta, batch);
            ++batches;
            zero_grads(params);
            training_step(model, batch, loss, pert, state);
            AdamHyperparams hp;
            hp.learning_rate = 3e-3;
            adam_step(params, adam, hp);
        }
    }

    // First-order optimality on frozen random models.
    std::size_t wins = 0;
    const int trials = 100;
    for (int t = 0; t < trials; ++t) {
        const EncoderModel model = make_model(EncoderKind::kDense, vocab, 32, 1, 100 + static_cast<std::uint64_t>(t));
        BatchSampler sampler(data.corpus, data.train, {8, 4, static_cast<std::uint64_t>(t)}, &data.hard_negatives);
        const TripletBatch batch = sampler.next_epoch().front();
        LossConfig loss;
        PerturbationConfig pert;
        pert.strategy = Strategy::kFgsm;
        pert.r_max = 1e-3;
        const Perturbation fgsm = fgsm_perturbation(model, batch, loss, pert);
        BatchEmbeddings emb;
        {
            NoGradGuard no_grad;
            emb = embed_batch(model, batch);
        }
        const double clean = loss_at(model, batch, emb, zero_like(emb), loss);
        const double gain = loss_at(model, batch, emb, fgsm, loss) - clean;
        std::mt19937_64 rng(5000 + static_cast<std::uint64_t>(t));
        bool best = true;
        for (int r = 0; r < 50 && best; ++r)
            best = loss_at(model, batch, emb, eps_random_perturbation(batch, 32, pert, rng), loss) - clean <= gain;
        wins += best;
    }
    const bool pass = worst_norm < 1e-9 && pad_failures == 0 && unreported == 0 && wins >= 95;
    return {pass, fmt::format("{} batches / {} units: max |norm - r_max| {:.1e} (tol 1e-9), pad violations {}, "
                              "zero-gradient units {} (all flagged: {}); FGSM beats 50 random directions in {}/{} trials (need >= 95)",
                              batches, units, worst_norm, pad_failures, degenerate, unreported == 0 ? "yes" : "no", wins, trials)};
}

// ---- 4. backward-pass accounting ------------------------------------------

Outcome cost_accounting() {
    const auto synth = generate_synthetic(SynthSpec{});
    const Dataset data = dataset_from_synthetic(synth, 20);
    std::vector<std::string> lines;
    bool pass = true;
    for (EncoderKind kind : {EncoderKind::kDense, EncoderKind::kSparse}) {
        for (auto [strategy, expected] : {std::pair{Strategy::kFgsm, 2u}, std::pair{Strategy::kUniversal, 1u}}) {
            RunConfig c = default_config();
            c.model.kind = kind;
            c.perturbation.strategy = strategy;
            c.training.select_on_dev = false;
            std::size_t steps = 0, off = 0;
            TrainOptions o;
            o.epochs = 1;
            o.learning_rate = c.training.learning_rate;
            o.on_step = [&](const StepLog& s) {
                ++steps;
                off += s.result.backward_passes != expected;
            };
            reset_backward_pass_count();
            train_model(c, data, o);
            const std::uint64_t total = backward_pass_count();
            pass = pass && off == 0 && steps > 0 && total == expected * steps;
            lines.push_back(fmt::format("{}/{}: {} steps, {} off-count, counter {} = {}x{}", to_string(kind), to_string(strategy), steps,
                                        off, total, expected, steps));
        }
    }
    std::string detail;
    for (const auto& l : lines) detail += (detail.empty() ? "" : "; ") + l;
    return {pass, detail};
}

// ---- 5. universal ascent ---------------------------------------------------

Outcome universal_ascent() {
    const auto synth = generate_synthetic(SynthSpec{});
    const Dataset data = dataset_from_synthetic(synth, 20);
    bool pass = true;
    std::string detail;
    for (EncoderKind kind : {EncoderKind::kDense, EncoderKind::kSparse}) {
        const EncoderModel model = make_model(kind, data.vocab.size(), 32, 1, 9);
        BatchSampler sampler(data.corpus, data.train, {16, 4, 9}, &data.hard_negatives);
        const TripletBatch batch = sampler.next_epoch().front();
        UniversalState state = UniversalState::zeros(32);
        PerturbationConfig pert;
        pert.strategy = Strategy::kUniversal;
        std::vector<double> adv;
        for (int i = 0; i < 20; ++i) {
            zero_grads(model.parameters());
            adv.push_back(*universal_step(state, model, batch, LossConfig{}, pert).adversarial_loss);
        }
        std::size_t rises = 0;
        for (std::size_t i = 1; i < adv.size(); ++i) rises += adv[i] > adv[i - 1];
        pass = pass && adv.back() > adv.front();
        detail += fmt::format("{}{}: L_adv {:.6f} -> {:.6f} ({}/19 steps rising)", detail.empty() ? "" : "; ", to_string(kind),
                              adv.front(), adv.back(), rises);
    }
    return {pass, detail + "; universal_lr 1e-2"};
}

// ---- 6. metric oracles -----------------------------------------------------

RankedList ranked(QueryId q, std::vector<DocId> docs) {
    RankedList r{q, std::move(docs), {}};
    for (std::size_t i = 0; i < r.docs.size(); ++i) r.scores.push_back(-static_cast<double>(i));
    return r;
}

Outcome metric_oracles() {
    advrank::Run run;
    Qrels qrels;
    run[1] = ranked(1, {3, 1, 2});
    qrels[1] = {{1, 1}};
    run[2] = ranked(2, {5, 6, 7});
    qrels[2] = {{7, 2}, {8, 1}};
    run[3] = ranked(3, {2, 4});
    qrels[3] = {{4, 1}, {2, 1}};
    run[4] = ranked(4, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11});
    qrels[4] = {{11, 1}};
    run[5] = ranked(5, {5, 1});
    qrels[5] = {{5, 0}};

    const auto mrr = mrr_at_k(run, qrels, 10);
    const auto rec = recall_at_k(run, qrels, 1000);
    const auto ndcg = ndcg_at_k(run, qrels, 10);
    const double l3 = std::log2(3.0);
    const std::map<QueryId, double> mrr_ref{{1, 0.5}, {2, 1.0 / 3.0}, {3, 1.0}, {4, 0.0}};
    const std::map<QueryId, double> rec_ref{{1, 1.0}, {2, 0.5}, {3, 1.0}, {4, 1.0}};
    const std::map<QueryId, double> ndcg_ref{{1, 1.0 / l3}, {2, 1.5 / (3.0 + 1.0 / l3)}, {3, 1.0}, {4, 0.0}};
    bool exact = mrr.per_query == mrr_ref && rec.per_query == rec_ref && mrr.excluded == 1;
    double ndcg_err = 0.0;
    for (const auto& [q, v] : ndcg_ref) ndcg_err = std::max(ndcg_err, std::fabs(ndcg.per_query.at(q) - v));
    exact = exact && ndcg_err == 0.0;
    const double analytic = std::fabs(ndcg.per_query.at(1) - 0.63093);

    struct Ref {
        std::vector<double> a, b;
        double t, p;
    };
    // 50-digit mpmath references.
    const std::vector<Ref> refs{
        {{0.470091, 0.728264, 0.303751, 0.887298, 0.410089, 0.716614, 0.265221, 0.245167, 0.812582, 0.498301},
         {0.2915, 0.990968, 0.571318, 0.947903, 0.441175, 0.584536, 0.271765, -0.449143, 1.00305, 0.920097},
         -0.23773738248694826806,
         0.81740866706756753786},
        {{0.61, 0.42, 0.77, 0.35, 0.58, 0.49, 0.66, 0.71, 0.39, 0.55},
         {0.52, 0.40, 0.69, 0.30, 0.49, 0.47, 0.55, 0.64, 0.37, 0.50},
         5.7498890849994592193,
         0.00027633511090451413039}};
    double t_err = 0.0;
    for (const auto& r : refs) {
        const auto got = paired_t_test(r.a, r.b);
        t_err = std::max({t_err, std::fabs(got.t - r.t), std::fabs(got.p - r.p)});
    }
    const bool pass = exact && analytic < 1e-5 && t_err < 1e-6;
    return {pass, fmt::format("5-query fixture exact: {} (nDCG max dev {:.1e}); |nDCG - 0.63093| {:.1e} (tol 1e-5); "
                              "t-test max dev {:.1e} (tol 1e-6)",
                              exact ? "yes" : "no", ndcg_err, analytic, t_err)};
}

// ---- 7 and 9. robustness through adversarial training ---------------------

std::vector<double> per_query(const fs::path& report, const std::string& metric = "MRR@10") {
    std::vector<double> out;
    const EvalReport loaded = EvalReport::load(report);
    for (const auto& [q, v] : loaded.metrics.at(metric).per_query) out.push_back(v);
    return out;
}

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

struct SeedRuns {
    double r_max = 0.0;
    // strategy -> {clean per-query MRR@10, qwerty_char per-query MRR@10}
    std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> mrr;
    double seconds_fgsm = 0.0;
};

const std::vector<double> kRmaxGrid{0.01, 0.1, 1.0, 3.0, 10.0};

// Base training, then each strategy resumes from the base checkpoint for the
// AT epochs. The FGSM budget is picked on dev MRR@10 over kRmaxGrid and
// eps-random uses the same budget.
SeedRuns robustness_runs(const fs::path& root, std::uint64_t seed) {
    const auto start = Clock::now();
    SynthSpec spec;
    spec.seed = seed;
    cmd_gen_corpus(spec, 20, root / "corpus");
    RunConfig base = default_config();
    base.paths.data_dir = (root / "corpus").string();
    base.model.dim = 32;
    base.training.learning_rate = 3e-3;
    base.training.seed = seed;
    base.out = (root / "base").string();
    cmd_train(base);

    auto resume = [&](Strategy strategy, double r_max, const std::string& name) {
        RunConfig c = base;
        c.at.from_checkpoint = (root / "base" / "model.ckpt").string();
        c.perturbation.strategy = strategy;
        c.perturbation.r_max = r_max;
        c.out = (root / name).string();
        return cmd_train(c);
    };
    auto evaluate = [&](const std::string& name) {
        RunConfig c = base;
        c.eval.checkpoint = (root / name / "model.ckpt").string();
        c.out = (root / ("ev_" + name)).string();
        cmd_evaluate(c);
        c.eval.variation.family = "qwerty_char";
        c.eval.variation.seed = seed;
        c.out = (root / ("evq_" + name)).string();
        cmd_evaluate(c);
        return std::pair{per_query(root / ("ev_" + name) / "report.json"), per_query(root / ("evq_" + name) / "report.json")};
    };

    SeedRuns out;
    resume(Strategy::kNone, 0.01, "plain");
    out.mrr["plain"] = evaluate("plain");
    double best_dev = -1.0;
    for (double r : kRmaxGrid) {
        const std::string name = fmt::format("fgsm_{}", r);
        const double dev = resume(Strategy::kFgsm, r, name)["best_dev_mrr"].get<double>();
        if (dev > best_dev) {
            best_dev = dev;
            out.r_max = r;
        }
    }
    out.mrr["fgsm"] = evaluate(fmt::format("fgsm_{}", out.r_max));
    out.seconds_fgsm = seconds_since(start);
    resume(Strategy::kEpsRandom, out.r_max, "eps_random");
    out.mrr["eps_random"] = evaluate("eps_random");
    resume(Strategy::kUniversal, out.r_max, "universal");
    out.mrr["universal"] = evaluate("universal");
    return out;
}

const std::vector<SeedRuns>& robustness(const fs::path& root) {
    static std::vector<SeedRuns> runs;
    if (runs.empty())
        for (std::uint64_t s = 1; s <= 3; ++s) runs.push_back(robustness_runs(root / fmt::format("seed{}", s), s));
    return runs;
}

Outcome at_robustness(const fs::path& root) {
    const auto& runs = robustness(root);
    double clean_gap = 0.0, varied_gap = 0.0, max_seconds = 0.0;
    std::size_t positive = 0;
    std::vector<double> all_fgsm, all_plain;
    std::string per_seed;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        const auto& r = runs[i];
        const double pc = mean_of(r.mrr.at("plain").first), fc = mean_of(r.mrr.at("fgsm").first);
        const double pv = mean_of(r.mrr.at("plain").second), fv = mean_of(r.mrr.at("fgsm").second);
        clean_gap += (fc - pc) / static_cast<double>(runs.size());
        varied_gap += (fv - pv) / static_cast<double>(runs.size());
        positive += fv > pv;
        max_seconds = std::max(max_seconds, r.seconds_fgsm);
        all_fgsm.insert(all_fgsm.end(), r.mrr.at("fgsm").second.begin(), r.mrr.at("fgsm").second.end());
        all_plain.insert(all_plain.end(), r.mrr.at("plain").second.begin(), r.mrr.at("plain").second.end());
        per_seed += fmt::format("\n      seed {}: r_max {:g}; clean plain {:.4f} fgsm {:.4f}; qwerty_char plain {:.4f} fgsm {:.4f}", i + 1,
                                r.r_max, pc, fc, pv, fv);
    }
    const TTestResult t = paired_t_test(all_fgsm, all_plain);
    const bool a = clean_gap >= -0.01;
    const bool b = varied_gap > 0.0 && (t.p < 0.05 || positive >= 2);
    return {a && b && max_seconds < 600.0,
            fmt::format("(a) clean gap fgsm - plain {:+.4f} (need >= -0.01); (b) qwerty_char gap {:+.4f} (need > 0), "
                        "paired t over {} queries t={:.3f} p={:.4f}, positive in {}/3 seeds; slowest configuration {:.0f}s (< 600s){}",
                        clean_gap, varied_gap, t.n, t.t, t.p, positive, max_seconds, per_seed)};
}

Outcome baseline_ordering(const fs::path& root) {
    const auto& runs = robustness(root);
    std::size_t fgsm_not_beaten = 0;
    std::string per_seed;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        std::vector<std::pair<double, std::string>> order;
        for (const char* s : {"fgsm", "universal", "eps_random"}) order.emplace_back(mean_of(runs[i].mrr.at(s).second), s);
        fgsm_not_beaten += order[2].first <= order[0].first;
        std::sort(order.rbegin(), order.rend());
        per_seed += fmt::format("\n      seed {}: qwerty_char MRR@10 {} {:.4f} > {} {:.4f} > {} {:.4f}", i + 1, order[0].second,
                                order[0].first, order[1].second, order[1].first, order[2].second, order[2].first);
    }
    return {fgsm_not_beaten >= 2, fmt::format("eps-random does not beat FGSM in {}/3 seeds (need >= 2){}", fgsm_not_beaten, per_seed)};
}

// ---- 8. domain adaptation --------------------------------------------------

Outcome domain_shift(const fs::path& root) {
    std::size_t ft_beats_zero_shot = 0, fgsm_ge_plain = 0;
    std::string per_seed;
    for (std::uint64_t s = 1; s <= 3; ++s) {
        const fs::path dir = root / fmt::format("seed{}", s);
        SynthSpec a;
        a.seed = s;
        a.salient_tokens = 20;
        SynthSpec b = a;
        b.seed = s + 100;
        b.first_topic = 20;
        b.topics = 10;
        b.train_queries = 200;
        b.dev_queries = 50;
        b.test_queries = 300;
        cmd_gen_corpus(a, 20, dir / "A");
        cmd_gen_corpus(b, 20, dir / "B");

        RunConfig base = default_config();
        base.paths.data_dir = (dir / "A").string();
        base.training.learning_rate = 3e-3;
        base.training.seed = s;
        base.out = (dir / "base").string();
        cmd_train(base);

        auto test_mrr = [&](const fs::path& ckpt, const std::string& name) {
            RunConfig c = base;
            c.paths.data_dir = (dir / "B").string();
            c.eval.checkpoint = ckpt.string();
            c.out = (dir / name).string();
            cmd_evaluate(c);
            return mean_of(per_query(dir / name / "report.json"));
        };
        const double zero_shot = test_mrr(dir / "base" / "model.ckpt", "ev_zero_shot");
        std::map<std::string, double> ft;
        for (auto [strategy, name] : {std::pair{Strategy::kNone, "plain"}, std::pair{Strategy::kFgsm, "fgsm"}}) {
            RunConfig c = base;
            c.paths.data_dir = (dir / "B").string();
            c.finetune.from_checkpoint = (dir / "base" / "model.ckpt").string();
            c.finetune.learning_rate = 3e-4;
            c.training.epochs = 100;
            c.perturbation.strategy = strategy;
            c.perturbation.r_max = 3.0;
            c.out = (dir / fmt::format("ft_{}", name)).string();
            cmd_finetune(c);
            ft[name] = test_mrr(dir / fmt::format("ft_{}", name) / "model.ckpt", fmt::format("ev_{}", name));
        }
        ft_beats_zero_shot += ft["plain"] > zero_shot && ft["fgsm"] > zero_shot;
        fgsm_ge_plain += ft["fgsm"] >= ft["plain"];
        per_seed += fmt::format("\n      seed {}: zero-shot {:.4f}, plain finetune {:.4f}, FGSM finetune {:.4f}", s, zero_shot, ft["plain"],
                                ft["fgsm"]);
    }
    return {ft_beats_zero_shot == 3 && fgsm_ge_plain >= 2,
            fmt::format("finetuning beats zero-shot in {}/3 seeds (need 3); FGSM >= plain finetune in {}/3 seeds (need >= 2){}",
                        ft_beats_zero_shot, fgsm_ge_plain, per_seed)};
}

// ---- 10. determinism -------------------------------------------------------

std::map<std::string, std::string> snapshot(const fs::path& dir) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::ifstream in(e.path(), std::ios::binary);
        std::ostringstream bytes;
        bytes << in.rdbuf();
        out[fs::relative(e.path(), dir).string()] = bytes.str();
    }
    return out;
}

Outcome determinism(const fs::path& root) {
    auto pipeline = [&] {
        fs::remove_all(root);
        SynthSpec spec;
        spec.seed = 7;
        cmd_gen_corpus(spec, 20, root / "corpus");
        RunConfig c = default_config();
        c.paths.data_dir = (root / "corpus").string();
        c.training.epochs = 1;
        c.training.seed = 7;
        c.perturbation.strategy = Strategy::kFgsm;
        c.out = (root / "train").string();
        cmd_train(c);
        c.eval.checkpoint = (root / "train" / "model.ckpt").string();
        c.out = (root / "eval").string();
        cmd_evaluate(c);
        return snapshot(root);
    };
    const auto first = pipeline();
    const auto second = pipeline();
    std::size_t differing = 0;
    for (const auto& [name, bytes] : first) differing += !second.contains(name) || second.at(name) != bytes;
    const bool pass = first.size() == second.size() && differing == 0 && first.size() > 0;
    return {pass, fmt::format("gen-corpus -> train 1 epoch (FGSM) -> evaluate, twice: {} files, {} differ", first.size(), differing)};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    advrank::testing::TempDir work("advrank_acceptance");

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"gradient correctness", gradient_correctness},
        {"loss oracles", loss_oracles},
        {"FGSM construction", fgsm_construction},
        {"backward-pass accounting", cost_accounting},
        {"universal ascent", universal_ascent},
        {"metric oracles", metric_oracles},
        {"AT robustness, clean and qwerty_char", [&] { return at_robustness(work / "robustness"); }},
        {"domain-shift finetuning", [&] { return domain_shift(work / "finetune"); }},
        {"baseline ordering", [&] { return baseline_ordering(work / "robustness"); }},
        {"pipeline determinism", [&] { return determinism(work / "determinism"); }},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.contains(id)) continue;
        const auto start = Clock::now();
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += !o.pass;
        std::printf("%s  %2d. %s [%.1fs]\n      %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), seconds_since(start),
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failed == 0 ? 0 : 1;
}
