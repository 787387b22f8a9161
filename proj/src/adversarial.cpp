#include "advrank/adversarial.hpp"

#include <array>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace advrank {

namespace {

constexpr double kDegenerateNorm = 1e-12;

const char* to_cstr(NormScope s) { return s == NormScope::kJointTriplet ? "joint_triplet" : "per_part"; }
const char* to_cstr(SignConvention s) { return s == SignConvention::kAscent ? "ascent" : "paper_literal"; }
const char* to_cstr(AdversarialLoss l) { return l == AdversarialLoss::kRanking ? "ranking" : "kl_scores"; }

NormScope scope_from_string(const std::string& s) {
    if (s == "joint_triplet") return NormScope::kJointTriplet;
    if (s == "per_part") return NormScope::kPerPart;
    throw std::invalid_argument("unknown norm scope '" + s + "' (expected joint_triplet|per_part)");
}

SignConvention sign_from_string(const std::string& s) {
    if (s == "ascent") return SignConvention::kAscent;
    if (s == "paper_literal") return SignConvention::kPaperLiteral;
    throw std::invalid_argument("unknown sign convention '" + s + "' (expected ascent|paper_literal)");
}

AdversarialLoss adversarial_loss_from_string(const std::string& s) {
    if (s == "ranking") return AdversarialLoss::kRanking;
    if (s == "kl_scores") return AdversarialLoss::kKlScores;
    throw std::invalid_argument("unknown adversarial loss '" + s + "' (expected ranking|kl_scores)");
}

}  // namespace

std::string to_string(Strategy s) {
    switch (s) {
        case Strategy::kNone: return "none";
        case Strategy::kFgsm: return "fgsm";
        case Strategy::kUniversal: return "universal";
        case Strategy::kEpsRandom: return "eps_random";
        case Strategy::kTokenRandom: return "token_random";
    }
    return "?";
}

Strategy strategy_from_string(const std::string& s) {
    if (s == "none") return Strategy::kNone;
    if (s == "fgsm") return Strategy::kFgsm;
    if (s == "universal") return Strategy::kUniversal;
    if (s == "eps_random") return Strategy::kEpsRandom;
    if (s == "token_random") return Strategy::kTokenRandom;
    throw std::invalid_argument("unknown perturbation strategy '" + s + "' (expected none|fgsm|universal|eps_random|token_random)");
}

void PerturbationConfig::validate() const {
    if (!(r_max > 0.0)) throw std::invalid_argument("perturbation r_max must be > 0");
    if (!(replacement_rate >= 0.0 && replacement_rate <= 1.0)) throw std::invalid_argument("token replacement rate must be in [0, 1]");
    if (universal_clip && !(*universal_clip > 0.0)) throw std::invalid_argument("universal norm clip must be > 0");
}

void to_json(nlohmann::json& j, const PerturbationConfig& c) {
    j = nlohmann::json{{"strategy", to_string(c.strategy)},
                       {"r_max", c.r_max},
                       {"scope", to_cstr(c.scope)},
                       {"sign", to_cstr(c.sign)},
                       {"adversarial_loss", to_cstr(c.adversarial_loss)},
                       {"replacement_rate", c.replacement_rate},
                       {"universal_lr", c.universal_lr}};
    j["universal_clip"] = c.universal_clip ? nlohmann::json(*c.universal_clip) : nlohmann::json(nullptr);
}

void from_json(const nlohmann::json& j, PerturbationConfig& c) {
    PerturbationConfig d;
    c.strategy = strategy_from_string(j.value("strategy", to_string(d.strategy)));
    c.r_max = j.value("r_max", d.r_max);
    c.scope = scope_from_string(j.value("scope", std::string(to_cstr(d.scope))));
    c.sign = sign_from_string(j.value("sign", std::string(to_cstr(d.sign))));
    c.adversarial_loss = adversarial_loss_from_string(j.value("adversarial_loss", std::string(to_cstr(d.adversarial_loss))));
    c.replacement_rate = j.value("replacement_rate", d.replacement_rate);
    c.universal_lr = j.value("universal_lr", d.universal_lr);
    c.universal_clip.reset();
    if (j.contains("universal_clip") && !j["universal_clip"].is_null()) c.universal_clip = j["universal_clip"].get<double>();
    c.validate();
}

// ---- batch forward ---------------------------------------------------------

BatchEmbeddings embed_batch(const EncoderModel& model, const TripletBatch& batch) {
    return {embed_tokens(model, batch.queries, Side::kQuery), embed_tokens(model, batch.positives, Side::kDocument),
            embed_tokens(model, batch.negatives, Side::kDocument)};
}

BatchForward forward_batch(const EncoderModel& model, const BatchEmbeddings& emb) {
    BatchForward f;
    f.query_vectors = encode(model, emb.queries, Side::kQuery);
    f.doc_vectors = concat_rows(encode(model, emb.positives, Side::kDocument), encode(model, emb.negatives, Side::kDocument));
    f.scores = score(f.query_vectors, f.doc_vectors);
    return f;
}

Tensor ranking_loss(const BatchForward& fwd, const TripletBatch& batch, const LossConfig& config) {
    const std::size_t b = batch.size(), k = batch.negatives_per_query;
    if (config.objective == Objective::kMarginMse) {
        if (!batch.teacher_margins) throw std::invalid_argument("margin_mse objective needs teacher margins in the batch");
        Tensor teacher = Tensor::from({b, k}, *batch.teacher_margins);
        return margin_mse(student_margins(fwd.scores, b, k), teacher);
    }
    return infonce_logits(ranking_logits(fwd.scores, b, k, config), config.raw_softmax_loss);
}

Tensor batch_flops(const BatchForward& fwd) { return add(flops_value(fwd.query_vectors), flops_value(fwd.doc_vectors)); }

// ---- perturbation layout ---------------------------------------------------

namespace {

enum Part : std::size_t { kQ = 0, kP = 1, kN = 2 };

struct Layout {
    std::size_t batch = 0, k = 0, dim = 0;
    std::array<std::size_t, 3> length{};
    std::array<const std::vector<double>*, 3> mask{};

    std::size_t seqs(std::size_t part) const { return part == kN ? batch * k : batch; }

    std::size_t units(NormScope scope) const { return scope == NormScope::kJointTriplet ? batch : batch * (2 + k); }

    std::size_t unit_of(std::size_t part, std::size_t seq, NormScope scope) const {
        if (scope == NormScope::kJointTriplet) return part == kN ? seq / k : seq;
        if (part == kN) return (seq / k) * (2 + k) + 2 + seq % k;
        return seq * (2 + k) + part;
    }
};

Layout layout_of(const TripletBatch& batch, std::size_t dim) {
    Layout l;
    l.batch = batch.size();
    l.k = batch.negatives_per_query;
    l.dim = dim;
    l.length = {batch.queries.max_len, batch.positives.max_len, batch.negatives.max_len};
    return l;
}

// Scales each scope unit of `raw` (already zero at pad rows) to norm r_max.
Perturbation normalize_units(std::array<std::vector<double>, 3> raw, const Layout& l, NormScope scope, double r_max) {
    std::vector<double> sumsq(l.units(scope), 0.0);
    for (std::size_t part = 0; part < 3; ++part) {
        const std::size_t row_len = l.length[part] * l.dim;
        for (std::size_t s = 0; s < l.seqs(part); ++s) {
            double acc = 0.0;
            for (std::size_t i = s * row_len; i < (s + 1) * row_len; ++i) acc += raw[part][i] * raw[part][i];
            sumsq[l.unit_of(part, s, scope)] += acc;
        }
    }
    Perturbation p;
    std::vector<double> factor(sumsq.size(), 0.0);
    for (std::size_t u = 0; u < sumsq.size(); ++u) {
        const double norm = std::sqrt(sumsq[u]);
        if (norm < kDegenerateNorm) {
            ++p.degenerate_units;
        } else {
            factor[u] = r_max / norm;
        }
    }
    for (std::size_t part = 0; part < 3; ++part) {
        const std::size_t row_len = l.length[part] * l.dim;
        for (std::size_t s = 0; s < l.seqs(part); ++s) {
            const double f = factor[l.unit_of(part, s, scope)];
            for (std::size_t i = s * row_len; i < (s + 1) * row_len; ++i) raw[part][i] *= f;
        }
    }
    p.queries = Tensor::from({l.batch * l.length[kQ], l.dim}, std::move(raw[kQ]));
    p.positives = Tensor::from({l.batch * l.length[kP], l.dim}, std::move(raw[kP]));
    p.negatives = Tensor::from({l.batch * l.k * l.length[kN], l.dim}, std::move(raw[kN]));
    return p;
}

std::vector<double> masked_copy(std::span<const double> values, const std::vector<double>& mask, std::size_t dim, double sign) {
    std::vector<double> out(values.size());
    for (std::size_t r = 0; r < mask.size(); ++r)
        for (std::size_t j = 0; j < dim; ++j) out[r * dim + j] = mask[r] != 0.0 ? sign * values[r * dim + j] : 0.0;
    return out;
}

Tensor mask_matrix(const std::vector<double>& mask, std::size_t dim) {
    std::vector<double> out(mask.size() * dim);
    for (std::size_t r = 0; r < mask.size(); ++r)
        for (std::size_t j = 0; j < dim; ++j) out[r * dim + j] = mask[r];
    return Tensor::from({mask.size(), dim}, std::move(out));
}

}  // namespace

BatchEmbeddings Perturbation::apply(const BatchEmbeddings& emb) const {
    return {perturbed(emb.queries, queries), perturbed(emb.positives, positives), perturbed(emb.negatives, negatives)};
}

std::vector<double> unit_norms(const Perturbation& p, const TripletBatch& batch, NormScope scope) {
    const Layout l = layout_of(batch, p.queries.cols());
    std::vector<double> sumsq(l.units(scope), 0.0);
    const std::array<std::span<const double>, 3> parts{p.queries.data(), p.positives.data(), p.negatives.data()};
    for (std::size_t part = 0; part < 3; ++part) {
        const std::size_t row_len = l.length[part] * l.dim;
        for (std::size_t s = 0; s < l.seqs(part); ++s)
            for (std::size_t i = s * row_len; i < (s + 1) * row_len; ++i) sumsq[l.unit_of(part, s, scope)] += parts[part][i] * parts[part][i];
    }
    for (auto& v : sumsq) v = std::sqrt(v);
    return sumsq;
}

Perturbation fgsm_from_gradients(const BatchEmbeddings& emb, const TripletBatch& batch, const PerturbationConfig& config) {
    const std::array<const EmbeddedTokens*, 3> parts{&emb.queries, &emb.positives, &emb.negatives};
    for (const auto* p : parts) {
        if (!p->values.has_grad()) throw std::logic_error("fgsm: token embeddings carry no gradient; run backward on the loss first");
    }
    const std::size_t dim = emb.queries.values.cols();
    const double sign = config.sign == SignConvention::kAscent ? 1.0 : -1.0;
    std::array<std::vector<double>, 3> raw;
    for (std::size_t i = 0; i < 3; ++i) raw[i] = masked_copy(parts[i]->values.grad(), parts[i]->mask, dim, sign);
    return normalize_units(std::move(raw), layout_of(batch, dim), config.scope, config.r_max);
}

Perturbation fgsm_perturbation(const EncoderModel& model, const TripletBatch& batch, const LossConfig& loss,
                               const PerturbationConfig& config) {
    BatchEmbeddings emb = embed_batch(model, batch);
    backward(ranking_loss(forward_batch(model, emb), batch, loss));
    return fgsm_from_gradients(emb, batch, config);
}

Perturbation eps_random_perturbation(const TripletBatch& batch, std::size_t dim, const PerturbationConfig& config,
                                     std::mt19937_64& rng) {
    const Layout l = layout_of(batch, dim);
    const std::array<std::vector<double>, 3> masks{batch.queries.mask(), batch.positives.mask(), batch.negatives.mask()};
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::array<std::vector<double>, 3> raw;
    for (std::size_t part = 0; part < 3; ++part) {
        raw[part].assign(masks[part].size() * dim, 0.0);
        for (std::size_t r = 0; r < masks[part].size(); ++r) {
            if (masks[part][r] == 0.0) continue;
            for (std::size_t j = 0; j < dim; ++j) raw[part][r * dim + j] = gauss(rng);
        }
    }
    return normalize_units(std::move(raw), l, config.scope, config.r_max);
}

TripletBatch token_random_augment(const TripletBatch& batch, double rate, std::size_t vocab_size, std::mt19937_64& rng) {
    if (!(rate >= 0.0 && rate <= 1.0)) throw std::invalid_argument("token replacement rate must be in [0, 1]");
    if (vocab_size <= Vocabulary::kSpecialCount) throw std::invalid_argument("token_random_augment: vocabulary has no regular tokens");
    TripletBatch out = batch;
    std::bernoulli_distribution replace(rate);
    std::uniform_int_distribution<TokenId> pick(static_cast<TokenId>(Vocabulary::kSpecialCount), static_cast<TokenId>(vocab_size - 1));
    for (auto* seqs : {&out.queries, &out.positives, &out.negatives})
        for (auto& id : seqs->ids) {
            if (id == Vocabulary::kPad) continue;
            if (replace(rng)) id = pick(rng);
        }
    return out;
}

UniversalState UniversalState::zeros(std::size_t dim) { return {Tensor::zeros({1, dim}, true)}; }

double UniversalState::norm() const {
    double s = 0.0;
    for (double v : epsilon.data()) s += v * v;
    return std::sqrt(s);
}

Perturbation universal_perturbation(const UniversalState& state, const BatchEmbeddings& emb) {
    auto spread = [&](const EmbeddedTokens& t) {
        return mul(broadcast_rows(state.epsilon, t.values.rows()), mask_matrix(t.mask, t.values.cols()));
    };
    return {spread(emb.queries), spread(emb.positives), spread(emb.negatives), 0};
}

// ---- training step ---------------------------------------------------------

namespace {

Tensor adversarial_objective(const BatchForward& clean, const BatchForward& adv, const TripletBatch& batch,
                             const LossConfig& loss, const PerturbationConfig& config) {
    if (config.adversarial_loss == AdversarialLoss::kKlScores) {
        const std::size_t b = batch.size(), k = batch.negatives_per_query;
        return kl_scores(ranking_logits(clean.scores, b, k, loss), ranking_logits(adv.scores, b, k, loss));
    }
    return ranking_loss(adv, batch, loss);
}

std::optional<Tensor> flops_term(const EncoderModel& model, const BatchForward& fwd) {
    if (model.config().kind != EncoderKind::kSparse) return std::nullopt;
    return batch_flops(fwd);
}

}  // namespace

Tensor total_objective(const EncoderModel& model, const TripletBatch& batch, const Perturbation& delta,
                       const LossConfig& loss, const PerturbationConfig& config) {
    const BatchEmbeddings emb = embed_batch(model, batch);
    const BatchForward clean = forward_batch(model, emb);
    const BatchForward adv = forward_batch(model, delta.apply(emb));
    return total_loss(ranking_loss(clean, batch, loss), adversarial_objective(clean, adv, batch, loss, config),
                      flops_term(model, clean), loss.flops_weight);
}

StepResult universal_step(UniversalState& state, const EncoderModel& model, const TripletBatch& batch,
                          const LossConfig& loss, const PerturbationConfig& config) {
    const auto passes_before = backward_pass_count();
    state.epsilon.zero_grad();
    BatchEmbeddings emb = embed_batch(model, batch);
    BatchForward clean = forward_batch(model, emb);
    Tensor clean_loss = ranking_loss(clean, batch, loss);
    BatchForward adv = forward_batch(model, universal_perturbation(state, emb).apply(emb));
    Tensor adv_loss = adversarial_objective(clean, adv, batch, loss, config);
    auto flops = flops_term(model, clean);
    backward(total_loss(clean_loss, adv_loss, flops, loss.flops_weight));

    // Opposite objective: ascend the loss on epsilon.
    auto eps = state.epsilon.mutable_data();
    auto g = state.epsilon.grad();
    for (std::size_t j = 0; j < eps.size(); ++j) eps[j] += config.universal_lr * g[j];
    if (config.universal_clip) {
        const double n = state.norm();
        if (n > *config.universal_clip)
            for (auto& v : eps) v *= *config.universal_clip / n;
    }

    StepResult r;
    r.clean_loss = clean_loss.item();
    r.adversarial_loss = adv_loss.item();
    if (flops) r.flops = flops->item();
    r.backward_passes = backward_pass_count() - passes_before;
    return r;
}

StepResult training_step(const EncoderModel& model, const TripletBatch& batch, const LossConfig& loss,
                         const PerturbationConfig& config, PerturbationState& state) {
    if (config.strategy == Strategy::kUniversal) return universal_step(state.universal, model, batch, loss, config);

    const auto passes_before = backward_pass_count();
    StepResult r;
    BatchEmbeddings emb = embed_batch(model, batch);
    BatchForward clean = forward_batch(model, emb);
    Tensor clean_loss = ranking_loss(clean, batch, loss);
    auto flops = flops_term(model, clean);
    r.clean_loss = clean_loss.item();
    if (flops) r.flops = flops->item();

    switch (config.strategy) {
        case Strategy::kNone:
            backward(total_loss(clean_loss, std::nullopt, flops, loss.flops_weight));
            break;
        case Strategy::kFgsm: {
            // First pass: clean-loss gradients for the parameters and the
            // direction g_i for the token embeddings. The KL adversarial loss
            // has zero gradient at zero perturbation, so the direction always
            // comes from the ranking loss.
            backward(total_loss(clean_loss, std::nullopt, flops, loss.flops_weight));
            Perturbation delta = fgsm_from_gradients(emb, batch, config);
            r.degenerate_units = delta.degenerate_units;
            BatchForward adv = forward_batch(model, delta.apply(emb));
            Tensor adv_loss = adversarial_objective(clean, adv, batch, loss, config);
            r.adversarial_loss = adv_loss.item();
            backward(adv_loss);
            break;
        }
        case Strategy::kEpsRandom: {
            Perturbation delta = eps_random_perturbation(batch, emb.queries.values.cols(), config, state.rng);
            BatchForward adv = forward_batch(model, delta.apply(emb));
            Tensor adv_loss = adversarial_objective(clean, adv, batch, loss, config);
            r.adversarial_loss = adv_loss.item();
            backward(total_loss(clean_loss, adv_loss, flops, loss.flops_weight));
            break;
        }
        case Strategy::kTokenRandom: {
            TripletBatch augmented = token_random_augment(batch, config.replacement_rate, model.config().vocab_size, state.rng);
            BatchForward adv = forward_batch(model, embed_batch(model, augmented));
            Tensor adv_loss = adversarial_objective(clean, adv, augmented, loss, config);
            r.adversarial_loss = adv_loss.item();
            backward(total_loss(clean_loss, adv_loss, flops, loss.flops_weight));
            break;
        }
        case Strategy::kUniversal:
            break;
    }
    r.backward_passes = backward_pass_count() - passes_before;
    return r;
}

}  // namespace advrank
