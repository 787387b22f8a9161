#pragma once

// Embedding-space perturbations for adversarial training.
//
// A perturbation is an additive displacement of the token embeddings of a
// triplet batch (queries, positives and every negative). FGSM takes one
// gradient step of fixed L2 norm r_max; the universal strategy learns one
// shared d-vector by gradient ascent; eps-random draws an isotropic
// direction of the same norm; token-random swaps token ids instead.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>

#include <nlohmann/json_fwd.hpp>

#include "advrank/encoder.hpp"
#include "advrank/losses.hpp"
#include "advrank/tensor.hpp"
#include "advrank/text.hpp"

namespace advrank {

enum class Strategy { kNone, kFgsm, kUniversal, kEpsRandom, kTokenRandom };
/// kJointTriplet: one budget over (query, positive, all negatives) of a
/// triplet. kPerPart: one budget per sequence.
enum class NormScope { kJointTriplet, kPerPart };
/// kAscent moves along +g/|g| (maximizes the loss); kPaperLiteral uses -g/|g|.
enum class SignConvention { kAscent, kPaperLiteral };
enum class AdversarialLoss { kRanking, kKlScores };

std::string to_string(Strategy s);
Strategy strategy_from_string(const std::string& s);

struct PerturbationConfig {
    Strategy strategy = Strategy::kNone;
    double r_max = 0.01;
    NormScope scope = NormScope::kJointTriplet;
    SignConvention sign = SignConvention::kAscent;
    AdversarialLoss adversarial_loss = AdversarialLoss::kRanking;
    double replacement_rate = 0.15;
    double universal_lr = 1e-2;
    std::optional<double> universal_clip;

    void validate() const;
};

void to_json(nlohmann::json& j, const PerturbationConfig& c);
void from_json(const nlohmann::json& j, PerturbationConfig& c);

// ---- batch forward ---------------------------------------------------------

struct BatchEmbeddings {
    EmbeddedTokens queries;
    EmbeddedTokens positives;
    EmbeddedTokens negatives;
};

BatchEmbeddings embed_batch(const EncoderModel& model, const TripletBatch& batch);

struct BatchForward {
    Tensor scores;  // [B x B(1+K)]: queries against [positives ; negatives]
    Tensor query_vectors;
    Tensor doc_vectors;
};

BatchForward forward_batch(const EncoderModel& model, const BatchEmbeddings& emb);
/// infonce (with the configured in-batch negatives) or margin-MSE.
Tensor ranking_loss(const BatchForward& fwd, const TripletBatch& batch, const LossConfig& config);
/// FLOPS of query and document vectors (sparse models only).
Tensor batch_flops(const BatchForward& fwd);

// ---- perturbations ---------------------------------------------------------

struct Perturbation {
    Tensor queries;    // same layout as BatchEmbeddings::queries.values
    Tensor positives;
    Tensor negatives;
    /// Scope units whose direction was undefined (zero gradient); their delta is zero.
    std::size_t degenerate_units = 0;

    BatchEmbeddings apply(const BatchEmbeddings& emb) const;
};

/// L2 norm of each scope unit of a perturbation, in unit order (triplet
/// order for the joint scope; q, d+, d-_1..K per triplet for per-part).
std::vector<double> unit_norms(const Perturbation& p, const TripletBatch& batch, NormScope scope);

/// FGSM direction from gradients already accumulated on `emb` (a backward
/// pass of the loss must have run). Pad rows are zeroed before normalizing.
Perturbation fgsm_from_gradients(const BatchEmbeddings& emb, const TripletBatch& batch, const PerturbationConfig& config);
/// Runs one forward + backward of the clean ranking loss and returns the
/// FGSM perturbation. Parameter gradients accumulate as a side effect.
Perturbation fgsm_perturbation(const EncoderModel& model, const TripletBatch& batch, const LossConfig& loss,
                               const PerturbationConfig& config);
Perturbation eps_random_perturbation(const TripletBatch& batch, std::size_t dim, const PerturbationConfig& config,
                                     std::mt19937_64& rng);
/// Each non-pad token independently replaced with probability `rate` by a
/// uniform non-special id.
TripletBatch token_random_augment(const TripletBatch& batch, double rate, std::size_t vocab_size, std::mt19937_64& rng);

struct UniversalState {
    Tensor epsilon;  // [1 x d], requires grad

    static UniversalState zeros(std::size_t dim);
    double norm() const;
};

/// Universal perturbation broadcast to every non-pad token of the batch.
Perturbation universal_perturbation(const UniversalState& state, const BatchEmbeddings& emb);

// ---- training step ---------------------------------------------------------

struct StepResult {
    double clean_loss = 0.0;
    std::optional<double> adversarial_loss;
    std::optional<double> flops;
    std::uint64_t backward_passes = 0;
    std::size_t degenerate_units = 0;
};

/// Mutable per-run state of the perturbation strategies.
struct PerturbationState {
    explicit PerturbationState(std::uint64_t seed, std::size_t dim) : rng(seed), universal(UniversalState::zeros(dim)) {}
    std::mt19937_64 rng;
    UniversalState universal;
};

/// L_total at a fixed perturbation: clean ranking loss, adversarial loss at
/// `delta` and, for sparse models, the weighted FLOPS term.
Tensor total_objective(const EncoderModel& model, const TripletBatch& batch, const Perturbation& delta,
                       const LossConfig& loss, const PerturbationConfig& config);

/// Accumulates d(L_total)/d(params) into the model's gradients for one
/// batch. FGSM runs two backward passes (the first also yields the clean
/// loss gradient), every other strategy one. Does not apply an optimizer
/// update; the universal strategy does update its own epsilon (ascent).
StepResult training_step(const EncoderModel& model, const TripletBatch& batch, const LossConfig& loss,
                         const PerturbationConfig& config, PerturbationState& state);

/// One universal-AT step: clean + adversarial loss, a single backward pass,
/// gradient ascent on epsilon. Model gradients accumulate.
StepResult universal_step(UniversalState& state, const EncoderModel& model, const TripletBatch& batch,
                          const LossConfig& loss, const PerturbationConfig& config);

}  // namespace advrank
