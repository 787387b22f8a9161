#pragma once

// Ranking objectives: InfoNCE (optionally with in-batch negatives),
// margin-MSE distillation, KL between score distributions, and the joint
// clean + adversarial objective.

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advrank/tensor.hpp"

namespace advrank {

/// Clean ranking objective. KL on scores is an adversarial-loss choice and
/// lives in PerturbationConfig.
enum class Objective { kInfoNce, kMarginMse };

std::string to_string(Objective o);
Objective objective_from_string(const std::string& s);

struct LossConfig {
    Objective objective = Objective::kInfoNce;
    bool in_batch_negatives = true;
    /// Also use other queries' explicit negatives as in-batch negatives (not
    /// only their positives).
    bool in_batch_include_negatives = true;
    /// Sparse encoders only.
    double flops_weight = 1e-3;
    /// Literal -softmax(positive) instead of -log softmax(positive).
    bool raw_softmax_loss = false;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

/// Mean over rows of -log(e^{s+} / (e^{s+} + sum_j e^{s-_j})).
/// positive: [B x 1], negatives: [B x K'].
Tensor infonce(const Tensor& positive, const Tensor& negatives);
/// Same from a logits matrix whose first column is the positive score.
Tensor infonce_logits(const Tensor& logits, bool raw_softmax = false);
Tensor margin_mse(const Tensor& student_margins, const Tensor& teacher_margins);
/// Mean over rows of KL(softmax(clean) || softmax(perturbed)).
Tensor kl_scores(const Tensor& clean, const Tensor& perturbed);
/// L_clean + L_adv + flops_weight * flops. Absent terms are skipped.
Tensor total_loss(const Tensor& clean, const std::optional<Tensor>& adversarial, const std::optional<Tensor>& flops,
                  double flops_weight);

/// Number of negatives each query is scored against.
std::size_t effective_negatives(std::size_t batch_size, std::size_t negatives_per_query, const LossConfig& config);

/// Builds the per-query logits matrix [B x (1 + K')] (positive first) from
/// the full score matrix of B queries against [B positives ; B*K negatives].
Tensor ranking_logits(const Tensor& all_scores, std::size_t batch_size, std::size_t negatives_per_query,
                      const LossConfig& config);
/// Student margins s+ - s-_j over each query's own negatives: [B x K].
Tensor student_margins(const Tensor& all_scores, std::size_t batch_size, std::size_t negatives_per_query);

}  // namespace advrank
