#include "advrank/losses.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace advrank {

std::string to_string(Objective o) {
    switch (o) {
        case Objective::kInfoNce: return "infonce";
        case Objective::kMarginMse: return "margin_mse";
    }
    return "?";
}

Objective objective_from_string(const std::string& s) {
    if (s == "infonce") return Objective::kInfoNce;
    if (s == "margin_mse") return Objective::kMarginMse;
    throw std::invalid_argument("unknown objective '" + s + "' (expected infonce|margin_mse; kl_scores is set as the adversarial loss)");
}

void to_json(nlohmann::json& j, const LossConfig& c) {
    j = nlohmann::json{{"objective", to_string(c.objective)},
                       {"in_batch_negatives", c.in_batch_negatives},
                       {"in_batch_include_negatives", c.in_batch_include_negatives},
                       {"flops_weight", c.flops_weight},
                       {"raw_softmax_loss", c.raw_softmax_loss}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
    LossConfig d;
    c.objective = objective_from_string(j.value("objective", to_string(d.objective)));
    c.in_batch_negatives = j.value("in_batch_negatives", d.in_batch_negatives);
    c.in_batch_include_negatives = j.value("in_batch_include_negatives", d.in_batch_include_negatives);
    c.flops_weight = j.value("flops_weight", d.flops_weight);
    c.raw_softmax_loss = j.value("raw_softmax_loss", d.raw_softmax_loss);
}

namespace {

void require_finite(const Tensor& t, const char* what) {
    auto d = t.data();
    const std::size_t m = t.cols();
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (!std::isfinite(d[i])) {
            throw std::domain_error(std::string(what) + ": non-finite score in batch row " + std::to_string(i / m));
        }
    }
}

}  // namespace

Tensor infonce_logits(const Tensor& logits, bool raw_softmax) {
    require_finite(logits, "infonce");
    const std::size_t b = logits.rows();
    std::vector<std::size_t> first(b, 0);
    Tensor positive = gather_cols(logits, first, 1);
    if (raw_softmax) {
        return scale(sum(exp(sub(positive, logsumexp_rows(logits)))), -1.0 / static_cast<double>(b));
    }
    return mean(sub(logsumexp_rows(logits), positive));
}

Tensor infonce(const Tensor& positive, const Tensor& negatives) {
    if (positive.cols() != 1 || positive.rows() != negatives.rows()) {
        throw std::invalid_argument("infonce: positive " + shape_string(positive.shape()) + " and negatives " +
                                    shape_string(negatives.shape()) + " do not align");
    }
    return infonce_logits(concat_cols(positive, negatives));
}

Tensor margin_mse(const Tensor& student_margins, const Tensor& teacher_margins) {
    if (!teacher_margins.defined()) throw std::invalid_argument("margin_mse: teacher margins missing");
    if (student_margins.shape() != teacher_margins.shape()) {
        throw std::invalid_argument("margin_mse: student " + shape_string(student_margins.shape()) + " vs teacher " +
                                    shape_string(teacher_margins.shape()));
    }
    require_finite(teacher_margins, "margin_mse");
    return mean(square(sub(student_margins, teacher_margins)));
}

Tensor kl_scores(const Tensor& clean, const Tensor& perturbed) {
    if (clean.shape() != perturbed.shape()) {
        throw std::invalid_argument("kl_scores: shape mismatch " + shape_string(clean.shape()) + " vs " + shape_string(perturbed.shape()));
    }
    Tensor log_p = log_softmax_rows(clean);
    Tensor log_q = log_softmax_rows(perturbed);
    Tensor kl = sum(mul(softmax_rows(clean), sub(log_p, log_q)));
    return scale(kl, 1.0 / static_cast<double>(clean.rows()));
}

Tensor total_loss(const Tensor& clean, const std::optional<Tensor>& adversarial, const std::optional<Tensor>& flops,
                  double flops_weight) {
    Tensor total = clean;
    if (adversarial) total = add(total, *adversarial);
    if (flops && flops_weight != 0.0) total = add(total, scale(*flops, flops_weight));
    return total;
}

std::size_t effective_negatives(std::size_t batch_size, std::size_t negatives_per_query, const LossConfig& config) {
    if (!config.in_batch_negatives) return negatives_per_query;
    const std::size_t per_other = config.in_batch_include_negatives ? 1 + negatives_per_query : 1;
    return negatives_per_query + (batch_size - 1) * per_other;
}

Tensor ranking_logits(const Tensor& all_scores, std::size_t batch_size, std::size_t negatives_per_query,
                      const LossConfig& config) {
    const std::size_t b = batch_size, k = negatives_per_query;
    if (all_scores.rows() != b || all_scores.cols() != b * (1 + k)) {
        throw std::invalid_argument("ranking_logits: score matrix " + shape_string(all_scores.shape()) + " does not match B=" +
                                    std::to_string(b) + ", K=" + std::to_string(k));
    }
    const std::size_t width = 1 + effective_negatives(b, k, config);
    std::vector<std::size_t> idx;
    idx.reserve(b * width);
    for (std::size_t i = 0; i < b; ++i) {
        idx.push_back(i);
        for (std::size_t j = 0; j < k; ++j) idx.push_back(b + i * k + j);
        if (!config.in_batch_negatives) continue;
        for (std::size_t o = 0; o < b; ++o) {
            if (o == i) continue;
            idx.push_back(o);
            if (config.in_batch_include_negatives)
                for (std::size_t j = 0; j < k; ++j) idx.push_back(b + o * k + j);
        }
    }
    return gather_cols(all_scores, idx, width);
}

Tensor student_margins(const Tensor& all_scores, std::size_t batch_size, std::size_t negatives_per_query) {
    const std::size_t b = batch_size, k = negatives_per_query;
    if (all_scores.rows() != b || all_scores.cols() != b * (1 + k)) {
        throw std::invalid_argument("student_margins: score matrix " + shape_string(all_scores.shape()) + " does not match B=" +
                                    std::to_string(b) + ", K=" + std::to_string(k));
    }
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            pos.push_back(i);
            neg.push_back(b + i * k + j);
        }
    return sub(gather_cols(all_scores, pos, k), gather_cols(all_scores, neg, k));
}

}  // namespace advrank
