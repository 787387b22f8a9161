#pragma once

// Toy bi-encoders: a dense mean-pooling encoder and a sparse encoder that
// maps each token to vocabulary-space logits, applies log(1 + relu(.)) and
// max-pools over positions.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "advrank/tensor.hpp"
#include "advrank/text.hpp"

namespace advrank {

enum class EncoderKind { kDense, kSparse };
enum class Side { kQuery, kDocument };

std::string to_string(EncoderKind kind);
EncoderKind encoder_kind_from_string(const std::string& s);

struct EncoderConfig {
    EncoderKind kind = EncoderKind::kDense;
    std::size_t vocab_size = 0;
    std::size_t dim = 32;
    /// Number of (weight, bias) transform layers, relu between consecutive ones.
    std::size_t layers = 1;
    /// Sparse only: project with the transposed embedding table.
    bool tied_projection = true;
    /// Query and document towers share every weight.
    bool shared_encoders = true;
    /// Standard deviation of the embedding initialization; 0 picks 1/sqrt(dim).
    double init_scale = 1.0;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct Linear {
    Tensor weight;  // [d x d]
    Tensor bias;    // [1 x d]
};

struct Tower {
    Tensor embedding;  // [V x d]
    std::vector<Linear> layers;
    Tensor projection;  // [V x d], sparse + untied only
};

class EncoderModel {
public:
    EncoderModel() = default;
    static EncoderModel init(const EncoderConfig& config, std::uint64_t seed);

    const EncoderConfig& config() const { return config_; }
    const Tower& tower(Side side) const;
    std::size_t output_dim() const;

    /// Named parameters in a fixed order; names are stable across save/load.
    ParameterList parameters() const;
    /// Deep copy with fresh parameter tensors.
    EncoderModel clone() const;

private:
    EncoderConfig config_;
    Tower query_;
    Tower document_;  // unused when shared_encoders
};

/// Token embeddings of `count` sequences laid out as [count * length x d].
struct EmbeddedTokens {
    Tensor values;
    std::vector<double> mask;  // one entry per row, 1 for real tokens
    std::size_t count = 0;
    std::size_t length = 0;
};

EmbeddedTokens embed_tokens(const EncoderModel& model, const PaddedSequences& seqs, Side side);
/// Same layout and mask with `delta` ([count * length x d]) added to the values.
EmbeddedTokens perturbed(const EmbeddedTokens& tokens, const Tensor& delta);

/// Masked mean over positions followed by the transform layers: [count x d].
Tensor encode_dense(const EncoderModel& model, const EmbeddedTokens& tokens, Side side);
/// Per-token vocabulary logits, log(1 + relu(.)), masked max: [count x V].
Tensor encode_sparse(const EncoderModel& model, const EmbeddedTokens& tokens, Side side);
/// Dispatches on the model kind.
Tensor encode(const EncoderModel& model, const EmbeddedTokens& tokens, Side side);
Tensor encode_sequences(const EncoderModel& model, const PaddedSequences& seqs, Side side);

/// Dot-product score matrix [B x M].
Tensor score(const Tensor& queries, const Tensor& docs);
/// FLOPS regularizer: sum_j (mean_i w_ij)^2.
Tensor flops_value(const Tensor& sparse_vectors);

}  // namespace advrank
