#include "advrank/encoder.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace advrank {

std::string to_string(EncoderKind kind) { return kind == EncoderKind::kDense ? "dense" : "sparse"; }

EncoderKind encoder_kind_from_string(const std::string& s) {
    if (s == "dense") return EncoderKind::kDense;
    if (s == "sparse") return EncoderKind::kSparse;
    throw std::invalid_argument("unknown encoder kind '" + s + "' (expected dense|sparse)");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
    j = nlohmann::json{{"kind", to_string(c.kind)},
                       {"vocab_size", c.vocab_size},
                       {"dim", c.dim},
                       {"layers", c.layers},
                       {"tied_projection", c.tied_projection},
                       {"shared_encoders", c.shared_encoders},
                       {"init_scale", c.init_scale}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
    EncoderConfig d;
    c.kind = encoder_kind_from_string(j.value("kind", to_string(d.kind)));
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.dim = j.value("dim", d.dim);
    c.layers = j.value("layers", d.layers);
    c.tied_projection = j.value("tied_projection", d.tied_projection);
    c.shared_encoders = j.value("shared_encoders", d.shared_encoders);
    c.init_scale = j.value("init_scale", d.init_scale);
}

namespace {

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> data(shape_numel(shape));
    for (auto& v : data) v = dist(rng);
    return Tensor::from(std::move(shape), std::move(data), true);
}

Tower init_tower(const EncoderConfig& c, std::mt19937_64& rng) {
    const double emb_scale = c.init_scale > 0.0 ? c.init_scale : 1.0 / std::sqrt(static_cast<double>(c.dim));
    Tower t;
    t.embedding = normal_tensor({c.vocab_size, c.dim}, emb_scale, rng);
    // Near-identity transforms keep the untrained encoder close to bag-of-embeddings matching.
    for (std::size_t l = 0; l < c.layers; ++l) {
        Tensor w = normal_tensor({c.dim, c.dim}, 0.1 / std::sqrt(static_cast<double>(c.dim)), rng);
        auto wd = w.mutable_data();
        for (std::size_t i = 0; i < c.dim; ++i) wd[i * c.dim + i] += 1.0;
        t.layers.push_back({w, Tensor::zeros({1, c.dim}, true)});
    }
    if (c.kind == EncoderKind::kSparse && !c.tied_projection) t.projection = normal_tensor({c.vocab_size, c.dim}, emb_scale, rng);
    return t;
}

void append_tower(ParameterList& out, const Tower& t, const std::string& prefix) {
    out.push_back({prefix + "embedding", t.embedding});
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        out.push_back({prefix + "layer" + std::to_string(l) + ".weight", t.layers[l].weight});
        out.push_back({prefix + "layer" + std::to_string(l) + ".bias", t.layers[l].bias});
    }
    if (t.projection.defined()) out.push_back({prefix + "projection", t.projection});
}

Tower clone_tower(const Tower& t) {
    auto copy = [](const Tensor& x) { return x.defined() ? x.detach().set_requires_grad(true) : Tensor{}; };
    Tower c;
    c.embedding = copy(t.embedding);
    for (const auto& l : t.layers) c.layers.push_back({copy(l.weight), copy(l.bias)});
    c.projection = copy(t.projection);
    return c;
}

Tensor transform(const Tower& t, Tensor h) {
    for (std::size_t l = 0; l < t.layers.size(); ++l) {
        if (l > 0) h = relu(h);
        h = add(matmul(h, t.layers[l].weight), t.layers[l].bias);
    }
    return h;
}

}  // namespace

EncoderModel EncoderModel::init(const EncoderConfig& config, std::uint64_t seed) {
    if (config.vocab_size <= Vocabulary::kSpecialCount || config.dim == 0) throw std::invalid_argument("encoder needs a vocabulary and a positive dimension");
    EncoderModel m;
    m.config_ = config;
    std::mt19937_64 rng(seed);
    m.query_ = init_tower(config, rng);
    if (!config.shared_encoders) m.document_ = init_tower(config, rng);
    return m;
}

const Tower& EncoderModel::tower(Side side) const {
    return (side == Side::kDocument && !config_.shared_encoders) ? document_ : query_;
}

std::size_t EncoderModel::output_dim() const { return config_.kind == EncoderKind::kDense ? config_.dim : config_.vocab_size; }

ParameterList EncoderModel::parameters() const {
    ParameterList out;
    append_tower(out, query_, config_.shared_encoders ? "" : "query.");
    if (!config_.shared_encoders) append_tower(out, document_, "document.");
    return out;
}

EncoderModel EncoderModel::clone() const {
    EncoderModel m;
    m.config_ = config_;
    m.query_ = clone_tower(query_);
    if (!config_.shared_encoders) m.document_ = clone_tower(document_);
    return m;
}

EmbeddedTokens embed_tokens(const EncoderModel& model, const PaddedSequences& seqs, Side side) {
    EmbeddedTokens out;
    out.values = gather_rows(model.tower(side).embedding, seqs.ids);
    out.mask = seqs.mask();
    out.count = seqs.count;
    out.length = seqs.max_len;
    return out;
}

EmbeddedTokens perturbed(const EmbeddedTokens& tokens, const Tensor& delta) {
    EmbeddedTokens out = tokens;
    out.values = add(tokens.values, delta);
    return out;
}

Tensor encode_dense(const EncoderModel& model, const EmbeddedTokens& tokens, Side side) {
    if (model.config().kind != EncoderKind::kDense) throw std::invalid_argument("encode_dense called on a sparse model");
    return transform(model.tower(side), masked_mean_pool(tokens.values, tokens.mask, tokens.count));
}

Tensor encode_sparse(const EncoderModel& model, const EmbeddedTokens& tokens, Side side) {
    if (model.config().kind != EncoderKind::kSparse) throw std::invalid_argument("encode_sparse called on a dense model");
    const Tower& t = model.tower(side);
    Tensor h = transform(t, tokens.values);
    Tensor logits = matmul_nt(h, t.projection.defined() ? t.projection : t.embedding);
    return masked_max_pool(log1p(relu(logits)), tokens.mask, tokens.count);
}

Tensor encode(const EncoderModel& model, const EmbeddedTokens& tokens, Side side) {
    return model.config().kind == EncoderKind::kDense ? encode_dense(model, tokens, side) : encode_sparse(model, tokens, side);
}

Tensor encode_sequences(const EncoderModel& model, const PaddedSequences& seqs, Side side) {
    return encode(model, embed_tokens(model, seqs, side), side);
}

Tensor score(const Tensor& queries, const Tensor& docs) {
    if (queries.cols() != docs.cols()) {
        throw std::invalid_argument("score: query dimension " + std::to_string(queries.cols()) + " != document dimension " +
                                    std::to_string(docs.cols()));
    }
    return matmul_nt(queries, docs);
}

Tensor flops_value(const Tensor& sparse_vectors) { return sum(square(mean_rows(sparse_vectors))); }

}  // namespace advrank
