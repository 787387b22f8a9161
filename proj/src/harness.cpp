#include "advrank/harness.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace advrank {

namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix64(splitmix64(seed) ^ stream); }

const char* to_cstr(OptimizerKind k) { return k == OptimizerKind::kAdam ? "adam" : "sgd"; }
const char* to_cstr(Scheduler s) { return s == Scheduler::kLinear ? "linear" : "constant"; }

OptimizerKind optimizer_from_string(const std::string& s) {
    if (s == "adam") return OptimizerKind::kAdam;
    if (s == "sgd") return OptimizerKind::kSgd;
    throw std::invalid_argument("unknown optimizer '" + s + "' (expected adam or sgd)");
}

Scheduler scheduler_from_string(const std::string& s) {
    if (s == "linear") return Scheduler::kLinear;
    if (s == "constant") return Scheduler::kConstant;
    throw std::invalid_argument("unknown scheduler '" + s + "' (expected linear or constant)");
}

void check_known_keys(const nlohmann::json& user, const nlohmann::json& defaults, const std::string& prefix) {
    if (!user.is_object()) return;
    for (const auto& [key, value] : user.items()) {
        const std::string path = prefix.empty() ? key : prefix + "." + key;
        if (!defaults.contains(key)) throw std::invalid_argument("unknown config key '" + path + "'");
        if (defaults[key].is_object()) {
            if (!value.is_object()) throw std::invalid_argument("config key '" + path + "' must be an object");
            check_known_keys(value, defaults[key], path);
        }
    }
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

}  // namespace

// ---- configuration ---------------------------------------------------------

void to_json(nlohmann::json& j, const RunConfig& c) {
    const auto& p = c.paths;
    j["paths"] = {{"data_dir", p.data_dir},           {"vocab", p.vocab},
                  {"collection", p.collection},       {"train_queries", p.train_queries},
                  {"train_qrels", p.train_qrels},     {"dev_queries", p.dev_queries},
                  {"dev_qrels", p.dev_qrels},         {"test_queries", p.test_queries},
                  {"test_qrels", p.test_qrels},       {"hard_negatives", p.hard_negatives},
                  {"teacher_margins", p.teacher_margins}};
    j["model"] = c.model;
    const auto& t = c.training;
    j["training"] = {{"epochs", t.epochs},
                     {"batch_size", t.batch_size},
                     {"negatives", t.negatives},
                     {"learning_rate", t.learning_rate},
                     {"optimizer", to_cstr(t.optimizer)},
                     {"scheduler", to_cstr(t.scheduler)},
                     {"seed", t.seed},
                     {"select_on_dev", t.select_on_dev}};
    j["loss"] = c.loss;
    j["perturbation"] = c.perturbation;
    j["at"] = {{"from_checkpoint", c.at.from_checkpoint}, {"epochs", c.at.epochs}};
    j["distill"] = {{"teacher_sigma", c.distill.teacher_sigma}, {"teacher_depth", c.distill.teacher_depth}};
    j["finetune"] = {{"from_checkpoint", c.finetune.from_checkpoint}, {"learning_rate", c.finetune.learning_rate}};
    const auto& e = c.eval;
    const auto& v = e.variation;
    j["eval"] = {{"checkpoint", e.checkpoint},
                 {"split", e.split},
                 {"queries", e.queries},
                 {"qrels", e.qrels},
                 {"mrr_cutoff", e.cutoffs.mrr},
                 {"recall_cutoff", e.cutoffs.recall},
                 {"ndcg_cutoff", e.cutoffs.ndcg},
                 {"run_depth", e.run_depth},
                 {"tag", e.tag},
                 {"variation",
                  {{"family", v.family},
                   {"seed", v.seed},
                   {"stopwords", v.stopwords},
                   {"lexicon", v.lexicon},
                   {"min_word_length", v.min_word_length},
                   {"edits_per_query", v.edits_per_query}}}};
    j["out"] = c.out;
}

void from_json(const nlohmann::json& j, RunConfig& c) {
    RunConfig d;
    c = d;
    if (j.contains("paths")) {
        const auto& p = j["paths"];
        auto get = [&](const char* key, std::string& field) { field = p.value(key, field); };
        get("data_dir", c.paths.data_dir);
        get("vocab", c.paths.vocab);
        get("collection", c.paths.collection);
        get("train_queries", c.paths.train_queries);
        get("train_qrels", c.paths.train_qrels);
        get("dev_queries", c.paths.dev_queries);
        get("dev_qrels", c.paths.dev_qrels);
        get("test_queries", c.paths.test_queries);
        get("test_qrels", c.paths.test_qrels);
        get("hard_negatives", c.paths.hard_negatives);
        get("teacher_margins", c.paths.teacher_margins);
    }
    if (j.contains("model")) c.model = j["model"].get<EncoderConfig>();
    if (j.contains("training")) {
        const auto& t = j["training"];
        c.training.epochs = t.value("epochs", d.training.epochs);
        c.training.batch_size = t.value("batch_size", d.training.batch_size);
        c.training.negatives = t.value("negatives", d.training.negatives);
        c.training.learning_rate = t.value("learning_rate", d.training.learning_rate);
        c.training.optimizer = optimizer_from_string(t.value("optimizer", std::string(to_cstr(d.training.optimizer))));
        c.training.scheduler = scheduler_from_string(t.value("scheduler", std::string(to_cstr(d.training.scheduler))));
        c.training.seed = t.value("seed", d.training.seed);
        c.training.select_on_dev = t.value("select_on_dev", d.training.select_on_dev);
    }
    if (j.contains("loss")) c.loss = j["loss"].get<LossConfig>();
    if (j.contains("perturbation")) c.perturbation = j["perturbation"].get<PerturbationConfig>();
    if (j.contains("at")) {
        c.at.from_checkpoint = j["at"].value("from_checkpoint", d.at.from_checkpoint);
        c.at.epochs = j["at"].value("epochs", d.at.epochs);
    }
    if (j.contains("distill")) {
        c.distill.teacher_sigma = j["distill"].value("teacher_sigma", d.distill.teacher_sigma);
        c.distill.teacher_depth = j["distill"].value("teacher_depth", d.distill.teacher_depth);
    }
    if (j.contains("finetune")) {
        c.finetune.from_checkpoint = j["finetune"].value("from_checkpoint", d.finetune.from_checkpoint);
        c.finetune.learning_rate = j["finetune"].value("learning_rate", d.finetune.learning_rate);
    }
    if (j.contains("eval")) {
        const auto& e = j["eval"];
        c.eval.checkpoint = e.value("checkpoint", d.eval.checkpoint);
        c.eval.split = e.value("split", d.eval.split);
        c.eval.queries = e.value("queries", d.eval.queries);
        c.eval.qrels = e.value("qrels", d.eval.qrels);
        c.eval.cutoffs.mrr = e.value("mrr_cutoff", d.eval.cutoffs.mrr);
        c.eval.cutoffs.recall = e.value("recall_cutoff", d.eval.cutoffs.recall);
        c.eval.cutoffs.ndcg = e.value("ndcg_cutoff", d.eval.cutoffs.ndcg);
        c.eval.run_depth = e.value("run_depth", d.eval.run_depth);
        c.eval.tag = e.value("tag", d.eval.tag);
        if (e.contains("variation")) {
            const auto& v = e["variation"];
            auto& cv = c.eval.variation;
            cv.family = v.value("family", cv.family);
            cv.seed = v.value("seed", cv.seed);
            cv.stopwords = v.value("stopwords", cv.stopwords);
            cv.lexicon = v.value("lexicon", cv.lexicon);
            cv.min_word_length = v.value("min_word_length", cv.min_word_length);
            cv.edits_per_query = v.value("edits_per_query", cv.edits_per_query);
        }
    }
    c.out = j.value("out", d.out);
    if (c.training.batch_size == 0 || c.training.negatives == 0) throw std::invalid_argument("training.batch_size and training.negatives must be positive");
    if (!(c.training.learning_rate > 0.0)) throw std::invalid_argument("training.learning_rate must be positive");
    if (!c.at.from_checkpoint.empty() && c.at.epochs == 0) throw std::invalid_argument("at.epochs must be at least 1 when resuming with AT");
    if (c.distill.teacher_sigma < 0.0) throw std::invalid_argument("distill.teacher_sigma must be non-negative");
}

RunConfig default_config() { return RunConfig{}; }

RunConfig config_from_json(const nlohmann::json& overrides) {
    nlohmann::json base = default_config();
    check_known_keys(overrides, base, "");
    base.merge_patch(overrides);
    return base.get<RunConfig>();
}

void apply_override(nlohmann::json& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw std::invalid_argument("--set expects key=value, got '" + assignment + "'");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    nlohmann::json* node = &config;
    std::size_t start = 0;
    while (true) {
        const auto dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (part.empty()) throw std::invalid_argument("malformed key '" + key + "'");
        if (!node->is_object()) *node = nlohmann::json::object();
        node = &(*node)[part];
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
    *node = value.is_discarded() ? nlohmann::json(raw) : value;
}

std::string config_hash(const RunConfig& c) {
    // FNV-1a over the canonical dump (keys are sorted by nlohmann::json) of
    // the sections that define what a checkpoint was trained on.
    const nlohmann::json j = c;
    const std::string text = nlohmann::json{{"paths", j["paths"]}, {"model", j["model"]}, {"training", j["training"]}, {"loss", j["loss"]}}.dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

// ---- data ------------------------------------------------------------------

namespace {

std::string resolve(const std::string& explicit_path, const PathsConfig& paths, const char* default_name) {
    if (!explicit_path.empty()) return explicit_path;
    if (paths.data_dir.empty()) return {};
    fs::path p = fs::path(paths.data_dir) / default_name;
    return fs::exists(p) ? p.string() : std::string();
}

std::vector<QueryId> add_split(Dataset& data, const std::string& queries_path, const std::string& qrels_path,
                               const char* split) {
    std::vector<QueryId> ids;
    if (queries_path.empty()) return ids;
    if (qrels_path.empty()) throw std::invalid_argument(std::string(split) + " queries given without qrels");
    for (auto& [q, text] : read_id_text_tsv(queries_path)) {
        if (data.corpus.queries.contains(q)) throw std::invalid_argument("query id " + std::to_string(q) + " appears in two splits");
        data.corpus.queries[q] = data.vocab.encode(text);
        data.query_text[q] = text;
        ids.push_back(q);
    }
    for (auto& [q, judged] : read_qrels(qrels_path)) {
        for (const auto& [d, g] : judged) {
            if (!data.corpus.documents.contains(d))
                throw std::invalid_argument(qrels_path + ": qrels reference unknown document " + std::to_string(d));
        }
        data.corpus.qrels[q] = judged;
    }
    return ids;
}

}  // namespace

Dataset load_dataset(const PathsConfig& paths) {
    Dataset data;
    const std::string vocab_path = resolve(paths.vocab, paths, "vocab.txt");
    const std::string collection = resolve(paths.collection, paths, "collection.tsv");
    const std::string train_q = resolve(paths.train_queries, paths, "queries.train.tsv");
    const std::string train_r = resolve(paths.train_qrels, paths, "qrels.train.txt");
    if (collection.empty()) throw std::invalid_argument("no collection configured (paths.collection or paths.data_dir)");
    VocabMode mode = VocabMode::kGrow;
    if (!vocab_path.empty()) {
        data.vocab = Vocabulary::load(vocab_path);
        mode = VocabMode::kFrozen;
    }
    for (auto& [d, text] : read_id_text_tsv(collection))
        data.corpus.documents[d] = mode == VocabMode::kGrow ? data.vocab.encode_growing(text) : data.vocab.encode(text);
    data.train = add_split(data, train_q, train_r, "train");
    data.dev = add_split(data, resolve(paths.dev_queries, paths, "queries.dev.tsv"), resolve(paths.dev_qrels, paths, "qrels.dev.txt"), "dev");
    data.test = add_split(data, resolve(paths.test_queries, paths, "queries.test.tsv"), resolve(paths.test_qrels, paths, "qrels.test.txt"), "test");
    const std::string hard = resolve(paths.hard_negatives, paths, "hard_negatives.train.tsv");
    if (!hard.empty()) data.hard_negatives = read_hard_negatives(hard);
    if (!paths.teacher_margins.empty()) data.teacher = read_teacher_margins(paths.teacher_margins);
    return data;
}

Dataset dataset_from_synthetic(const SyntheticCorpus& synth, std::size_t hard_negative_depth) {
    Dataset data;
    data.vocab = synth.vocab;
    data.corpus = synth.corpus;
    data.train = synth.train_queries;
    data.dev = synth.dev_queries;
    data.test = synth.test_queries;
    for (const auto& [q, seq] : synth.corpus.queries) data.query_text[q] = synth.vocab.decode(seq);
    if (hard_negative_depth > 0) data.hard_negatives = mine_lexical_negatives(data.corpus, data.train, hard_negative_depth);
    return data;
}

// ---- checkpoints -----------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are written in native little-endian order");

namespace {

constexpr char kMagic[4] = {'A', 'D', 'V', 'R'};

struct PayloadWriter {
    nlohmann::json directory = nlohmann::json::array();
    std::vector<double> payload;

    void add(const std::string& name, std::vector<std::size_t> shape, std::span<const double> values) {
        directory.push_back({{"name", name}, {"shape", shape}, {"offset", payload.size() * sizeof(double)}, {"count", values.size()}});
        payload.insert(payload.end(), values.begin(), values.end());
    }
};

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
    PayloadWriter w;
    const ParameterList params = ckpt.model.parameters();
    for (const auto& p : params) w.add(p.name, p.tensor.shape(), p.tensor.data());
    if (!ckpt.optimizer.first_moment.empty()) {
        if (ckpt.optimizer.first_moment.size() != params.size()) throw std::invalid_argument("optimizer state does not match parameters");
        for (std::size_t k = 0; k < params.size(); ++k) {
            w.add("adam.m." + params[k].name, params[k].tensor.shape(), ckpt.optimizer.first_moment[k]);
            w.add("adam.v." + params[k].name, params[k].tensor.shape(), ckpt.optimizer.second_moment[k]);
        }
    }
    if (ckpt.universal_epsilon) w.add("universal.epsilon", ckpt.universal_epsilon->shape(), ckpt.universal_epsilon->data());

    nlohmann::json header = {{"encoder", ckpt.model.config()},
                             {"vocab", ckpt.vocab},
                             {"metadata", ckpt.metadata},
                             {"adam_step", ckpt.optimizer.step},
                             {"tensors", w.directory}};
    const std::string text = header.dump();
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write checkpoint " + tmp.string());
        const std::uint32_t version = Checkpoint::kFormatVersion;
        const std::uint64_t header_len = text.size();
        out.write(kMagic, 4);
        out.write(reinterpret_cast<const char*>(&version), sizeof version);
        out.write(reinterpret_cast<const char*>(&header_len), sizeof header_len);
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        out.write(reinterpret_cast<const char*>(w.payload.data()), static_cast<std::streamsize>(w.payload.size() * sizeof(double)));
        if (!out) throw std::runtime_error("short write on checkpoint " + tmp.string());
    }
    fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
    const std::string bytes = read_file(path);
    auto fail = [&](const std::string& why) { return std::runtime_error("checkpoint " + path.string() + ": " + why); };
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw fail("bad magic (not an ADVR checkpoint)");
    std::uint32_t version = 0;
    std::uint64_t header_len = 0;
    std::memcpy(&version, bytes.data() + 4, sizeof version);
    std::memcpy(&header_len, bytes.data() + 8, sizeof header_len);
    if (version != Checkpoint::kFormatVersion) throw fail("unsupported format version " + std::to_string(version));
    if (16 + header_len > bytes.size()) throw fail("truncated header");
    const nlohmann::json header = nlohmann::json::parse(bytes.substr(16, header_len));
    const std::size_t payload_start = 16 + header_len;

    std::map<std::string, std::pair<std::vector<std::size_t>, std::vector<double>>> tensors;
    for (const auto& entry : header.at("tensors")) {
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto count = entry.at("count").get<std::size_t>();
        if (payload_start + offset + count * sizeof(double) > bytes.size()) throw fail("truncated payload");
        std::vector<double> values(count);
        std::memcpy(values.data(), bytes.data() + payload_start + offset, count * sizeof(double));
        tensors[entry.at("name").get<std::string>()] = {entry.at("shape").get<std::vector<std::size_t>>(), std::move(values)};
    }

    Checkpoint ckpt;
    ckpt.model = EncoderModel::init(header.at("encoder").get<EncoderConfig>(), 0);
    ckpt.vocab = header.at("vocab").get<std::vector<std::string>>();
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
    const ParameterList params = ckpt.model.parameters();
    for (const auto& p : params) {
        auto it = tensors.find(p.name);
        if (it == tensors.end()) throw fail("missing tensor '" + p.name + "'");
        if (it->second.first != p.tensor.shape()) throw fail("shape mismatch for '" + p.name + "'");
        Tensor target = p.tensor;
        auto dst = target.mutable_data();
        std::copy(it->second.second.begin(), it->second.second.end(), dst.begin());
    }
    ckpt.optimizer.step = header.value("adam_step", std::uint64_t{0});
    if (tensors.contains("adam.m." + params.front().name)) {
        for (const auto& p : params) {
            ckpt.optimizer.first_moment.push_back(tensors.at("adam.m." + p.name).second);
            ckpt.optimizer.second_moment.push_back(tensors.at("adam.v." + p.name).second);
        }
    }
    if (auto it = tensors.find("universal.epsilon"); it != tensors.end()) {
        ckpt.universal_epsilon = Tensor::from(it->second.first, it->second.second);
    }
    return ckpt;
}

void copy_parameters(const EncoderModel& source, const EncoderModel& model) {
    const ParameterList src = source.parameters();
    const ParameterList dst = model.parameters();
    if (src.size() != dst.size()) throw std::invalid_argument("copy_parameters: architectures differ");
    for (std::size_t k = 0; k < src.size(); ++k) {
        if (src[k].name != dst[k].name || src[k].tensor.shape() != dst[k].tensor.shape())
            throw std::invalid_argument("copy_parameters: parameter '" + src[k].name + "' does not match");
        Tensor target = dst[k].tensor;
        auto out = target.mutable_data();
        auto in = src[k].tensor.data();
        std::copy(in.begin(), in.end(), out.begin());
    }
}

// ---- training --------------------------------------------------------------

nlohmann::json to_json(const StepLog& log) {
    nlohmann::json j = {{"epoch", log.epoch},
                        {"step", log.step},
                        {"lr", log.learning_rate},
                        {"clean_loss", log.result.clean_loss},
                        {"backward_passes", log.result.backward_passes},
                        {"grad_norm", log.grad_norm}};
    j["adversarial_loss"] = log.result.adversarial_loss ? nlohmann::json(*log.result.adversarial_loss) : nlohmann::json(nullptr);
    j["flops"] = log.result.flops ? nlohmann::json(*log.result.flops) : nlohmann::json(nullptr);
    if (log.result.degenerate_units) j["degenerate_units"] = log.result.degenerate_units;
    return j;
}

namespace {

double gradient_norm(const ParameterList& params) {
    double s = 0.0;
    for (const auto& p : params)
        if (p.tensor.has_grad())
            for (double g : p.tensor.grad()) s += g * g;
    return std::sqrt(s);
}

Checkpoint make_checkpoint(const EncoderModel& model, const Vocabulary& vocab, const AdamState& adam,
                           const std::optional<Tensor>& eps, nlohmann::json metadata) {
    Checkpoint c;
    c.model = model;
    c.vocab = vocab.tokens();
    c.optimizer = adam;
    c.universal_epsilon = eps;
    c.metadata = std::move(metadata);
    return c;
}

}  // namespace

TrainResult train_model(const RunConfig& config, const Dataset& data, const TrainOptions& options) {
    EncoderConfig mc = config.model;
    if (mc.vocab_size != 0 && mc.vocab_size != data.vocab.size())
        throw std::invalid_argument("model.vocab_size " + std::to_string(mc.vocab_size) + " does not match the vocabulary (" +
                                    std::to_string(data.vocab.size()) + ")");
    mc.vocab_size = data.vocab.size();
    if (data.train.empty()) throw std::invalid_argument("no training queries");

    const std::uint64_t seed = config.training.seed;
    EncoderModel model;
    AdamState adam;
    std::size_t epoch0 = 0, step0 = 0;
    if (options.resume) {
        if (options.resume->vocab != data.vocab.tokens()) throw std::invalid_argument("checkpoint vocabulary does not match the corpus vocabulary");
        model = options.resume->model.clone();
        adam = options.resume->optimizer;
        epoch0 = options.resume->metadata.value("epoch", std::size_t{0});
        step0 = options.resume->metadata.value("step", std::size_t{0});
    } else {
        model = EncoderModel::init(mc, derive_seed(seed, 1));
    }
    const ParameterList params = model.parameters();

    const bool distill = config.loss.objective == Objective::kMarginMse;
    if (distill && !data.teacher) throw std::invalid_argument("margin-MSE training needs teacher margins");
    BatchSampler sampler(data.corpus, data.train,
                         {config.training.batch_size, config.training.negatives, derive_seed(seed, 2 + 1000 * epoch0)},
                         data.hard_negatives.empty() ? nullptr : &data.hard_negatives, distill ? &*data.teacher : nullptr);
    if (sampler.epoch_size() == 0) throw std::invalid_argument("no training query has a usable positive");

    PerturbationState pstate(derive_seed(seed, 3 + 1000 * epoch0), model.config().dim);
    if (options.resume && options.resume->universal_epsilon) {
        auto src = options.resume->universal_epsilon->data();
        auto dst = pstate.universal.epsilon.mutable_data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
    const bool universal = config.perturbation.strategy == Strategy::kUniversal;

    const std::size_t batches_per_epoch = (sampler.epoch_size() + config.training.batch_size - 1) / config.training.batch_size;
    const std::size_t total_steps = batches_per_epoch * options.epochs;
    const bool select = config.training.select_on_dev && !data.dev.empty();

    TrainResult result;
    result.best = model.clone();
    auto current_eps = [&]() -> std::optional<Tensor> {
        if (!universal) return options.resume ? options.resume->universal_epsilon : std::nullopt;
        return pstate.universal.epsilon.detach();
    };
    auto metadata = [&](std::size_t epoch, std::size_t step) {
        return nlohmann::json{{"epoch", epoch},
                              {"step", step},
                              {"config_hash", config_hash(config)},
                              {"strategy", to_string(config.perturbation.strategy)},
                              {"sampler_rng", sampler.rng_state()},
                              {"seed", seed}};
    };
    if (!options.last_good_path.empty()) save_checkpoint(options.last_good_path, make_checkpoint(model, data.vocab, adam, current_eps(), metadata(epoch0, step0)));

    std::size_t step = 0;
    for (std::size_t e = 0; e < options.epochs; ++e) {
        const std::size_t epoch = epoch0 + e + 1;
        double loss_sum = 0.0;
        std::size_t loss_count = 0;
        for (const TripletBatch& batch : sampler.next_epoch()) {
            zero_grads(params);
            const auto non_finite = [&](const std::string& what) {
                return NonFiniteLoss(what + " at epoch " + std::to_string(epoch) + ", step " + std::to_string(step0 + step + 1) +
                                     (options.last_good_path.empty() ? std::string() : "; last good checkpoint: " + options.last_good_path.string()));
            };
            StepResult r;
            try {
                r = training_step(model, batch, config.loss, config.perturbation, pstate);
            } catch (const std::domain_error& e) {
                throw non_finite(e.what());
            }
            if (!std::isfinite(r.clean_loss) || (r.adversarial_loss && !std::isfinite(*r.adversarial_loss))) throw non_finite("non-finite loss");
            const double lr = config.training.scheduler == Scheduler::kLinear
                                  ? options.learning_rate * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps))
                                  : options.learning_rate;
            StepLog log{epoch, step0 + step + 1, lr, r, gradient_norm(params)};
            if (config.training.optimizer == OptimizerKind::kAdam) {
                AdamHyperparams hp;
                hp.learning_rate = lr;
                adam_step(params, adam, hp);
            } else {
                sgd_step(params, lr);
            }
            ++step;
            loss_sum += r.clean_loss + r.adversarial_loss.value_or(0.0);
            ++loss_count;
            if (options.on_step) options.on_step(log);
        }
        EpochLog elog{epoch, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, std::nullopt};
        if (select) {
            elog.dev_mrr = dev_mrr(model, data, config.eval.cutoffs.mrr);
            if (!result.best_dev_mrr || *elog.dev_mrr > *result.best_dev_mrr) {
                result.best_dev_mrr = elog.dev_mrr;
                result.best_epoch = epoch;
                copy_parameters(model, result.best);
            }
        } else {
            result.best_epoch = epoch;
            copy_parameters(model, result.best);
        }
        result.epochs.push_back(elog);
        if (!options.last_good_path.empty())
            save_checkpoint(options.last_good_path, make_checkpoint(model, data.vocab, adam, current_eps(), metadata(epoch, step0 + step)));
    }
    result.last = model;
    result.optimizer = adam;
    result.universal_epsilon = current_eps();
    result.epochs_completed = epoch0 + options.epochs;
    result.steps = step0 + step;
    result.skipped_triplets = sampler.skipped_triplets();
    return result;
}

// ---- evaluation ------------------------------------------------------------

std::map<QueryId, std::string> vary_queries(const std::map<QueryId, std::string>& queries, const VariationConfig& config) {
    if (config.family.empty()) return queries;
    VariationSpec spec;
    spec.family = variation_family_from_string(config.family);
    spec.seed = config.seed;
    spec.min_word_length = config.min_word_length;
    spec.edits_per_query = config.edits_per_query;
    if (!config.stopwords.empty()) spec.stopwords = load_stopwords(config.stopwords);
    if (!config.lexicon.empty()) spec.lexicon = load_lexicon(config.lexicon);
    spec.validate();
    std::map<QueryId, std::string> out;
    for (const auto& [q, text] : queries) out[q] = vary(text, spec, static_cast<std::uint64_t>(q)).text;
    return out;
}

std::map<QueryId, std::string> split_queries(const Dataset& data, const std::vector<QueryId>& ids) {
    std::map<QueryId, std::string> out;
    for (QueryId q : ids) out[q] = data.query_text.at(q);
    return out;
}

Qrels split_qrels(const Dataset& data, const std::vector<QueryId>& ids) {
    Qrels out;
    for (QueryId q : ids)
        if (auto it = data.corpus.qrels.find(q); it != data.corpus.qrels.end()) out[q] = it->second;
    return out;
}

EvalReport evaluate_model(const EncoderModel& model, const Dataset& data, const std::map<QueryId, std::string>& queries,
                          const Qrels& qrels, const EvalConfig& eval, Run* run_out) {
    std::map<QueryId, TokenSeq> encoded;
    for (const auto& [q, text] : queries) encoded[q] = data.vocab.encode(text);
    const std::size_t depth = std::max({eval.run_depth, eval.cutoffs.mrr, eval.cutoffs.recall, eval.cutoffs.ndcg});
    Run run = rank_all(model, data.corpus.documents, encoded, depth);
    std::string tag = eval.tag;
    if (tag.empty()) tag = eval.variation.family.empty() ? "original" : eval.variation.family;
    EvalReport report = evaluate_run(run, qrels, eval.cutoffs, tag);
    if (run_out) *run_out = std::move(run);
    return report;
}

double dev_mrr(const EncoderModel& model, const Dataset& data, std::size_t cutoff) {
    std::map<QueryId, TokenSeq> queries;
    for (QueryId q : data.dev) queries[q] = data.corpus.queries.at(q);
    return mrr_at_k(rank_all(model, data.corpus.documents, queries, cutoff), split_qrels(data, data.dev), cutoff).mean;
}

Run lexical_run(const Corpus& corpus, const std::map<QueryId, TokenSeq>& queries, std::size_t cutoff) {
    if (corpus.documents.empty()) throw std::invalid_argument("lexical_run: empty corpus");
    std::vector<DocId> ids;
    for (const auto& [d, seq] : corpus.documents) ids.push_back(d);
    Run run;
    std::vector<double> scores(ids.size());
    for (const auto& [q, seq] : queries) {
        std::size_t i = 0;
        for (const auto& [d, doc] : corpus.documents) scores[i++] = lexical_overlap(seq, doc);
        run.emplace(q, rank_scores(q, scores, ids, cutoff));
    }
    return run;
}

TeacherMargins oracle_teacher(const Corpus& corpus, const std::vector<QueryId>& queries, std::size_t depth, double sigma,
                              std::uint64_t seed) {
    if (depth == 0) throw std::invalid_argument("oracle teacher depth must be positive");
    const HardNegatives negatives = mine_lexical_negatives(corpus, queries, depth);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);
    TeacherMargins out;
    for (QueryId q : queries) {
        auto it = negatives.find(q);
        if (it == negatives.end()) continue;
        const TokenSeq& query = corpus.queries.at(q);
        for (DocId pos : corpus.positives(q)) {
            const double s_pos = lexical_overlap(query, corpus.documents.at(pos));
            for (DocId neg : it->second) {
                const double z = noise(rng);
                out[{q, pos, neg}] = s_pos - lexical_overlap(query, corpus.documents.at(neg)) + sigma * z;
            }
        }
    }
    return out;
}

std::vector<double> student_margins_for(const EncoderModel& model, const Corpus& corpus, const TeacherMargins& triplets) {
    NoGradGuard no_grad;
    std::vector<TokenSeq> qs, ps, ns;
    for (const auto& [key, m] : triplets) {
        qs.push_back(corpus.queries.at(key.query));
        ps.push_back(corpus.documents.at(key.positive));
        ns.push_back(corpus.documents.at(key.negative));
    }
    std::vector<double> out;
    if (qs.empty()) return out;
    const Tensor q = encode_sequences(model, PaddedSequences::from(qs), Side::kQuery);
    const Tensor p = encode_sequences(model, PaddedSequences::from(ps), Side::kDocument);
    const Tensor n = encode_sequences(model, PaddedSequences::from(ns), Side::kDocument);
    const Tensor sp = dot_rows(q, p), sn = dot_rows(q, n);
    for (std::size_t i = 0; i < qs.size(); ++i) out.push_back(sp.data()[i] - sn.data()[i]);
    return out;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("pearson: need two aligned samples of size >= 2");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    if (saa == 0.0 || sbb == 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ---- commands --------------------------------------------------------------

namespace {

nlohmann::json epochs_json(const TrainResult& r) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : r.epochs) {
        nlohmann::json j = {{"epoch", e.epoch}, {"mean_loss", e.mean_loss}};
        j["dev_mrr"] = e.dev_mrr ? nlohmann::json(*e.dev_mrr) : nlohmann::json(nullptr);
        arr.push_back(j);
    }
    return arr;
}

/// Shared tail of train / distill / finetune: runs, writes checkpoints,
/// log and summary.
nlohmann::json run_training(const RunConfig& config, const Dataset& data, const Checkpoint* resume, std::size_t epochs,
                            double learning_rate, nlohmann::json summary) {
    const fs::path out = config.out;
    fs::create_directories(out);
    write_text(out / "config.json", nlohmann::json(config).dump(2) + "\n");
    std::ofstream log(out / "train_log.jsonl", std::ios::binary);
    if (!log) throw std::runtime_error("cannot write " + (out / "train_log.jsonl").string());

    TrainOptions options;
    options.resume = resume;
    options.epochs = epochs;
    options.learning_rate = learning_rate;
    options.last_good_path = out / "last.ckpt";
    options.on_step = [&](const StepLog& s) { log << to_json(s).dump() << '\n'; };

    TrainResult r;
    try {
        r = train_model(config, data, options);
    } catch (const NonFiniteLoss& e) {
        log.flush();
        summary["error"] = e.what();
        write_text(out / "summary.json", summary.dump(2) + "\n");
        throw;
    }
    nlohmann::json meta = {{"epoch", r.epochs_completed},
                           {"step", r.steps},
                           {"best_epoch", r.best_epoch},
                           {"config_hash", config_hash(config)},
                           {"strategy", to_string(config.perturbation.strategy)},
                           {"seed", config.training.seed}};
    save_checkpoint(out / "model.ckpt", make_checkpoint(r.best, data.vocab, r.optimizer, r.universal_epsilon, meta));
    summary["epochs_completed"] = r.epochs_completed;
    summary["steps"] = r.steps;
    summary["best_epoch"] = r.best_epoch;
    summary["best_dev_mrr"] = r.best_dev_mrr ? nlohmann::json(*r.best_dev_mrr) : nlohmann::json(nullptr);
    summary["epochs"] = epochs_json(r);
    summary["skipped_triplets"] = r.skipped_triplets;
    summary["checkpoint"] = (out / "model.ckpt").string();
    write_text(out / "summary.json", summary.dump(2) + "\n");
    return summary;
}

}  // namespace

nlohmann::json cmd_gen_corpus(const SynthSpec& spec, std::size_t hard_negative_depth, const fs::path& out) {
    spec.validate();
    const SyntheticCorpus synth = generate_synthetic(spec);
    write_synthetic(synth, out, hard_negative_depth);
    write_text(out / "spec.json", nlohmann::json(spec).dump(2) + "\n");

    std::map<QueryId, TokenSeq> test;
    for (QueryId q : synth.test_queries) test[q] = synth.corpus.queries.at(q);
    Qrels qrels;
    for (QueryId q : synth.test_queries) qrels[q] = synth.corpus.qrels.at(q);
    nlohmann::json summary = {{"documents", synth.corpus.documents.size()},
                              {"vocab_size", synth.vocab.size()},
                              {"train_queries", synth.train_queries.size()},
                              {"dev_queries", synth.dev_queries.size()},
                              {"test_queries", synth.test_queries.size()},
                              {"out", out.string()}};
    if (!test.empty()) summary["lexical_test_mrr10"] = mrr_at_k(lexical_run(synth.corpus, test, 10), qrels, 10).mean;
    return summary;
}

nlohmann::json cmd_train(const RunConfig& config) {
    const Dataset data = load_dataset(config.paths);
    nlohmann::json summary = {{"command", "train"}, {"strategy", to_string(config.perturbation.strategy)}};
    if (config.at.from_checkpoint.empty()) return run_training(config, data, nullptr, config.training.epochs, config.training.learning_rate, summary);

    const Checkpoint ckpt = load_checkpoint(config.at.from_checkpoint);
    const std::string stored_hash = ckpt.metadata.value("config_hash", std::string());
    if (!stored_hash.empty() && stored_hash != config_hash(config)) {
        const std::string warning = "config hash differs from the checkpoint's (" + stored_hash + "); resuming anyway";
        std::cerr << "warning: " << warning << '\n';
        summary["warnings"].push_back(warning);
    }
    summary["resumed_from"] = config.at.from_checkpoint;
    summary["resumed_epoch"] = ckpt.metadata.value("epoch", std::size_t{0});
    return run_training(config, data, &ckpt, config.at.epochs, config.training.learning_rate, summary);
}

nlohmann::json cmd_distill(const RunConfig& base) {
    RunConfig config = base;
    config.loss.objective = Objective::kMarginMse;
    Dataset data = load_dataset(config.paths);
    nlohmann::json summary = {{"command", "distill"}};
    if (data.teacher) {
        if (data.teacher->empty()) throw std::invalid_argument("teacher margin file " + config.paths.teacher_margins + " is empty");
        summary["teacher"] = config.paths.teacher_margins;
    } else {
        data.teacher = oracle_teacher(data.corpus, data.train, config.distill.teacher_depth, config.distill.teacher_sigma,
                                      derive_seed(config.training.seed, 4));
        fs::create_directories(config.out);
        write_teacher_margins(fs::path(config.out) / "teacher_margins.tsv", *data.teacher);
        summary["teacher"] = "oracle";
        summary["teacher_sigma"] = config.distill.teacher_sigma;
    }
    summary["teacher_triplets"] = data.teacher->size();
    summary = run_training(config, data, nullptr, config.training.epochs, config.training.learning_rate, summary);

    const std::vector<QueryId>& held_out = !data.dev.empty() ? data.dev : data.test;
    if (!held_out.empty()) {
        const TeacherMargins reference = oracle_teacher(data.corpus, held_out, config.distill.teacher_depth, 0.0, 0);
        std::vector<double> teacher;
        for (const auto& [key, m] : reference) teacher.push_back(m);
        const Checkpoint ckpt = load_checkpoint(summary["checkpoint"].get<std::string>());
        summary["heldout_triplets"] = teacher.size();
        if (teacher.size() >= 2) summary["heldout_pearson"] = pearson(student_margins_for(ckpt.model, data.corpus, reference), teacher);
        write_text(fs::path(config.out) / "summary.json", summary.dump(2) + "\n");
    }
    return summary;
}

nlohmann::json cmd_finetune(const RunConfig& config) {
    if (config.finetune.from_checkpoint.empty()) throw std::invalid_argument("finetune.from_checkpoint is required");
    const Dataset data = load_dataset(config.paths);
    Checkpoint ckpt = load_checkpoint(config.finetune.from_checkpoint);
    if (ckpt.vocab != data.vocab.tokens()) {
        throw std::invalid_argument("vocabulary mismatch: checkpoint has " + std::to_string(ckpt.vocab.size()) +
                                    " tokens, corpus vocabulary " + std::to_string(data.vocab.size()) + " (a shared vocabulary is required)");
    }
    const double lr = config.finetune.learning_rate > 0.0 ? config.finetune.learning_rate : 0.1 * config.training.learning_rate;
    nlohmann::json summary = {{"command", "finetune"}, {"from_checkpoint", config.finetune.from_checkpoint}, {"learning_rate", lr}};
    if (!data.dev.empty()) summary["zero_shot_dev_mrr"] = dev_mrr(ckpt.model, data, config.eval.cutoffs.mrr);

    const fs::path out = config.out;
    if (config.training.epochs == 0) {
        fs::create_directories(out);
        fs::copy_file(config.finetune.from_checkpoint, out / "model.ckpt", fs::copy_options::overwrite_existing);
        summary["epochs_completed"] = 0;
        summary["checkpoint"] = (out / "model.ckpt").string();
        write_text(out / "summary.json", summary.dump(2) + "\n");
        return summary;
    }
    // A new optimization phase: fresh optimizer moments and epoch counter.
    ckpt.optimizer = AdamState{};
    ckpt.metadata["epoch"] = 0;
    ckpt.metadata["step"] = 0;
    return run_training(config, data, &ckpt, config.training.epochs, lr, summary);
}

nlohmann::json cmd_evaluate(const RunConfig& config) {
    if (config.eval.checkpoint.empty()) throw std::invalid_argument("eval.checkpoint is required");
    const Dataset data = load_dataset(config.paths);
    const Checkpoint ckpt = load_checkpoint(config.eval.checkpoint);
    if (ckpt.vocab != data.vocab.tokens()) throw std::invalid_argument("checkpoint vocabulary does not match the corpus vocabulary");

    std::map<QueryId, std::string> queries;
    Qrels qrels;
    if (!config.eval.queries.empty()) {
        queries = read_id_text_tsv(config.eval.queries);
        if (config.eval.qrels.empty()) {
            for (const auto& [q, text] : queries)
                if (auto it = data.corpus.qrels.find(q); it != data.corpus.qrels.end()) qrels[q] = it->second;
        }
    } else {
        const auto& s = config.eval.split;
        const std::vector<QueryId>& ids = s == "test" ? data.test : s == "dev" ? data.dev : s == "train" ? data.train
                                          : throw std::invalid_argument("unknown eval.split '" + s + "'");
        queries = split_queries(data, ids);
        qrels = split_qrels(data, ids);
    }
    if (!config.eval.qrels.empty()) qrels = read_qrels(config.eval.qrels);
    queries = vary_queries(queries, config.eval.variation);

    Run run;
    const EvalReport report = evaluate_model(ckpt.model, data, queries, qrels, config.eval, &run);
    const fs::path out = config.out;
    report.save(out / "report.json");
    write_run_file(out / "run.trec", run, report.tag);
    nlohmann::json summary = {{"command", "evaluate"}, {"tag", report.tag}, {"report", (out / "report.json").string()}};
    for (const auto& [name, m] : report.metrics) summary["metrics"][name] = {{"mean", m.mean}, {"n", m.per_query.size()}, {"excluded", m.excluded}};
    return summary;
}

nlohmann::json cmd_perturb_queries(const fs::path& queries, const VariationConfig& variation, const fs::path& out) {
    if (variation.family.empty()) throw std::invalid_argument("a variation family is required");
    VariationSpec spec;
    spec.family = variation_family_from_string(variation.family);
    spec.seed = variation.seed;
    spec.min_word_length = variation.min_word_length;
    spec.edits_per_query = variation.edits_per_query;
    if (!variation.stopwords.empty()) spec.stopwords = load_stopwords(variation.stopwords);
    if (!variation.lexicon.empty()) spec.lexicon = load_lexicon(variation.lexicon);
    spec.validate();
    const fs::path varied = out / ("queries." + variation.family + ".tsv");
    const fs::path manifest = out / ("manifest." + variation.family + ".jsonl");
    const VariedFile r = vary_file(queries, spec, varied, manifest);
    return {{"command", "perturb-queries"},
            {"family", variation.family},
            {"queries", r.queries},
            {"flagged", r.flagged},
            {"output", varied.string()},
            {"manifest", manifest.string()}};
}

nlohmann::json cmd_compare(const fs::path& report_a, const fs::path& report_b, const fs::path& out) {
    const EvalReport a = EvalReport::load(report_a);
    const EvalReport b = EvalReport::load(report_b);
    const auto rows = compare_reports(a, b);
    const std::string name_a = a.tag.empty() ? "A" : a.tag;
    std::string name_b = b.tag.empty() ? "B" : b.tag;
    if (name_b == name_a) name_b += " (B)";
    const std::string md = format_comparison_markdown(rows, name_a, name_b);
    write_text(out / "comparison.md", md);
    write_text(out / "comparison.tsv", format_comparison_tsv(rows));
    nlohmann::json summary = {{"command", "compare"}, {"table", md}};
    for (const auto& r : rows) summary["metrics"][r.metric] = {{"t", r.test.t}, {"p", r.test.p}, {"significant", r.test.significant}};
    return summary;
}

}  // namespace advrank
