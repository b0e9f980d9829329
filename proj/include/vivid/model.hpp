#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"
#include "vivid/spd.hpp"
#include "vivid/teacher.hpp"
#include "vivid/tensor.hpp"
#include "vivid/ums.hpp"
#include "vivid/vit.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// RunConfig: every knob of a training/eval run, JSON round-trippable.
// Presets: "desk" (default, laptop scale), "paper" (published optimization
// hyperparameters on the desk architecture), "tiny" (gradcheck scale).
// ---------------------------------------------------------------------------

enum class SupervisionMode { Ums, Flat };

inline const char* supervision_name(SupervisionMode m) {
    return m == SupervisionMode::Ums ? "ums" : "flat";
}

struct RunConfig {
    double lambda_ortho = 0.01;
    double lr_vit = 1e-4;
    double lr_spd = 3e-4;
    int batch_size = 8;
    int steps = 500;
    double warmup_frac = 0.03;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 0.01;
    std::uint64_t seed = 0;
    SupervisionMode supervision = SupervisionMode::Ums;
    int k_min = 4;
    int k_max = 6;
    double low_freq_prob = 0.6;
    int checkpoint_every = 100;
    double init_std = 0.02;
    int probe_steps = 3000;
    double probe_lr = 1e-3;
    double probe_train_frac = 0.8;
    VitConfig vit;
    SpdConfig spd;
    TeacherConfig teacher;

    static RunConfig desk() {
        RunConfig c;
        c.finalize();
        return c;
    }

    static RunConfig paper() {
        RunConfig c;
        c.lr_vit = 2e-5;
        c.lr_spd = 1e-4;
        c.batch_size = 32;
        c.steps = 10000;
        c.teacher.dim = 1536;
        c.teacher.heads = 16;
        c.teacher.mlp_hidden = 6144;
        c.finalize();
        return c;
    }

    static RunConfig tiny() {
        RunConfig c;
        c.batch_size = 1;
        c.steps = 1;
        c.k_min = 2;
        c.k_max = 2;
        c.vit = VitConfig{16, 8, 8, 1, 2, 16};
        c.spd.num_groups = 2;
        c.spd.queries_per_group = 1;
        c.teacher = TeacherConfig{kVocabSize, 16, 1, 2, 32, 256};
        c.finalize();
        return c;
    }

    // Ties the cross-module dimensions together; call after any field edits.
    void finalize() {
        spd.vit_dim = vit.dim;
        spd.teacher_dim = teacher.dim;
        if (spd.head_dim * spd.heads != vit.dim) spd.head_dim = vit.dim / std::max(1, spd.heads);
        if (spd.mlp_hidden < 1) spd.mlp_hidden = teacher.dim;
    }

    void validate() const {
        if (!(lr_vit > 0.0) || !(lr_spd > 0.0)) throw ConfigError("learning rates must be > 0");
        if (!(lambda_ortho >= 0.0)) throw ConfigError("lambda_ortho must be >= 0");
        if (steps < 0) throw ConfigError("steps must be >= 0");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (!(warmup_frac >= 0.0 && warmup_frac < 1.0)) {
            throw ConfigError("warmup_frac must be in [0, 1)");
        }
        if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
            throw ConfigError("betas must be in [0, 1)");
        }
        if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
        if (k_min < 1 || k_min > k_max) throw ConfigError("need 1 <= k_min <= k_max");
        if (!(low_freq_prob >= 0.0 && low_freq_prob <= 1.0)) {
            throw ConfigError("low_freq_prob must be in [0, 1]");
        }
        if (checkpoint_every < 1) throw ConfigError("checkpoint_every must be >= 1");
        if (!(init_std > 0.0)) throw ConfigError("init_std must be > 0");
        if (probe_steps < 1) throw ConfigError("probe_steps must be >= 1");
        if (!(probe_lr > 0.0)) throw ConfigError("probe_lr must be > 0");
        if (!(probe_train_frac > 0.0 && probe_train_frac < 1.0)) {
            throw ConfigError("probe_train_frac must be in (0, 1)");
        }
        vit.validate();
        spd.validate();
        teacher.validate();
        if (spd.vit_dim != vit.dim) throw ConfigError("spd input width must equal vit dim");
        if (spd.teacher_dim != teacher.dim) {
            throw ConfigError("spd output width must equal teacher dim");
        }
    }

    nlohmann::json to_json() const;
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_json_file(const std::string& path);
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::vector<std::string>& known,
                                const std::string& where) {
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const auto& k : known) {
            if (key == k) {
                ok = true;
                break;
            }
        }
        if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + where);
    }
}

template <typename T>
inline void maybe(const nlohmann::json& j, const char* key, T& out) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const std::exception&) {
        throw ConfigError(std::string("bad value for \"") + key + "\"");
    }
}

}  // namespace detail

inline nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["lambda_ortho"] = lambda_ortho;
    j["lr_vit"] = lr_vit;
    j["lr_spd"] = lr_spd;
    j["batch_size"] = batch_size;
    j["steps"] = steps;
    j["warmup_frac"] = warmup_frac;
    j["beta1"] = beta1;
    j["beta2"] = beta2;
    j["weight_decay"] = weight_decay;
    j["seed"] = seed;
    j["supervision"] = supervision_name(supervision);
    j["k_min"] = k_min;
    j["k_max"] = k_max;
    j["low_freq_prob"] = low_freq_prob;
    j["checkpoint_every"] = checkpoint_every;
    j["init_std"] = init_std;
    j["probe_steps"] = probe_steps;
    j["probe_lr"] = probe_lr;
    j["probe_train_frac"] = probe_train_frac;
    j["vit"] = vit_config_to_json(vit);
    j["spd"] = {{"groups", spd.num_groups},
                {"queries_per_group", spd.queries_per_group},
                {"heads", spd.heads},
                {"patch_stride", spd.patch_stride},
                {"mlp_hidden", spd.mlp_hidden}};
    j["teacher"] = {{"dim", teacher.dim},
                    {"blocks", teacher.blocks},
                    {"heads", teacher.heads},
                    {"mlp_hidden", teacher.mlp_hidden},
                    {"max_positions", teacher.max_positions}};
    return j;
}

inline RunConfig RunConfig::from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    detail::reject_unknown_keys(
        j,
        {"preset", "lambda_ortho", "lr_vit", "lr_spd", "batch_size", "steps", "warmup_frac",
         "beta1", "beta2", "weight_decay", "seed", "supervision", "k_min", "k_max",
         "low_freq_prob", "checkpoint_every", "init_std", "probe_steps", "probe_lr",
         "probe_train_frac", "vit", "spd", "teacher"},
        "config");

    RunConfig c;
    if (j.contains("preset")) {
        const std::string p = j.at("preset").get<std::string>();
        if (p == "desk") {
            c = desk();
        } else if (p == "paper") {
            c = paper();
        } else if (p == "tiny") {
            c = tiny();
        } else {
            throw ConfigError("unknown preset \"" + p + "\" (expected desk, paper or tiny)");
        }
    }
    detail::maybe(j, "lambda_ortho", c.lambda_ortho);
    detail::maybe(j, "lr_vit", c.lr_vit);
    detail::maybe(j, "lr_spd", c.lr_spd);
    detail::maybe(j, "batch_size", c.batch_size);
    detail::maybe(j, "steps", c.steps);
    detail::maybe(j, "warmup_frac", c.warmup_frac);
    detail::maybe(j, "beta1", c.beta1);
    detail::maybe(j, "beta2", c.beta2);
    detail::maybe(j, "weight_decay", c.weight_decay);
    detail::maybe(j, "seed", c.seed);
    if (j.contains("supervision")) {
        const std::string s = j.at("supervision").get<std::string>();
        if (s == "ums") {
            c.supervision = SupervisionMode::Ums;
        } else if (s == "flat") {
            c.supervision = SupervisionMode::Flat;
        } else {
            throw ConfigError("supervision must be \"ums\" or \"flat\"");
        }
    }
    detail::maybe(j, "k_min", c.k_min);
    detail::maybe(j, "k_max", c.k_max);
    detail::maybe(j, "low_freq_prob", c.low_freq_prob);
    detail::maybe(j, "checkpoint_every", c.checkpoint_every);
    detail::maybe(j, "init_std", c.init_std);
    detail::maybe(j, "probe_steps", c.probe_steps);
    detail::maybe(j, "probe_lr", c.probe_lr);
    detail::maybe(j, "probe_train_frac", c.probe_train_frac);
    if (j.contains("vit")) {
        nlohmann::json merged = vit_config_to_json(c.vit);
        for (const auto& [key, value] : j.at("vit").items()) merged[key] = value;
        c.vit = vit_config_from_json(merged);
    }
    if (j.contains("spd")) {
        const auto& s = j.at("spd");
        detail::reject_unknown_keys(
            s, {"groups", "queries_per_group", "heads", "patch_stride", "mlp_hidden"}, "spd");
        detail::maybe(s, "groups", c.spd.num_groups);
        detail::maybe(s, "queries_per_group", c.spd.queries_per_group);
        detail::maybe(s, "heads", c.spd.heads);
        detail::maybe(s, "patch_stride", c.spd.patch_stride);
        detail::maybe(s, "mlp_hidden", c.spd.mlp_hidden);
    }
    if (j.contains("teacher")) {
        const auto& t = j.at("teacher");
        detail::reject_unknown_keys(
            t, {"dim", "blocks", "heads", "mlp_hidden", "max_positions"}, "teacher");
        detail::maybe(t, "dim", c.teacher.dim);
        detail::maybe(t, "blocks", c.teacher.blocks);
        detail::maybe(t, "heads", c.teacher.heads);
        detail::maybe(t, "mlp_hidden", c.teacher.mlp_hidden);
        detail::maybe(t, "max_positions", c.teacher.max_positions);
    }
    c.finalize();
    c.validate();
    return c;
}

inline RunConfig RunConfig::from_json_file(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + " is not valid JSON: " + e.what());
    }
    return from_json(j);
}

// ---------------------------------------------------------------------------
// Model: trainable encoder + projector around the frozen decoder. Seeded
// initialization draws in a fixed order (vit, spd, teacher) from one stream.
// ---------------------------------------------------------------------------

struct Model {
    RunConfig cfg;
    VitParams vit;
    SpdParams spd;
    TeacherParams teacher;

    std::vector<std::pair<std::string, TensorPtr>> trainable_named() const {
        auto out = vit.named();
        auto s = spd.named();
        out.insert(out.end(), s.begin(), s.end());
        return out;
    }

    std::vector<std::pair<std::string, TensorPtr>> all_named() const {
        auto out = trainable_named();
        auto t = teacher.named();
        out.insert(out.end(), t.begin(), t.end());
        return out;
    }
};

inline Model init_model(const RunConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    Rng rng(cfg.seed);
    m.vit = vit_init(cfg.vit, rng, cfg.init_std);
    m.spd = spd_init(cfg.spd, rng, cfg.init_std);
    m.teacher = teacher_init(cfg.teacher, rng, cfg.init_std);
    return m;
}

// Loads parameter values from a checkpoint into a freshly shaped model.
inline Model model_from_tensors(const RunConfig& cfg,
                                const std::map<std::string, TensorPtr>& tensors) {
    Model m = init_model(cfg);
    for (auto& [name, t] : m.all_named()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw ValidationError("checkpoint is missing tensor " + name);
        if (it->second->shape != t->shape) {
            throw ShapeError("checkpoint tensor " + name + " has the wrong shape");
        }
        t->values = it->second->values;
    }
    return m;
}

// The task instruction handed to the decoder, naming the queried findings.
inline std::string build_instruction(const std::vector<std::string>& fields) {
    std::string s = "Report the state of: ";
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) s += ", ";
        s += fields[i];
    }
    return s;
}

// Teacher-forced decoder inputs: masked positions carry PAD instead of the
// original byte so no content from a masked span can reach other positions
// through attention. Targets keep the original ids; their loss weight is 0.
inline std::vector<int> masked_input_ids(const SupervisionSequence& seq) {
    if (seq.token_ids.size() != seq.weights.size()) {
        throw ShapeError("supervision ids and weights differ in length");
    }
    std::vector<int> ids = seq.token_ids;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (seq.weights[i] == 0.0) ids[i] = kTokenPad;
    }
    return ids;
}

struct SampleLoss {
    TensorPtr tok;    // scalar, weighted next-token cross-entropy
    TensorPtr ortho;  // scalar, cross-group attention overlap
    TensorPtr logits;
};

inline SampleLoss sample_loss(Tape& tape, const Model& m, const Image& image,
                              const SupervisionSequence& seq) {
    if (seq.token_ids.size() < 2) throw DomainError("supervision sequence too short");
    auto x = encode(tape, image, m.vit, m.cfg.vit);
    auto spd_out = spd_forward(tape, x, m.spd, m.cfg.spd);
    const auto instruction_ids = byte_tokens(build_instruction(seq.queried_fields));
    auto teacher_out = teacher_forward(tape, spd_out.projected, instruction_ids,
                                       masked_input_ids(seq), m.teacher, m.cfg.teacher);
    std::vector<int> targets(seq.token_ids.begin() + 1, seq.token_ids.end());
    std::vector<double> weights(seq.weights.begin() + 1, seq.weights.end());
    SampleLoss out;
    out.tok = weighted_cross_entropy(tape, teacher_out.logits, targets, weights);
    out.ortho = spd_out.ortho;
    out.logits = teacher_out.logits;
    return out;
}

struct BatchLoss {
    TensorPtr total;  // L_tok + lambda * L_ortho, each component batch-mean
    TensorPtr tok;
    TensorPtr ortho;
};

struct BatchSample {
    const Image* image = nullptr;
    const SupervisionSequence* seq = nullptr;
};

inline BatchLoss total_loss(Tape& tape, const Model& m, const std::vector<BatchSample>& batch) {
    if (batch.empty()) throw DomainError("empty batch");
    TensorPtr tok_sum, ortho_sum;
    for (const auto& s : batch) {
        auto sl = sample_loss(tape, m, *s.image, *s.seq);
        tok_sum = tok_sum ? add(tape, tok_sum, sl.tok) : sl.tok;
        ortho_sum = ortho_sum ? add(tape, ortho_sum, sl.ortho) : sl.ortho;
    }
    const double inv = 1.0 / static_cast<double>(batch.size());
    BatchLoss out;
    out.tok = scale(tape, tok_sum, inv);
    out.ortho = scale(tape, ortho_sum, inv);
    out.total = m.cfg.lambda_ortho == 0.0
                    ? out.tok
                    : add(tape, out.tok, scale(tape, out.ortho, m.cfg.lambda_ortho));
    return out;
}

}  // namespace vivid
