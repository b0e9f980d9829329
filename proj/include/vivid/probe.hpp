#pragma once

// Deployment-side evaluation. This header deliberately depends only on the
// vision encoder, the checkpoint container and the metrics: the projector and
// the decoder do not exist on this path.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vivid/checkpoint.hpp"
#include "vivid/common.hpp"
#include "vivid/dataset.hpp"
#include "vivid/metrics.hpp"
#include "vivid/optim.hpp"
#include "vivid/tensor.hpp"
#include "vivid/vit.hpp"

namespace vivid {

struct ProbeConfig {
    int steps = 3000;
    double lr = 1e-3;
    double train_frac = 0.8;
    std::uint64_t seed = 0;
    bool shuffle_labels = false;  // negative control: breaks image/label pairing

    void validate() const {
        if (steps < 1) throw ConfigError("probe steps must be >= 1");
        if (!(lr > 0.0)) throw ConfigError("probe lr must be > 0");
        if (!(train_frac > 0.0 && train_frac < 1.0)) {
            throw ConfigError("probe train_frac must be in (0, 1)");
        }
    }
};

struct Backbone {
    VitConfig cfg;
    VitParams params;
};

// Accepts only genuine backbone exports: the flag must be set and every
// tensor must belong to the encoder namespace. A full training checkpoint
// (projector or decoder tensors present) is rejected.
inline Backbone load_backbone(const Checkpoint& ck) {
    if (!ck.meta.contains("backbone") || ck.meta["backbone"] != true) {
        throw ValidationError("not a backbone file (flag missing)");
    }
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("vit.", 0) != 0) {
            throw ValidationError("backbone file carries non-encoder tensor " + name);
        }
    }
    if (!ck.meta.contains("config") || !ck.meta["config"].contains("vit")) {
        throw ValidationError("backbone file lacks an encoder config");
    }
    Backbone bb;
    bb.cfg = vit_config_from_json(ck.meta["config"]["vit"]);
    bb.params = vit_from_tensors(bb.cfg, ck.tensors);
    return bb;
}

inline Backbone load_backbone_file(const std::string& path) {
    return load_backbone(load_checkpoint(path));
}

// CLS rows for every image, N x d_v. Forward only; backbone tensors are
// frozen so the per-image tapes stay empty.
inline TensorPtr cls_embeddings(const Backbone& bb, const std::vector<Sample>& samples) {
    if (samples.empty()) throw DomainError("no samples to embed");
    const int d = bb.cfg.dim;
    auto out = zeros({static_cast<int>(samples.size()), d});
    parallel_for(static_cast<int>(samples.size()), worker_threads(), [&](int, int i) {
        Tape tape;
        auto x = encode(tape, samples[static_cast<std::size_t>(i)].image, bb.params, bb.cfg);
        for (int c = 0; c < d; ++c) {
            out->values[static_cast<std::size_t>(i) * d + c] = x->at(0, c);
        }
    });
    return out;
}

// Per-class binary targets. Present -> 1, absent -> 0; uncertain and
// unanswerable findings carry weight 0 and drop out of loss and metrics.
struct ProbeTargets {
    std::vector<double> y;  // N x F row-major
    std::vector<double> w;
    std::vector<std::string> classes;
    int num_classes = 0;
};

inline ProbeTargets probe_targets(const Dataset& ds) {
    ProbeTargets t;
    t.classes = ds.schema.findings;
    t.num_classes = static_cast<int>(t.classes.size());
    const std::size_t n = ds.samples.size();
    t.y.assign(n * static_cast<std::size_t>(t.num_classes), 0.0);
    t.w.assign(n * static_cast<std::size_t>(t.num_classes), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = ds.samples[i].record;
        for (int f = 0; f < t.num_classes; ++f) {
            const auto st = r.states[static_cast<std::size_t>(f)];
            const std::size_t k = i * static_cast<std::size_t>(t.num_classes) + f;
            if (st == FindingState::Present) {
                t.y[k] = 1.0;
                t.w[k] = 1.0;
            } else if (st == FindingState::Absent) {
                t.y[k] = 0.0;
                t.w[k] = 1.0;
            }
            // uncertain / null: weight stays 0
        }
    }
    return t;
}

inline std::pair<std::vector<int>, std::vector<int>> split_indices(std::size_t n,
                                                                   double train_frac,
                                                                   std::uint64_t seed) {
    if (n < 2) throw DomainError("need at least two samples to split");
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i) {
        const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)));
        std::swap(idx[i], idx[j]);
    }
    auto cut = static_cast<std::size_t>(train_frac * static_cast<double>(n));
    cut = std::max<std::size_t>(1, std::min(cut, n - 1));
    return {std::vector<int>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(cut)),
            std::vector<int>(idx.begin() + static_cast<std::ptrdiff_t>(cut), idx.end())};
}

struct ProbeResult {
    MetricsReport report;
    TensorPtr w;  // d_v x F
    TensorPtr b;  // F
    std::vector<std::string> classes;
    double final_train_loss = 0.0;

    nlohmann::json to_json() const {
        return {{"report", report.to_json()},
                {"classes", classes},
                {"final_train_loss", final_train_loss}};
    }
};

namespace detail {

inline TensorPtr gather_rows(const TensorPtr& m, const std::vector<int>& rows) {
    const int d = m->cols();
    auto out = zeros({static_cast<int>(rows.size()), d});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto* src = m->values.data() + static_cast<std::size_t>(rows[i]) * d;
        std::copy(src, src + d, out->values.data() + i * static_cast<std::size_t>(d));
    }
    return out;
}

template <typename T>
inline std::vector<T> gather_flat(const std::vector<T>& v, const std::vector<int>& rows, int width) {
    std::vector<T> out(rows.size() * static_cast<std::size_t>(width));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int c = 0; c < width; ++c) {
            out[i * static_cast<std::size_t>(width) + c] =
                v[static_cast<std::size_t>(rows[i]) * width + c];
        }
    }
    return out;
}

}  // namespace detail

// Metrics of a trained head on the held-out rows.
inline MetricsReport score_probe_head(const TensorPtr& w, const TensorPtr& b,
                                      const TensorPtr& test_emb, const std::vector<double>& test_y,
                                      const std::vector<double>& test_w,
                                      const std::vector<std::string>& classes) {
    const int f_count = static_cast<int>(classes.size());
    Tape tape;
    auto logits = add_rowwise(tape, matmul(tape, test_emb, w), b);
    std::vector<ClassEval> evals(static_cast<std::size_t>(f_count));
    for (int f = 0; f < f_count; ++f) evals[static_cast<std::size_t>(f)].name = classes[f];
    for (int i = 0; i < test_emb->rows(); ++i) {
        for (int f = 0; f < f_count; ++f) {
            const std::size_t k = static_cast<std::size_t>(i) * f_count + f;
            if (test_w[k] == 0.0) continue;
            const double score = 1.0 / (1.0 + std::exp(-logits->at(i, f)));
            evals[static_cast<std::size_t>(f)].scores.push_back(score);
            evals[static_cast<std::size_t>(f)].labels.push_back(test_y[k] == 1.0);
        }
    }
    return evaluate_classes(evals);
}

// Trains one linear layer on frozen CLS embeddings (full-batch AdamW) and
// reports held-out metrics. Never touches backbone parameters.
inline ProbeResult linear_probe(const Backbone& bb, const Dataset& ds, const ProbeConfig& cfg) {
    cfg.validate();
    auto emb = cls_embeddings(bb, ds.samples);
    auto targets = probe_targets(ds);

    if (cfg.shuffle_labels) {
        // Reassign whole label rows across images with a seeded permutation.
        std::vector<int> perm(ds.samples.size());
        std::iota(perm.begin(), perm.end(), 0);
        Rng rng(cfg.seed + 0x9e3779b97f4a7c15ull);
        for (std::size_t i = perm.size() - 1; i > 0; --i) {
            const auto j = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i + 1)));
            std::swap(perm[i], perm[j]);
        }
        targets.y = detail::gather_flat(targets.y, perm, targets.num_classes);
        targets.w = detail::gather_flat(targets.w, perm, targets.num_classes);
    }

    auto [train_idx, test_idx] = split_indices(ds.samples.size(), cfg.train_frac, cfg.seed);
    auto train_emb = detail::gather_rows(emb, train_idx);
    auto test_emb = detail::gather_rows(emb, test_idx);
    auto train_y = detail::gather_flat(targets.y, train_idx, targets.num_classes);
    auto train_w = detail::gather_flat(targets.w, train_idx, targets.num_classes);
    auto test_y = detail::gather_flat(targets.y, test_idx, targets.num_classes);
    auto test_w = detail::gather_flat(targets.w, test_idx, targets.num_classes);

    ProbeResult res;
    res.classes = targets.classes;
    res.w = zeros({bb.cfg.dim, targets.num_classes}, true);
    res.b = zeros({targets.num_classes}, true);

    AdamW opt({{"probe", {{"probe.w", res.w}, {"probe.b", res.b}}}});
    for (int step = 0; step < cfg.steps; ++step) {
        opt.zero_grad();
        Tape tape;
        auto logits = add_rowwise(tape, matmul(tape, train_emb, res.w), res.b);
        auto loss = sigmoid_bce(tape, logits, train_y, train_w);
        tape.backward(loss);
        auto r = opt.step({cfg.lr});
        if (!r.applied) throw Error("probe step " + std::to_string(step) + ": " + r.diagnostic);
        res.final_train_loss = loss->values[0];
    }

    res.report = score_probe_head(res.w, res.b, test_emb, test_y, test_w, res.classes);
    return res;
}

inline void save_probe_head(const std::string& path, const ProbeResult& res,
                            const ProbeConfig& cfg) {
    nlohmann::json meta;
    meta["probe_head"] = true;
    meta["classes"] = res.classes;
    meta["train_frac"] = cfg.train_frac;
    meta["seed"] = cfg.seed;
    save_checkpoint(path, {{"probe.w", res.w}, {"probe.b", res.b}}, meta);
}

// Re-evaluates a saved head against a backbone and dataset, using the same
// seeded split it was trained with.
inline ProbeResult eval_probe_head(const std::string& head_path, const Backbone& bb,
                                   const Dataset& ds) {
    auto ck = load_checkpoint(head_path);
    if (!ck.meta.contains("probe_head") || ck.meta["probe_head"] != true) {
        throw ValidationError("not a probe head file");
    }
    ProbeResult res;
    res.w = ck.require("probe.w");
    res.b = ck.require("probe.b");
    res.classes = ck.meta["classes"].get<std::vector<std::string>>();
    if (res.classes != ds.schema.findings) {
        throw ValidationError("probe head classes do not match the dataset schema");
    }
    if (res.w->rank() != 2 || res.w->rows() != bb.cfg.dim ||
        res.w->cols() != static_cast<int>(res.classes.size())) {
        throw ShapeError("probe head shape does not match the backbone width");
    }

    auto emb = cls_embeddings(bb, ds.samples);
    auto targets = probe_targets(ds);
    const double train_frac = ck.meta["train_frac"].get<double>();
    const auto seed = ck.meta["seed"].get<std::uint64_t>();
    auto [train_idx, test_idx] = split_indices(ds.samples.size(), train_frac, seed);
    auto test_emb = detail::gather_rows(emb, test_idx);
    auto test_y = detail::gather_flat(targets.y, test_idx, targets.num_classes);
    auto test_w = detail::gather_flat(targets.w, test_idx, targets.num_classes);
    res.report = score_probe_head(res.w, res.b, test_emb, test_y, test_w, res.classes);
    return res;
}

}  // namespace vivid
