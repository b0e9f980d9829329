#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vivid/checkpoint.hpp"
#include "vivid/common.hpp"
#include "vivid/dataset.hpp"
#include "vivid/model.hpp"
#include "vivid/optim.hpp"

namespace vivid {

namespace detail {

inline TensorPtr copy_tensor(const TensorPtr& t) {
    auto c = make_tensor(t->shape, t->values);
    c->requires_grad = t->requires_grad;
    return c;
}

// Worker-private copy of the trainable parameters. The frozen decoder is
// shared by reference: its values are never written during training and its
// gradients are never accumulated, so concurrent reads are safe.
inline Model clone_for_worker(const Model& m) {
    Model c;
    c.cfg = m.cfg;
    c.teacher = m.teacher;

    c.vit.patch_w = copy_tensor(m.vit.patch_w);
    c.vit.patch_b = copy_tensor(m.vit.patch_b);
    c.vit.cls = copy_tensor(m.vit.cls);
    c.vit.pos = copy_tensor(m.vit.pos);
    for (const auto& b : m.vit.blocks) {
        VitBlockParams nb;
        nb.ln1_g = copy_tensor(b.ln1_g);
        nb.ln1_b = copy_tensor(b.ln1_b);
        nb.w_q = copy_tensor(b.w_q);
        nb.b_q = copy_tensor(b.b_q);
        nb.w_k = copy_tensor(b.w_k);
        nb.b_k = copy_tensor(b.b_k);
        nb.w_v = copy_tensor(b.w_v);
        nb.b_v = copy_tensor(b.b_v);
        nb.w_o = copy_tensor(b.w_o);
        nb.b_o = copy_tensor(b.b_o);
        nb.ln2_g = copy_tensor(b.ln2_g);
        nb.ln2_b = copy_tensor(b.ln2_b);
        nb.mlp_w1 = copy_tensor(b.mlp_w1);
        nb.mlp_b1 = copy_tensor(b.mlp_b1);
        nb.mlp_w2 = copy_tensor(b.mlp_w2);
        nb.mlp_b2 = copy_tensor(b.mlp_b2);
        c.vit.blocks.push_back(std::move(nb));
    }
    c.vit.final_g = copy_tensor(m.vit.final_g);
    c.vit.final_b = copy_tensor(m.vit.final_b);

    for (const auto& q : m.spd.queries) c.spd.queries.push_back(copy_tensor(q));
    c.spd.w_q = copy_tensor(m.spd.w_q);
    c.spd.w_k = copy_tensor(m.spd.w_k);
    c.spd.w_v = copy_tensor(m.spd.w_v);
    c.spd.mlp_w1 = copy_tensor(m.spd.mlp_w1);
    c.spd.mlp_b1 = copy_tensor(m.spd.mlp_b1);
    c.spd.mlp_w2 = copy_tensor(m.spd.mlp_w2);
    c.spd.mlp_b2 = copy_tensor(m.spd.mlp_b2);
    return c;
}

inline void sync_values(Model& dst, const Model& src) {
    auto d = dst.trainable_named();
    auto s = src.trainable_named();
    for (std::size_t i = 0; i < d.size(); ++i) d[i].second->values = s[i].second->values;
}

}  // namespace detail

// Builds the teacher-forced target for one (record, fields) draw under the
// configured supervision format. The flat format carries no spans, so nothing
// is ever masked there: that is exactly what the ablation removes.
inline SupervisionSequence build_supervision(const UmsRecord& record,
                                             const std::vector<std::string>& fields,
                                             SupervisionMode mode) {
    if (mode == SupervisionMode::Ums) {
        return answerability_weights(record, fields, tokenize(serialize_canonical(record, &fields)));
    }
    SupervisionSequence seq;
    seq.token_ids = tokenize(serialize_flat(record, &fields));
    seq.weights.assign(seq.token_ids.size(), 1.0);
    seq.queried_fields = fields;
    return seq;
}

struct TrainResult {
    int steps_run = 0;
    double initial_tok = 0.0;  // mean token loss over the first smoothing window
    double final_tok = 0.0;    // mean token loss over the last smoothing window
    std::string checkpoint_path;
    std::string backbone_path;
    std::string metrics_path;
    std::vector<std::string> metrics_lines;
};

namespace detail {

inline void save_train_checkpoint(const std::string& path, const Model& model, AdamW& opt,
                                  const Rng& rng, int step) {
    auto tensors = model.all_named();
    auto moments = opt.moment_tensors();
    tensors.insert(tensors.end(), moments.begin(), moments.end());
    nlohmann::json meta;
    meta["config"] = model.cfg.to_json();
    meta["step"] = step;
    meta["rng"] = rng.state();
    meta["optimizer_step"] = opt.step_count();
    save_checkpoint(path, tensors, meta);
}

}  // namespace detail

// Restores parameters, moments, RNG and step counter saved by train_run.
// The checkpoint's config must match the model's.
struct ResumeState {
    int start_step = 0;
    Rng rng{0};
    std::int64_t optimizer_step = 0;
    std::vector<std::pair<std::string, TensorPtr>> moments;
};

inline ResumeState restore_for_resume(Model& model, const Checkpoint& ck) {
    if (!ck.meta.contains("config") || ck.meta["config"] != model.cfg.to_json()) {
        throw ValidationError("checkpoint config does not match the run config");
    }
    for (auto& [name, t] : model.all_named()) {
        const auto& saved = ck.require(name);
        if (saved->shape != t->shape) throw ShapeError("checkpoint tensor " + name + " shape");
        t->values = saved->values;
    }
    ResumeState rs;
    rs.start_step = ck.meta["step"].get<int>();
    rs.rng.set_state(ck.meta["rng"].get<std::string>());
    rs.optimizer_step = ck.meta["optimizer_step"].get<std::int64_t>();
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("adam.", 0) == 0) rs.moments.emplace_back(name, t);
    }
    return rs;
}

// One full training run: samples batches, averages per-sample gradients in
// index order (bitwise identical for any worker count), steps AdamW on the
// two learning-rate groups, logs JSONL metrics, checkpoints periodically and
// exports the backbone at the end. A non-finite loss or gradient aborts the
// run; the last periodic checkpoint stays on disk.
//
// until_step (when >= 0) stops early while keeping the cfg.steps learning
// rate schedule, so a stopped-and-resumed run retraces the uninterrupted one
// bitwise.
inline TrainResult train_run(Model& model, const Dataset& ds, const std::string& out_dir,
                             const std::string& resume_from = "", int until_step = -1) {
    model.cfg.validate();
    if (ds.samples.empty()) throw DomainError("empty dataset");
    const auto& cfg = model.cfg;
    const int f_count = static_cast<int>(ds.schema.findings.size());
    const int k_lo = std::min(cfg.k_min, f_count);
    const int k_hi = std::min(cfg.k_max, f_count);

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

    TrainResult res;
    res.checkpoint_path = out_dir + "/checkpoint.vivd";
    res.backbone_path = out_dir + "/backbone.vivd";
    res.metrics_path = out_dir + "/metrics.jsonl";

    AdamW opt({{"vit", model.vit.named()}, {"spd", model.spd.named()}}, cfg.beta1, cfg.beta2,
              1e-8, cfg.weight_decay);
    Rng rng(cfg.seed + 1);  // data-order stream, separate from the init stream
    int start_step = 0;
    if (!resume_from.empty()) {
        auto rs = restore_for_resume(model, load_checkpoint(resume_from));
        start_step = rs.start_step;
        rng = rs.rng;
        opt.restore(rs.optimizer_step, rs.moments);
    }

    const int end_step = until_step < 0 ? cfg.steps : std::min(cfg.steps, until_step);
    const int workers = std::min(worker_threads(), cfg.batch_size);
    std::vector<Model> clones;
    for (int w = 0; w < workers; ++w) clones.push_back(detail::clone_for_worker(model));

    const auto master_params = model.trainable_named();
    std::vector<double> tok_history;

    struct Slot {
        SupervisionSequence seq;
        const Image* image = nullptr;
        double tok = 0.0, ortho = 0.0;
        std::vector<std::vector<double>> grads;
    };

    for (int step = start_step; step < end_step; ++step) {
        std::vector<Slot> slots(static_cast<std::size_t>(cfg.batch_size));
        for (auto& slot : slots) {
            const auto sample_idx =
                static_cast<std::size_t>(rng.uniform_int(static_cast<int>(ds.samples.size())));
            const auto& sample = ds.samples[sample_idx];
            auto fields = sample_fields(ds.schema, rng, k_lo, k_hi, cfg.low_freq_prob);
            slot.seq = build_supervision(sample.record, fields, cfg.supervision);
            slot.image = &sample.image;
        }

        for (auto& c : clones) detail::sync_values(c, model);
        parallel_for(cfg.batch_size, workers, [&](int w, int i) {
            Model& m = clones[static_cast<std::size_t>(w)];
            auto params = m.trainable_named();
            for (auto& [name, t] : params) t->zero_grad();
            Tape tape;
            auto sl = sample_loss(tape, m, *slots[static_cast<std::size_t>(i)].image,
                                  slots[static_cast<std::size_t>(i)].seq);
            auto total = cfg.lambda_ortho == 0.0
                             ? sl.tok
                             : add(tape, sl.tok, scale(tape, sl.ortho, cfg.lambda_ortho));
            tape.backward(total);
            auto& slot = slots[static_cast<std::size_t>(i)];
            slot.tok = sl.tok->values[0];
            slot.ortho = sl.ortho->values[0];
            slot.grads.reserve(params.size());
            for (auto& [name, t] : params) slot.grads.push_back(t->grad);
        });

        const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
        double tok_sum = 0.0, ortho_sum = 0.0;
        for (auto& [name, t] : master_params) t->zero_grad();
        for (const auto& slot : slots) {
            tok_sum += slot.tok;
            ortho_sum += slot.ortho;
            for (std::size_t p = 0; p < master_params.size(); ++p) {
                auto& g = master_params[p].second->grad;
                const auto& sg = slot.grads[p];
                for (std::size_t k = 0; k < g.size(); ++k) g[k] += sg[k] * inv_b;
            }
        }
        const double loss_tok = tok_sum * inv_b;
        const double loss_ortho = ortho_sum * inv_b;
        const double loss = loss_tok + cfg.lambda_ortho * loss_ortho;
        if (!std::isfinite(loss)) {
            throw Error("non-finite loss at step " + std::to_string(step) +
                        "; last periodic checkpoint retained");
        }

        const double factor = schedule_factor(step, cfg.steps, cfg.warmup_frac);
        const double lr_vit = cfg.lr_vit * factor;
        const double lr_spd = cfg.lr_spd * factor;
        auto stepped = opt.step({lr_vit, lr_spd});
        if (!stepped.applied) {
            throw Error("optimizer rejected step " + std::to_string(step) + ": " +
                        stepped.diagnostic + "; last periodic checkpoint retained");
        }

        nlohmann::json line = {{"step", step},        {"loss", loss},
                               {"loss_tok", loss_tok}, {"loss_ortho", loss_ortho},
                               {"lr_vit", lr_vit},     {"lr_spd", lr_spd}};
        res.metrics_lines.push_back(line.dump());
        tok_history.push_back(loss_tok);

        if ((step + 1) % cfg.checkpoint_every == 0 && step + 1 < end_step) {
            detail::save_train_checkpoint(res.checkpoint_path, model, opt, rng, step + 1);
        }
    }

    detail::save_train_checkpoint(res.checkpoint_path, model, opt, rng, end_step);
    export_backbone(load_checkpoint(res.checkpoint_path), res.backbone_path);

    std::string metrics_text;
    for (const auto& l : res.metrics_lines) {
        metrics_text += l;
        metrics_text += '\n';
    }
    atomic_write_file(res.metrics_path, metrics_text);

    res.steps_run = end_step - start_step;
    if (!tok_history.empty()) {
        const std::size_t window = std::min<std::size_t>(25, tok_history.size());
        double first = 0.0, last = 0.0;
        for (std::size_t i = 0; i < window; ++i) {
            first += tok_history[i];
            last += tok_history[tok_history.size() - window + i];
        }
        res.initial_tok = first / static_cast<double>(window);
        res.final_tok = last / static_cast<double>(window);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Attention-map export and overlap analysis over a trained full checkpoint.
// ---------------------------------------------------------------------------

struct AttentionMaps {
    std::string image_id;
    std::vector<TensorPtr> maps;  // per group, M x L, head-averaged
};

inline std::vector<AttentionMaps> compute_attention_maps(const Model& model,
                                                         const std::vector<Sample>& samples) {
    std::vector<AttentionMaps> out(samples.size());
    parallel_for(static_cast<int>(samples.size()), worker_threads(), [&](int, int i) {
        const auto& s = samples[static_cast<std::size_t>(i)];
        Tape tape;
        auto x = encode(tape, s.image, model.vit, model.cfg.vit);
        auto spd_out = spd_attention(tape, x, model.spd, model.cfg.spd);
        out[static_cast<std::size_t>(i)].image_id = s.record.image_id;
        out[static_cast<std::size_t>(i)].maps = spd_out.maps;
    });
    return out;
}

// Mean over images of the summed squared cross-group map products (the same
// quantity the regularizer penalizes), used to compare runs.
inline double mean_map_overlap(const Model& model, const std::vector<Sample>& samples) {
    if (samples.empty()) throw DomainError("no samples");
    auto all = compute_attention_maps(model, samples);
    double sum = 0.0;
    for (const auto& am : all) {
        Tape tape;
        sum += ortho_loss(tape, am.maps)->values[0];
    }
    return sum / static_cast<double>(samples.size());
}

namespace detail {

inline std::string format_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace detail

// Writes per image and group one CSV (M x L attention rows) and one PGM (the
// patch-grid view, query rows stacked vertically, file-max normalized).
// Returns the number of files written.
inline int export_attention(const Model& model, const std::vector<Sample>& samples,
                            const std::string& out_dir) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory " + out_dir + ": " + ec.message());

    const int grid = model.cfg.vit.grid();
    const int tokens = model.cfg.vit.num_tokens();
    auto all = compute_attention_maps(model, samples);
    int files = 0;
    for (const auto& am : all) {
        for (std::size_t g = 0; g < am.maps.size(); ++g) {
            const auto& map = am.maps[g];
            const std::string base = out_dir + "/" + am.image_id + "_group" + std::to_string(g);

            std::string csv;
            for (int q = 0; q < map->rows(); ++q) {
                for (int t = 0; t < map->cols(); ++t) {
                    if (t) csv += ',';
                    csv += detail::format_g17(map->at(q, t));
                }
                csv += '\n';
            }
            atomic_write_file(base + ".csv", csv);
            ++files;

            // Patch columns only (CLS dropped), one grid block per query row.
            double mx = 0.0;
            for (int q = 0; q < map->rows(); ++q) {
                for (int t = 1; t < tokens; ++t) mx = std::max(mx, map->at(q, t));
            }
            std::string pgm = "P2\n" + std::to_string(grid) + " " +
                              std::to_string(grid * map->rows()) + "\n255\n";
            for (int q = 0; q < map->rows(); ++q) {
                for (int r = 0; r < grid; ++r) {
                    for (int c = 0; c < grid; ++c) {
                        const double v = map->at(q, 1 + r * grid + c);
                        const int px =
                            mx == 0.0 ? 0
                                      : static_cast<int>(std::lround(255.0 * v / mx));
                        if (c) pgm += ' ';
                        pgm += std::to_string(px);
                    }
                    pgm += '\n';
                }
            }
            atomic_write_file(base + ".pgm", pgm);
            ++files;
        }
    }
    return files;
}

}  // namespace vivid
