#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "vivid/common.hpp"
#include "vivid/tensor.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Tiny vision transformer encoder. Grayscale image -> patch embeddings ->
// CLS + patches + learned positions -> pre-norm blocks -> final layer norm.
// CLS sits at row 0 of the output.
// ---------------------------------------------------------------------------

struct VitConfig {
    int image_size = 32;
    int patch_size = 8;
    int dim = 32;        // d_v
    int blocks = 2;
    int heads = 4;
    int mlp_hidden = 128;

    void validate() const {
        if (image_size < 1 || patch_size < 1) throw ConfigError("vit sizes must be >= 1");
        if (image_size % patch_size != 0) {
            throw ConfigError("patch size " + std::to_string(patch_size) +
                              " must divide image size " + std::to_string(image_size));
        }
        if (dim < 1 || blocks < 1 || heads < 1 || mlp_hidden < 1) {
            throw ConfigError("vit dims/blocks/heads must be >= 1");
        }
        if (dim % heads != 0) {
            throw ConfigError("heads " + std::to_string(heads) + " must divide dim " +
                              std::to_string(dim));
        }
    }

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int num_tokens() const { return 1 + num_patches(); }  // CLS first
};

inline nlohmann::json vit_config_to_json(const VitConfig& c) {
    return {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"dim", c.dim},
            {"blocks", c.blocks},         {"heads", c.heads},           {"mlp_hidden", c.mlp_hidden}};
}

inline VitConfig vit_config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("vit config must be a JSON object");
    VitConfig c;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "image_size") {
                c.image_size = value.get<int>();
            } else if (key == "patch_size") {
                c.patch_size = value.get<int>();
            } else if (key == "dim") {
                c.dim = value.get<int>();
            } else if (key == "blocks") {
                c.blocks = value.get<int>();
            } else if (key == "heads") {
                c.heads = value.get<int>();
            } else if (key == "mlp_hidden") {
                c.mlp_hidden = value.get<int>();
            } else {
                throw ConfigError("unknown key \"" + key + "\" in vit");
            }
        } catch (const nlohmann::json::exception&) {
            throw ConfigError("bad value for \"" + key + "\" in vit");
        }
    }
    c.validate();
    return c;
}

struct VitBlockParams {
    TensorPtr ln1_g, ln1_b;
    TensorPtr w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    TensorPtr ln2_g, ln2_b;
    TensorPtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct VitParams {
    TensorPtr patch_w, patch_b;  // patch_size^2 -> dim
    TensorPtr cls;               // 1 x dim
    TensorPtr pos;               // num_tokens x dim
    std::vector<VitBlockParams> blocks;
    TensorPtr final_g, final_b;

    std::vector<std::pair<std::string, TensorPtr>> named() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        out.emplace_back("vit.patch.w", patch_w);
        out.emplace_back("vit.patch.b", patch_b);
        out.emplace_back("vit.cls", cls);
        out.emplace_back("vit.pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "vit.block" + std::to_string(i) + ".";
            const auto& b = blocks[i];
            out.emplace_back(p + "ln1.g", b.ln1_g);
            out.emplace_back(p + "ln1.b", b.ln1_b);
            out.emplace_back(p + "attn.wq", b.w_q);
            out.emplace_back(p + "attn.bq", b.b_q);
            out.emplace_back(p + "attn.wk", b.w_k);
            out.emplace_back(p + "attn.bk", b.b_k);
            out.emplace_back(p + "attn.wv", b.w_v);
            out.emplace_back(p + "attn.bv", b.b_v);
            out.emplace_back(p + "attn.wo", b.w_o);
            out.emplace_back(p + "attn.bo", b.b_o);
            out.emplace_back(p + "ln2.g", b.ln2_g);
            out.emplace_back(p + "ln2.b", b.ln2_b);
            out.emplace_back(p + "mlp.w1", b.mlp_w1);
            out.emplace_back(p + "mlp.b1", b.mlp_b1);
            out.emplace_back(p + "mlp.w2", b.mlp_w2);
            out.emplace_back(p + "mlp.b2", b.mlp_b2);
        }
        out.emplace_back("vit.final.g", final_g);
        out.emplace_back("vit.final.b", final_b);
        return out;
    }
};

namespace detail {

inline VitBlockParams vit_block_init(int dim, int mlp_hidden, Rng& rng, double std_,
                                     bool trainable) {
    VitBlockParams b;
    b.ln1_g = full({dim}, 1.0, trainable);
    b.ln1_b = zeros({dim}, trainable);
    b.w_q = randn(rng, {dim, dim}, std_, trainable);
    b.b_q = zeros({dim}, trainable);
    b.w_k = randn(rng, {dim, dim}, std_, trainable);
    b.b_k = zeros({dim}, trainable);
    b.w_v = randn(rng, {dim, dim}, std_, trainable);
    b.b_v = zeros({dim}, trainable);
    b.w_o = randn(rng, {dim, dim}, std_, trainable);
    b.b_o = zeros({dim}, trainable);
    b.ln2_g = full({dim}, 1.0, trainable);
    b.ln2_b = zeros({dim}, trainable);
    b.mlp_w1 = randn(rng, {dim, mlp_hidden}, std_, trainable);
    b.mlp_b1 = zeros({mlp_hidden}, trainable);
    b.mlp_w2 = randn(rng, {mlp_hidden, dim}, std_, trainable);
    b.mlp_b2 = zeros({dim}, trainable);
    return b;
}

}  // namespace detail

inline VitParams vit_init(const VitConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    VitParams p;
    p.patch_w = randn(rng, {cfg.patch_size * cfg.patch_size, cfg.dim}, init_std, true);
    p.patch_b = zeros({cfg.dim}, true);
    p.cls = randn(rng, {1, cfg.dim}, init_std, true);
    p.pos = randn(rng, {cfg.num_tokens(), cfg.dim}, init_std, true);
    for (int i = 0; i < cfg.blocks; ++i) {
        p.blocks.push_back(detail::vit_block_init(cfg.dim, cfg.mlp_hidden, rng, init_std, true));
    }
    p.final_g = full({cfg.dim}, 1.0, true);
    p.final_b = zeros({cfg.dim}, true);
    return p;
}

// Rebuilds encoder parameters from named tensors (a loaded backbone file).
// Values are copied; tensors are created non-trainable, suitable for frozen
// feature extraction.
inline VitParams vit_from_tensors(const VitConfig& cfg,
                                  const std::map<std::string, TensorPtr>& tensors) {
    cfg.validate();
    Rng scratch(0);
    VitParams p = vit_init(cfg, scratch);
    for (auto& [name, t] : p.named()) {
        auto it = tensors.find(name);
        if (it == tensors.end()) {
            throw ValidationError("backbone is missing tensor " + name);
        }
        if (it->second->shape != t->shape) {
            throw ShapeError("backbone tensor " + name + " has the wrong shape");
        }
        t->values = it->second->values;
        t->requires_grad = false;
    }
    return p;
}

// Row-major flattening of each patch into one row: patch (pr, pc) -> row
// pr*grid + pc, pixels scanned row by row inside the patch.
inline TensorPtr patchify(const Image& img, const VitConfig& cfg) {
    if (img.height != cfg.image_size || img.width != cfg.image_size) {
        throw ShapeError("expected a " + std::to_string(cfg.image_size) + "x" +
                         std::to_string(cfg.image_size) + " image, got " +
                         std::to_string(img.height) + "x" + std::to_string(img.width));
    }
    const int g = cfg.grid(), ps = cfg.patch_size;
    std::vector<double> rows(static_cast<std::size_t>(g) * g * ps * ps);
    std::size_t k = 0;
    for (int pr = 0; pr < g; ++pr) {
        for (int pc = 0; pc < g; ++pc) {
            for (int r = 0; r < ps; ++r) {
                for (int c = 0; c < ps; ++c) rows[k++] = img.at(pr * ps + r, pc * ps + c);
            }
        }
    }
    return make_tensor({g * g, ps * ps}, std::move(rows));
}

namespace detail {

// Bidirectional multi-head self-attention over x (already normalized).
inline TensorPtr vit_self_attention(Tape& tape, const TensorPtr& x, const VitBlockParams& b,
                                    int heads) {
    const int dim = x->cols();
    const int d_h = dim / heads;
    auto q = add_rowwise(tape, matmul(tape, x, b.w_q), b.b_q);
    auto k = add_rowwise(tape, matmul(tape, x, b.w_k), b.b_k);
    auto v = add_rowwise(tape, matmul(tape, x, b.w_v), b.b_v);
    std::vector<TensorPtr> outs;
    for (int h = 0; h < heads; ++h) {
        const int c0 = h * d_h, c1 = (h + 1) * d_h;
        auto qh = heads == 1 ? q : slice(tape, q, 0, q->rows(), c0, c1);
        auto kh = heads == 1 ? k : slice(tape, k, 0, k->rows(), c0, c1);
        auto vh = heads == 1 ? v : slice(tape, v, 0, v->rows(), c0, c1);
        auto a = softmax_rows(tape, scaled_dot(tape, qh, kh));
        outs.push_back(matmul(tape, a, vh));
    }
    auto merged = heads == 1 ? outs[0] : concat_cols(tape, outs);
    return add_rowwise(tape, matmul(tape, merged, b.w_o), b.b_o);
}

}  // namespace detail

inline TensorPtr encode(Tape& tape, const Image& img, const VitParams& p, const VitConfig& cfg) {
    cfg.validate();
    auto patches = patchify(img, cfg);
    auto embedded = add_rowwise(tape, matmul(tape, patches, p.patch_w), p.patch_b);
    auto x = concat_rows(tape, {p.cls, embedded});
    x = add(tape, x, p.pos);
    for (const auto& b : p.blocks) {
        auto attn = detail::vit_self_attention(tape, layer_norm(tape, x, b.ln1_g, b.ln1_b), b,
                                               cfg.heads);
        x = add(tape, x, attn);
        auto h = layer_norm(tape, x, b.ln2_g, b.ln2_b);
        auto m = add_rowwise(tape,
                             matmul(tape, gelu(tape, add_rowwise(tape, matmul(tape, h, b.mlp_w1),
                                                                 b.mlp_b1)),
                                    b.mlp_w2),
                             b.mlp_b2);
        x = add(tape, x, m);
    }
    return layer_norm(tape, x, p.final_g, p.final_b);
}

}  // namespace vivid
