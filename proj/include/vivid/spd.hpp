#pragma once

#include <string>
#include <utility>
#include <vector>

#include "vivid/common.hpp"
#include "vivid/tensor.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// SPD projector: G groups of M learnable queries cross-attend over the ViT
// token features with projections shared by every group, produce semantic
// tokens, and pay an orthogonality penalty pushing the groups' attention
// maps toward disjoint supports.
// ---------------------------------------------------------------------------

struct SpdConfig {
    int num_groups = 4;
    int queries_per_group = 2;
    int heads = 1;       // 1 matches the single-head equations; 4 optional
    int vit_dim = 32;
    int head_dim = 32;   // attention width per head; heads*head_dim == vit_dim
    int teacher_dim = 64;
    int mlp_hidden = 64;
    int patch_stride = 2;

    void validate() const {
        if (num_groups < 1) throw ConfigError("num_groups must be >= 1");
        if (queries_per_group < 1) throw ConfigError("queries_per_group must be >= 1");
        if (heads < 1) throw ConfigError("heads must be >= 1");
        if (vit_dim < 1 || head_dim < 1 || teacher_dim < 1 || mlp_hidden < 1) {
            throw ConfigError("spd dimensions must be >= 1");
        }
        if (patch_stride < 1) throw ConfigError("patch_stride must be >= 1");
        // The same MLP serves SPD tokens (width heads*head_dim) and raw patch
        // tokens (width vit_dim), so the two widths must agree.
        if (heads * head_dim != vit_dim) {
            throw ConfigError("heads*head_dim must equal vit_dim, got " +
                              std::to_string(heads) + "*" + std::to_string(head_dim) + " vs " +
                              std::to_string(vit_dim));
        }
    }

    int spd_tokens() const { return num_groups * queries_per_group; }
};

struct SpdParams {
    std::vector<TensorPtr> queries;  // per group, M x d_v
    TensorPtr w_q, w_k, w_v;         // shared across groups, d_v x (H*d_h)
    TensorPtr mlp_w1, mlp_b1;        // shared 2-layer MLP to the teacher width
    TensorPtr mlp_w2, mlp_b2;

    std::vector<std::pair<std::string, TensorPtr>> named() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t g = 0; g < queries.size(); ++g) {
            out.emplace_back("spd.query." + std::to_string(g), queries[g]);
        }
        out.emplace_back("spd.wq", w_q);
        out.emplace_back("spd.wk", w_k);
        out.emplace_back("spd.wv", w_v);
        out.emplace_back("spd.mlp.w1", mlp_w1);
        out.emplace_back("spd.mlp.b1", mlp_b1);
        out.emplace_back("spd.mlp.w2", mlp_w2);
        out.emplace_back("spd.mlp.b2", mlp_b2);
        return out;
    }
};

inline SpdParams spd_init(const SpdConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    SpdParams p;
    const int width = cfg.heads * cfg.head_dim;
    for (int g = 0; g < cfg.num_groups; ++g) {
        p.queries.push_back(randn(rng, {cfg.queries_per_group, cfg.vit_dim}, init_std, true));
    }
    p.w_q = randn(rng, {cfg.vit_dim, width}, init_std, true);
    p.w_k = randn(rng, {cfg.vit_dim, width}, init_std, true);
    p.w_v = randn(rng, {cfg.vit_dim, width}, init_std, true);
    p.mlp_w1 = randn(rng, {width, cfg.mlp_hidden}, init_std, true);
    p.mlp_b1 = zeros({cfg.mlp_hidden}, true);
    p.mlp_w2 = randn(rng, {cfg.mlp_hidden, cfg.teacher_dim}, init_std, true);
    p.mlp_b2 = zeros({cfg.teacher_dim}, true);
    return p;
}

struct SpdOutput {
    std::vector<TensorPtr> maps;    // A_g, M x L, head-averaged when H > 1
    std::vector<TensorPtr> tokens;  // T_g, M x (H*d_h), heads concatenated
    TensorPtr ortho;                // scalar regularizer over the maps
    TensorPtr projected;            // (G*M + n_patch) x d_t, empty until project_tokens
};

// Sum over ordered pairs g != g' of ||A_g A_g'^T||_F^2. Zero iff every pair
// of rows drawn from different groups has disjoint support (entries are
// nonnegative after softmax).
inline TensorPtr ortho_loss(Tape& tape, const std::vector<TensorPtr>& maps) {
    if (maps.empty()) throw DomainError("ortho_loss: no attention maps");
    for (const auto& m : maps) detail::require_same_shape(m, maps[0], "ortho_loss");
    TensorPtr total = scalar_tensor(0.0);
    for (std::size_t g = 0; g < maps.size(); ++g) {
        for (std::size_t h = 0; h < maps.size(); ++h) {
            if (g == h) continue;
            auto cross = matmul(tape, maps[g], transpose(tape, maps[h]));
            total = add(tape, total, frobenius_sq(tape, cross));
        }
    }
    return total;
}

// A_g = softmax(Q_g W_Q (X W_K)^T / sqrt(d_h)), T_g = A_g (X W_V), evaluated
// per head when H > 1; the per-head maps are arithmetic-averaged into the
// reported A_g and the per-head values concatenated into T_g.
inline SpdOutput spd_attention(Tape& tape, const TensorPtr& x, const SpdParams& params,
                               const SpdConfig& cfg) {
    cfg.validate();
    detail::require_matrix(x, "spd_attention");
    if (x->cols() != cfg.vit_dim) {
        throw ShapeError("spd_attention: expected token width " + std::to_string(cfg.vit_dim) +
                         ", got " + shape_str(x->shape));
    }
    if (static_cast<int>(params.queries.size()) != cfg.num_groups) {
        throw ShapeError("spd_attention: " + std::to_string(params.queries.size()) +
                         " query groups for num_groups " + std::to_string(cfg.num_groups));
    }
    const int width = cfg.heads * cfg.head_dim;
    auto keys = matmul(tape, x, params.w_k);    // L x width
    auto values = matmul(tape, x, params.w_v);  // L x width

    SpdOutput out;
    for (int g = 0; g < cfg.num_groups; ++g) {
        const auto& q = params.queries[g];
        if (q->rows() != cfg.queries_per_group || q->cols() != cfg.vit_dim) {
            throw ShapeError("spd_attention: group " + std::to_string(g) + " queries " +
                             shape_str(q->shape));
        }
        auto qp = matmul(tape, q, params.w_q);  // M x width
        std::vector<TensorPtr> head_maps, head_tokens;
        for (int h = 0; h < cfg.heads; ++h) {
            const int c0 = h * cfg.head_dim, c1 = (h + 1) * cfg.head_dim;
            auto qh = cfg.heads == 1 ? qp : slice(tape, qp, 0, qp->rows(), c0, c1);
            auto kh = cfg.heads == 1 ? keys : slice(tape, keys, 0, keys->rows(), c0, c1);
            auto vh = cfg.heads == 1 ? values : slice(tape, values, 0, values->rows(), c0, c1);
            auto a = softmax_rows(tape, scaled_dot(tape, qh, kh));
            head_maps.push_back(a);
            head_tokens.push_back(matmul(tape, a, vh));
        }
        TensorPtr map = head_maps[0];
        if (cfg.heads > 1) {
            for (int h = 1; h < cfg.heads; ++h) map = add(tape, map, head_maps[h]);
            map = scale(tape, map, 1.0 / cfg.heads);
        }
        out.maps.push_back(map);
        out.tokens.push_back(cfg.heads == 1 ? head_tokens[0] : concat_cols(tape, head_tokens));
    }
    out.ortho = ortho_loss(tape, out.maps);
    return out;
}

// Non-CLS token rows at a uniform stride: indices 1, 1+s, 1+2s, ... of X.
inline std::vector<int> patch_token_ids(int num_tokens, int stride) {
    if (stride < 1) throw DomainError("patch stride must be >= 1");
    if (num_tokens < 2) throw ShapeError("need at least one non-CLS token");
    std::vector<int> ids;
    for (int i = 1; i < num_tokens; i += stride) ids.push_back(i);
    return ids;
}

inline TensorPtr select_patch_tokens(Tape& tape, const TensorPtr& x, int stride) {
    return lookup_rows(tape, x, patch_token_ids(x->rows(), stride));
}

// One shared 2-layer MLP (GELU between) applied row-wise to the stacked SPD
// and patch tokens.
inline TensorPtr project_tokens(Tape& tape, const std::vector<TensorPtr>& spd_tokens,
                                const TensorPtr& patch_tokens, const SpdParams& params) {
    std::vector<TensorPtr> rows = spd_tokens;
    rows.push_back(patch_tokens);
    auto stacked = concat_rows(tape, rows);
    auto hidden = gelu(tape, add_rowwise(tape, matmul(tape, stacked, params.mlp_w1), params.mlp_b1));
    return add_rowwise(tape, matmul(tape, hidden, params.mlp_w2), params.mlp_b2);
}

// Full projector pass: attention, regularizer, token projection.
inline SpdOutput spd_forward(Tape& tape, const TensorPtr& x, const SpdParams& params,
                             const SpdConfig& cfg) {
    SpdOutput out = spd_attention(tape, x, params, cfg);
    auto patches = select_patch_tokens(tape, x, cfg.patch_stride);
    out.projected = project_tokens(tape, out.tokens, patches, params);
    return out;
}

}  // namespace vivid
