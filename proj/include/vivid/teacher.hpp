#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "vivid/common.hpp"
#include "vivid/tensor.hpp"
#include "vivid/ums.hpp"

namespace vivid {

// ---------------------------------------------------------------------------
// Frozen causal text decoder. Stands in for a full language model: same
// interface (embeds a mixed visual/token sequence, prefix-LM attention,
// tied-embedding logits over the byte vocabulary), desk-scale width. All
// parameters are created with requires_grad=false; gradients flow only into
// the visual rows supplied by the caller.
// ---------------------------------------------------------------------------

struct TeacherConfig {
    int vocab = kVocabSize;
    int dim = 64;  // d_t
    int blocks = 2;
    int heads = 4;
    int mlp_hidden = 256;
    int max_positions = 512;

    void validate() const {
        if (vocab < 1 || dim < 1 || blocks < 1 || heads < 1 || mlp_hidden < 1 ||
            max_positions < 1) {
            throw ConfigError("teacher dims must be >= 1");
        }
        if (dim % heads != 0) {
            throw ConfigError("teacher heads " + std::to_string(heads) + " must divide dim " +
                              std::to_string(dim));
        }
    }
};

struct TeacherBlockParams {
    TensorPtr ln1_g, ln1_b;
    TensorPtr w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o;
    TensorPtr ln2_g, ln2_b;
    TensorPtr mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

struct TeacherParams {
    TensorPtr tok_embed;  // vocab x dim, also the (tied) output head
    TensorPtr pos_embed;  // max_positions x dim
    std::vector<TeacherBlockParams> blocks;
    TensorPtr final_g, final_b;

    std::vector<std::pair<std::string, TensorPtr>> named() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        out.emplace_back("teacher.tok_embed", tok_embed);
        out.emplace_back("teacher.pos_embed", pos_embed);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const std::string p = "teacher.block" + std::to_string(i) + ".";
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
        out.emplace_back("teacher.final.g", final_g);
        out.emplace_back("teacher.final.b", final_b);
        return out;
    }
};

inline TeacherParams teacher_init(const TeacherConfig& cfg, Rng& rng, double init_std = 0.02) {
    cfg.validate();
    TeacherParams p;
    p.tok_embed = randn(rng, {cfg.vocab, cfg.dim}, init_std, false);
    p.pos_embed = randn(rng, {cfg.max_positions, cfg.dim}, init_std, false);
    for (int i = 0; i < cfg.blocks; ++i) {
        TeacherBlockParams b;
        b.ln1_g = full({cfg.dim}, 1.0, false);
        b.ln1_b = zeros({cfg.dim}, false);
        b.w_q = randn(rng, {cfg.dim, cfg.dim}, init_std, false);
        b.b_q = zeros({cfg.dim}, false);
        b.w_k = randn(rng, {cfg.dim, cfg.dim}, init_std, false);
        b.b_k = zeros({cfg.dim}, false);
        b.w_v = randn(rng, {cfg.dim, cfg.dim}, init_std, false);
        b.b_v = zeros({cfg.dim}, false);
        b.w_o = randn(rng, {cfg.dim, cfg.dim}, init_std, false);
        b.b_o = zeros({cfg.dim}, false);
        b.ln2_g = full({cfg.dim}, 1.0, false);
        b.ln2_b = zeros({cfg.dim}, false);
        b.mlp_w1 = randn(rng, {cfg.dim, cfg.mlp_hidden}, init_std, false);
        b.mlp_b1 = zeros({cfg.mlp_hidden}, false);
        b.mlp_w2 = randn(rng, {cfg.mlp_hidden, cfg.dim}, init_std, false);
        b.mlp_b2 = zeros({cfg.dim}, false);
        p.blocks.push_back(std::move(b));
    }
    p.final_g = full({cfg.dim}, 1.0, false);
    p.final_b = zeros({cfg.dim}, false);
    return p;
}

// Prefix-LM attention mask over the layout [prefix rows][target rows]:
// every position sees the whole prefix, target positions additionally see
// earlier targets and themselves, prefix positions never see targets.
// Row-major bytes, 1 = may attend.
inline std::vector<std::uint8_t> prefix_lm_mask(int prefix_len, int target_len) {
    const int n = prefix_len + target_len;
    std::vector<std::uint8_t> mask(static_cast<std::size_t>(n) * n, 0);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            const bool ok = j < prefix_len || (i >= prefix_len && j <= i);
            mask[static_cast<std::size_t>(i) * n + j] = ok ? 1 : 0;
        }
    }
    return mask;
}

namespace detail {

inline TensorPtr teacher_self_attention(Tape& tape, const TensorPtr& x,
                                        const TeacherBlockParams& b, int heads,
                                        const std::vector<std::uint8_t>& mask) {
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
        auto a = masked_softmax_rows(tape, scaled_dot(tape, qh, kh), mask);
        outs.push_back(matmul(tape, a, vh));
    }
    auto merged = heads == 1 ? outs[0] : concat_cols(tape, outs);
    return add_rowwise(tape, matmul(tape, merged, b.w_o), b.b_o);
}

}  // namespace detail

struct TeacherOutput {
    TensorPtr logits;  // (target_len - 1) x vocab; row t scores target token t+1
    int prefix_len = 0;
    int total_len = 0;
};

// Runs the decoder over [visual][SEP][instruction][SEP][target]. visual_rows
// must be n_vis x dim and is the only gradient path; instruction and target
// ids are embedded through the frozen table. target_ids must include BOS/EOS
// and have length >= 2 so at least one next-token prediction exists.
inline TeacherOutput teacher_forward(Tape& tape, const TensorPtr& visual_rows,
                                     const std::vector<int>& instruction_ids,
                                     const std::vector<int>& target_ids, const TeacherParams& p,
                                     const TeacherConfig& cfg) {
    cfg.validate();
    if (visual_rows->rank() != 2 || visual_rows->cols() != cfg.dim) {
        throw ShapeError("visual rows must be n x " + std::to_string(cfg.dim));
    }
    if (target_ids.size() < 2) throw DomainError("target must hold at least two tokens");
    for (int id : instruction_ids) {
        if (id < 0 || id >= cfg.vocab) throw DomainError("instruction token id out of range");
    }
    for (int id : target_ids) {
        if (id < 0 || id >= cfg.vocab) throw DomainError("target token id out of range");
    }

    const int n_vis = visual_rows->rows();
    const int n_instr = static_cast<int>(instruction_ids.size());
    const int n_tgt = static_cast<int>(target_ids.size());
    const int prefix_len = n_vis + 1 + n_instr + 1;
    const int total = prefix_len + n_tgt;
    if (total > cfg.max_positions) {
        throw DomainError("sequence of length " + std::to_string(total) +
                          " exceeds the decoder's positional capacity of " +
                          std::to_string(cfg.max_positions));
    }

    std::vector<int> prefix_tok_ids;
    prefix_tok_ids.push_back(kTokenSep);
    prefix_tok_ids.insert(prefix_tok_ids.end(), instruction_ids.begin(), instruction_ids.end());
    prefix_tok_ids.push_back(kTokenSep);
    auto prefix_tok = lookup_rows(tape, p.tok_embed, prefix_tok_ids);
    auto target_tok = lookup_rows(tape, p.tok_embed, target_ids);
    auto x = concat_rows(tape, {visual_rows, prefix_tok, target_tok});

    std::vector<int> pos_ids(total);
    for (int i = 0; i < total; ++i) pos_ids[i] = i;
    x = add(tape, x, lookup_rows(tape, p.pos_embed, pos_ids));

    auto mask = prefix_lm_mask(prefix_len, n_tgt);
    for (const auto& b : p.blocks) {
        auto attn = detail::teacher_self_attention(
            tape, layer_norm(tape, x, b.ln1_g, b.ln1_b), b, cfg.heads, mask);
        x = add(tape, x, attn);
        auto h = layer_norm(tape, x, b.ln2_g, b.ln2_b);
        auto m = add_rowwise(tape,
                             matmul(tape, gelu(tape, add_rowwise(tape, matmul(tape, h, b.mlp_w1),
                                                                 b.mlp_b1)),
                                    b.mlp_w2),
                             b.mlp_b2);
        x = add(tape, x, m);
    }
    x = layer_norm(tape, x, p.final_g, p.final_b);

    // Hidden states of target positions 0..n_tgt-2 predict tokens 1..n_tgt-1.
    auto h_tgt = slice_rows(tape, x, prefix_len, prefix_len + n_tgt - 1);
    TeacherOutput out;
    out.logits = matmul(tape, h_tgt, transpose(tape, p.tok_embed));
    out.prefix_len = prefix_len;
    out.total_len = total;
    return out;
}

}  // namespace vivid
