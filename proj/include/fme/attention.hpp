#pragma once

#include <array>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "fme/ops.hpp"
#include "fme/params.hpp"

// Lightweight multi-head self-attention: keys and values are spatially
// reduced by a strided 3x3 depthwise convolution over the token grid, a
// learnable relative position bias is added to the scores, and head outputs
// are concatenated and projected.

namespace fme {

struct AttentionConfig {
    int dim = 0;
    int heads = 1;
    int kv_stride = 2;
    int kv_kernel = 3;
    bool bias_enabled = true;
    // Bias-indexing granularity knob, reserved for a windowed variant; the
    // attention math is global over the stage grid.
    int window = 4;

    void validate() const {
        if (dim <= 0 || heads <= 0) throw ConfigError("attention: dim/heads must be positive");
        if (dim % heads != 0)
            throw ConfigError("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(heads));
        if (kv_stride < 1) throw ConfigError("attention: kv_stride must be >= 1");
    }
};

// Maps every (query position, reduced key position) pair to one entry of a
// per-head bias table. Offsets are taken between the query grid and the
// reduced-key grid scaled back by the stride, then truncated into the table
// extent (2*Hq-1) x (2*Wk-1), so the lookup is total.
struct RelativeBiasIndex {
    int hq = 0, wq = 0, hk = 0, wk = 0;
    std::shared_ptr<std::vector<int>> idx;  // length (hq*wq) * (hk*wk)

    static RelativeBiasIndex build(int hq, int wq, int hk, int wk, int stride) {
        RelativeBiasIndex b;
        b.hq = hq;
        b.wq = wq;
        b.hk = hk;
        b.wk = wk;
        const int rows = 2 * hq - 1;
        const int cols = 2 * wk - 1;
        auto idx = std::make_shared<std::vector<int>>();
        idx->reserve(static_cast<size_t>(hq) * wq * hk * wk);
        for (int qr = 0; qr < hq; ++qr)
            for (int qc = 0; qc < wq; ++qc)
                for (int kr = 0; kr < hk; ++kr)
                    for (int kc = 0; kc < wk; ++kc) {
                        int dr = qr - kr * stride;
                        int dc = qc - kc * stride;
                        dr = std::clamp(dr, -(hq - 1), hq - 1) + (hq - 1);
                        dc = std::clamp(dc, -(wk - 1), wk - 1) + (wk - 1);
                        idx->push_back(dr * cols + dc);
                    }
        (void)rows;
        b.idx = std::move(idx);
        return b;
    }

    int table_rows() const { return 2 * hq - 1; }
    int table_cols() const { return 2 * wk - 1; }
    int queries() const { return hq * wq; }
    int keys() const { return hk * wk; }
};

// q, k, v: three unbiased d x d projections of the token sequence.
template <typename T>
std::array<TensorT<T>, 3> qkv_project(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& wq,
                                      const TensorT<T>& wk, const TensorT<T>& wv) {
    return {linear(tp, x, wq, static_cast<const TensorT<T>*>(nullptr)),
            linear(tp, x, wk, static_cast<const TensorT<T>*>(nullptr)),
            linear(tp, x, wv, static_cast<const TensorT<T>*>(nullptr))};
}

// Strided depthwise reduction of k and v over the token grid. Returns the
// reduced sequences and the reduced grid extents.
template <typename T>
struct ReducedKv {
    TensorT<T> k;
    TensorT<T> v;
    int h = 0;
    int w = 0;
};

template <typename T>
ReducedKv<T> reduce_kv(Tape<T>* tp, const TensorT<T>& k, const TensorT<T>& v, int H, int W,
                       const AttentionConfig& cfg, const TensorT<T>& dwk_w, const TensorT<T>& dwk_b,
                       const TensorT<T>& dwv_w, const TensorT<T>& dwv_b) {
    require_shape<T>(k.shape.rank == 3 && k.shape[1] == H * W,
                     "reduce_kv: " + std::to_string(k.shape[1]) + " tokens do not form a " +
                         std::to_string(H) + "x" + std::to_string(W) + " grid");
    const int pad = cfg.kv_kernel / 2;
    auto km = tokens_to_map(tp, k, H, W);
    auto vm = tokens_to_map(tp, v, H, W);
    auto kr = conv2d(tp, km, dwk_w, &dwk_b, cfg.kv_stride, pad, cfg.dim);
    auto vr = conv2d(tp, vm, dwv_w, &dwv_b, cfg.kv_stride, pad, cfg.dim);
    ReducedKv<T> out;
    out.h = kr.shape[2];
    out.w = kr.shape[3];
    out.k = map_to_tokens(tp, kr);
    out.v = map_to_tokens(tp, vr);
    return out;
}

// Scaled dot-product attention with an additive bias:
// softmax(q k^T / sqrt(d_k) + B) v. Shapes are batched over leading dims;
// bias (when present) must be a trailing-suffix shape of the score tensor.
template <typename T>
TensorT<T> light_attention(Tape<T>* tp, const TensorT<T>& q, const TensorT<T>& k,
                           const TensorT<T>& v, const TensorT<T>* bias) {
    const int dk = q.shape[q.shape.rank - 1];
    auto scores = scale(tp, matmul_nt(tp, q, k), static_cast<T>(1.0 / std::sqrt(double(dk))));
    if (bias) scores = add_broadcast(tp, scores, *bias);
    auto attn = softmax(tp, scores, scores.shape.rank - 1);
    return matmul_nn(tp, attn, v);
}

// Bundle of LMHSA parameters for one attention sublayer.
template <typename T>
struct LmhsaParams {
    AttentionConfig cfg;
    RelativeBiasIndex bias_index;
    ParameterT<T>* wq = nullptr;
    ParameterT<T>* wk = nullptr;
    ParameterT<T>* wv = nullptr;
    ParameterT<T>* wo = nullptr;
    ParameterT<T>* dwk_w = nullptr;
    ParameterT<T>* dwk_b = nullptr;
    ParameterT<T>* dwv_w = nullptr;
    ParameterT<T>* dwv_b = nullptr;
    ParameterT<T>* bias_table = nullptr;  // (heads, (2Hq-1)*(2Wk-1)), zero-init

    LmhsaParams() = default;

    LmhsaParams(ParamStoreT<T>& store, const std::string& prefix, const AttentionConfig& config,
                int H, int W, Rng& rng)
        : cfg(config) {
        cfg.validate();
        const int d = cfg.dim;
        const int hk = (H + 2 * (cfg.kv_kernel / 2) - cfg.kv_kernel) / cfg.kv_stride + 1;
        const int wk_ = (W + 2 * (cfg.kv_kernel / 2) - cfg.kv_kernel) / cfg.kv_stride + 1;
        bias_index = RelativeBiasIndex::build(H, W, hk, wk_, cfg.kv_stride);
        wq = store.create(prefix + ".wq", Shape{d, d}, Init::he_normal, rng, true);
        wk = store.create(prefix + ".wk", Shape{d, d}, Init::he_normal, rng, true);
        wv = store.create(prefix + ".wv", Shape{d, d}, Init::he_normal, rng, true);
        // small output projection keeps the attention sublayer near identity
        // at initialization (the residual stream carries no normalization)
        wo = store.create(prefix + ".wo", Shape{d, d}, Init::he_normal, rng, true, 0.1);
        dwk_w = store.create(prefix + ".dwk.w", Shape{d, 1, cfg.kv_kernel, cfg.kv_kernel},
                             Init::he_normal, rng, true);
        dwk_b = store.create(prefix + ".dwk.b", Shape{d}, Init::zeros, rng);
        dwv_w = store.create(prefix + ".dwv.w", Shape{d, 1, cfg.kv_kernel, cfg.kv_kernel},
                             Init::he_normal, rng, true);
        dwv_b = store.create(prefix + ".dwv.b", Shape{d}, Init::zeros, rng);
        if (cfg.bias_enabled)
            bias_table = store.create(
                prefix + ".bias_table",
                Shape{cfg.heads, bias_index.table_rows() * bias_index.table_cols()}, Init::zeros,
                rng);
    }
};

// Full lightweight multi-head self-attention over a stage's token grid.
template <typename T>
TensorT<T> lmhsa(Tape<T>* tp, const TensorT<T>& x, int H, int W, const LmhsaParams<T>& p) {
    require_shape<T>(x.shape.rank == 3 && x.shape[2] == p.cfg.dim,
                     "lmhsa: input " + x.shape.str() + " does not carry dim " +
                         std::to_string(p.cfg.dim));
    require_shape<T>(x.shape[1] == H * W, "lmhsa: token count != grid extent");
    auto qkv = qkv_project(tp, x, p.wq->value, p.wk->value, p.wv->value);
    auto red = reduce_kv(tp, qkv[1], qkv[2], H, W, p.cfg, p.dwk_w->value, p.dwk_b->value,
                         p.dwv_w->value, p.dwv_b->value);
    auto qh = split_heads(tp, qkv[0], p.cfg.heads);
    auto kh = split_heads(tp, red.k, p.cfg.heads);
    auto vh = split_heads(tp, red.v, p.cfg.heads);
    TensorT<T> out_heads;
    if (p.bias_table) {
        auto bias = bias_gather(tp, p.bias_table->value, p.bias_index.idx, H * W, red.h * red.w);
        out_heads = light_attention(tp, qh, kh, vh, &bias);
    } else {
        out_heads = light_attention(tp, qh, kh, vh, static_cast<const TensorT<T>*>(nullptr));
    }
    auto merged = merge_heads(tp, out_heads);
    return linear(tp, merged, p.wo->value, static_cast<const TensorT<T>*>(nullptr));
}

}  // namespace fme
