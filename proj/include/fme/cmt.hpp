#pragma once

#include <string>

#include "fme/attention.hpp"

// The CMT block: Local Perception Unit, layer-normed lightweight attention
// and layer-normed inverted-residual feed-forward, each wrapped in a skip.

namespace fme {

struct CmtBlockConfig {
    int dim = 0;
    int heads = 1;
    int irffn_ratio = 4;
    int kv_stride = 2;
    bool bias_enabled = true;

    void validate() const {
        if (dim <= 0 || heads <= 0 || dim % heads != 0)
            throw ConfigError("cmt: dim must be positive and divisible by heads");
        if (irffn_ratio < 1) throw ConfigError("cmt: irffn_ratio must be >= 1");
        if (kv_stride < 1) throw ConfigError("cmt: kv_stride must be >= 1");
    }

    AttentionConfig attention() const {
        AttentionConfig a;
        a.dim = dim;
        a.heads = heads;
        a.kv_stride = kv_stride;
        a.bias_enabled = bias_enabled;
        return a;
    }
};

// Depthwise 3x3 with identity skip over a channel map; shape preserved.
template <typename T>
TensorT<T> lpu(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& dw_w, const TensorT<T>& dw_b) {
    require_shape<T>(x.shape.rank == 4, "lpu: input must be a map");
    require_shape<T>(dw_w.shape[0] == x.shape[1],
                     "lpu: kernel channels " + std::to_string(dw_w.shape[0]) + " != map channels " +
                         std::to_string(x.shape[1]));
    auto conv = conv2d(tp, x, dw_w, &dw_b, 1, dw_w.shape[2] / 2, x.shape[1]);
    return add(tp, conv, x);
}

template <typename T>
struct IrffnParams {
    ParameterT<T>* expand_w = nullptr;  // (R*d, d, 1, 1)
    ParameterT<T>* expand_b = nullptr;
    ParameterT<T>* dw_w = nullptr;  // (R*d, 1, 3, 3)
    ParameterT<T>* dw_b = nullptr;
    ParameterT<T>* project_w = nullptr;  // (d, R*d, 1, 1)
    ParameterT<T>* project_b = nullptr;

    IrffnParams() = default;
    IrffnParams(ParamStoreT<T>& store, const std::string& prefix, int dim, int ratio, Rng& rng) {
        const int hidden = dim * ratio;
        expand_w = store.create(prefix + ".expand.w", Shape{hidden, dim, 1, 1}, Init::he_normal,
                                rng, true);
        expand_b = store.create(prefix + ".expand.b", Shape{hidden}, Init::zeros, rng);
        dw_w = store.create(prefix + ".dw.w", Shape{hidden, 1, 3, 3}, Init::he_normal, rng, true);
        dw_b = store.create(prefix + ".dw.b", Shape{hidden}, Init::zeros, rng);
        // small projection: the sublayer starts as a minor perturbation of
        // its skip path
        project_w = store.create(prefix + ".project.w", Shape{dim, hidden, 1, 1}, Init::he_normal,
                                 rng, true, 0.1);
        project_b = store.create(prefix + ".project.b", Shape{dim}, Init::zeros, rng);
    }
};

// Pointwise expand -> GELU -> (depthwise 3x3 + inner skip) -> GELU ->
// pointwise project, in map layout over the token grid.
template <typename T>
TensorT<T> irffn(Tape<T>* tp, const TensorT<T>& x, int H, int W, const IrffnParams<T>& p) {
    require_shape<T>(x.shape.rank == 3 && x.shape[1] == H * W,
                     "irffn: tokens " + x.shape.str() + " do not form the grid");
    auto m = tokens_to_map(tp, x, H, W);
    auto expanded = gelu(tp, conv2d(tp, m, p.expand_w->value, &p.expand_b->value, 1, 0));
    auto dw = conv2d(tp, expanded, p.dw_w->value, &p.dw_b->value, 1, 1, expanded.shape[1]);
    auto inner = gelu(tp, add(tp, dw, expanded));
    auto projected = conv2d(tp, inner, p.project_w->value, &p.project_b->value, 1, 0);
    return map_to_tokens(tp, projected);
}

template <typename T>
struct CmtBlockParams {
    CmtBlockConfig cfg;
    ParameterT<T>* lpu_w = nullptr;
    ParameterT<T>* lpu_b = nullptr;
    ParameterT<T>* ln1_gamma = nullptr;
    ParameterT<T>* ln1_beta = nullptr;
    LmhsaParams<T> attn;
    ParameterT<T>* ln2_gamma = nullptr;
    ParameterT<T>* ln2_beta = nullptr;
    IrffnParams<T> ffn;

    CmtBlockParams() = default;
    CmtBlockParams(ParamStoreT<T>& store, const std::string& prefix, const CmtBlockConfig& config,
                   int H, int W, Rng& rng)
        : cfg(config) {
        cfg.validate();
        const int d = cfg.dim;
        lpu_w = store.create(prefix + ".lpu.w", Shape{d, 1, 3, 3}, Init::he_normal, rng, true);
        lpu_b = store.create(prefix + ".lpu.b", Shape{d}, Init::zeros, rng);
        ln1_gamma = store.create(prefix + ".ln1.gamma", Shape{d}, Init::ones, rng);
        ln1_beta = store.create(prefix + ".ln1.beta", Shape{d}, Init::zeros, rng);
        attn = LmhsaParams<T>(store, prefix + ".lmhsa", cfg.attention(), H, W, rng);
        ln2_gamma = store.create(prefix + ".ln2.gamma", Shape{d}, Init::ones, rng);
        ln2_beta = store.create(prefix + ".ln2.beta", Shape{d}, Init::zeros, rng);
        ffn = IrffnParams<T>(store, prefix + ".irffn", d, cfg.irffn_ratio, rng);
    }
};

// Intermediate capture for the residual-identity tests.
template <typename T>
struct CmtTrace {
    TensorT<T> z;
    TensorT<T> irffn_out;
};

// y = LPU(x); z = LMHSA(LN(y)) + y; out = IRFFN(LN(z)) + z.
// The feed-forward consumes LN(z) (see README notes on the block wiring).
template <typename T>
TensorT<T> cmt_block(Tape<T>* tp, const TensorT<T>& x, int H, int W, const CmtBlockParams<T>& p,
                     CmtTrace<T>* trace = nullptr) {
    require_shape<T>(x.shape.rank == 3 && x.shape[1] == H * W && x.shape[2] == p.cfg.dim,
                     "cmt_block: input " + x.shape.str() + " does not match grid/dim");
    auto y_map = lpu(tp, tokens_to_map(tp, x, H, W), p.lpu_w->value, p.lpu_b->value);
    auto y = map_to_tokens(tp, y_map);
    auto normed1 = layer_norm(tp, y, p.ln1_gamma->value, p.ln1_beta->value, 2);
    auto z = add(tp, lmhsa(tp, normed1, H, W, p.attn), y);
    auto normed2 = layer_norm(tp, z, p.ln2_gamma->value, p.ln2_beta->value, 2);
    auto ffn_out = irffn(tp, normed2, H, W, p.ffn);
    auto out = add(tp, ffn_out, z);
    if (trace) {
        trace->z = z;
        trace->irffn_out = ffn_out;
    }
    return out;
}

// Map-layout convenience entry: flatten, run the block, restore the map.
template <typename T>
TensorT<T> cmt_block_map(Tape<T>* tp, const TensorT<T>& x_map, const CmtBlockParams<T>& p) {
    require_shape<T>(x_map.shape.rank == 4, "cmt_block_map: input must be a map");
    const int H = x_map.shape[2], W = x_map.shape[3];
    auto out = cmt_block(tp, map_to_tokens(tp, x_map), H, W, p);
    return tokens_to_map(tp, out, H, W);
}

}  // namespace fme
