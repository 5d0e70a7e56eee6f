#pragma once

#include <array>
#include <string>
#include <vector>

#include "fme/cmt.hpp"
#include "fme/fusion_head.hpp"

// The full two-stream feature extractor: stem CNN, four CMT stages with
// patch embedding and HS refinement, the residual CNN branch, channel
// fusion and the pixel-attention classification head.

namespace fme {

struct ModelConfig {
    int input_channels = 1;
    int input_size = 224;
    std::array<int, 4> stage_dims{64, 128, 256, 512};
    std::array<int, 4> stage_depths{2, 2, 2, 2};
    std::array<int, 4> stage_heads{1, 2, 4, 8};
    int irffn_ratio = 4;
    int kv_stride = 2;
    std::array<int, 4> residual_dims{64, 128, 192, 256};
    int num_classes = 4;
    double dropout = 0.3;
    bool attention_bias = true;
    // Bias-indexing granularity, reserved for a windowed attention variant.
    int window = 4;

    void validate() const {
        if (input_channels < 1) throw ConfigError("model: input_channels must be positive");
        if (input_size < 32 || input_size % 32 != 0)
            throw ConfigError("model: input_size " + std::to_string(input_size) +
                              " must be a positive multiple of 32");
        for (int i = 0; i < 4; ++i) {
            if (stage_dims[i] <= 0 || stage_depths[i] < 0 || stage_heads[i] <= 0 ||
                residual_dims[i] <= 0)
                throw ConfigError("model: stage extents must be positive");
            if (stage_dims[i] % stage_heads[i] != 0)
                throw ConfigError("model: stage_dims[" + std::to_string(i) + "]=" +
                                  std::to_string(stage_dims[i]) + " not divisible by heads " +
                                  std::to_string(stage_heads[i]));
        }
        if (irffn_ratio < 1 || kv_stride < 1) throw ConfigError("model: bad irffn_ratio/kv_stride");
        if (num_classes < 2) throw ConfigError("model: need at least two classes");
        if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must be in [0,1)");
    }

    // Grid side length of stage i's token grid (before its refinement).
    int stage_grid(int i) const { return input_size >> (i + 1); }
    // Map side length after stage i.
    int stage_out(int i) const { return input_size >> (i + 2); }
    int fused_channels() const { return stage_dims[3] + residual_dims[3]; }

    static ModelConfig paper_preset() { return ModelConfig{}; }

    static ModelConfig desk_preset() {
        ModelConfig c;
        c.input_size = 64;
        c.stage_dims = {16, 32, 64, 128};
        c.stage_depths = {1, 1, 1, 1};
        c.stage_heads = {1, 2, 4, 8};
        c.irffn_ratio = 2;
        c.residual_dims = {16, 32, 48, 64};
        return c;
    }
};

template <typename T>
struct ConvParams {
    ParameterT<T>* w = nullptr;
    ParameterT<T>* b = nullptr;
    int stride = 1;
    int pad = 0;
    int groups = 1;

    ConvParams() = default;
    ConvParams(ParamStoreT<T>& store, const std::string& prefix, int out_ch, int in_ch, int k,
               int stride_, int pad_, Rng& rng, int groups_ = 1, double init_scale = 1.0)
        : stride(stride_), pad(pad_), groups(groups_) {
        w = store.create(prefix + ".w", Shape{out_ch, in_ch / groups_, k, k}, Init::he_normal, rng,
                         true, init_scale);
        b = store.create(prefix + ".b", Shape{out_ch}, Init::zeros, rng);
    }

    TensorT<T> forward(Tape<T>* tp, const TensorT<T>& x) const {
        return conv2d(tp, x, w->value, &b->value, stride, pad, groups);
    }
};

template <typename T>
struct LayerNormParams {
    ParameterT<T>* gamma = nullptr;
    ParameterT<T>* beta = nullptr;

    LayerNormParams() = default;
    LayerNormParams(ParamStoreT<T>& store, const std::string& prefix, int dim, Rng& rng) {
        gamma = store.create(prefix + ".gamma", Shape{dim}, Init::ones, rng);
        beta = store.create(prefix + ".beta", Shape{dim}, Init::zeros, rng);
    }
};

// One HSCMT stage: patch embedding (3x3 conv + layer norm, stride 1),
// a stack of CMT blocks on the token grid, then HS refinement which owns
// the single /2 downsampling of the stage.
template <typename T>
struct HscmtStage {
    int grid = 0;  // token grid side length
    ConvParams<T> patch_conv;
    LayerNormParams<T> patch_ln;
    std::vector<CmtBlockParams<T>> blocks;
    ConvParams<T> refine_conv;

    HscmtStage() = default;
    HscmtStage(ParamStoreT<T>& store, const std::string& prefix, int in_dim, int dim, int depth,
               int heads, const ModelConfig& cfg, int grid_side, Rng& rng)
        : grid(grid_side),
          patch_conv(store, prefix + ".patch.conv", dim, in_dim, 3, 1, 1, rng),
          patch_ln(store, prefix + ".patch.ln", dim, rng),
          refine_conv(store, prefix + ".refine.conv", dim, dim, 3, 1, 1, rng) {
        CmtBlockConfig bc;
        bc.dim = dim;
        bc.heads = heads;
        bc.irffn_ratio = cfg.irffn_ratio;
        bc.kv_stride = cfg.kv_stride;
        bc.bias_enabled = cfg.attention_bias;
        blocks.reserve(static_cast<size_t>(depth));
        for (int j = 0; j < depth; ++j)
            blocks.emplace_back(store, prefix + ".block" + std::to_string(j), bc, grid_side,
                                grid_side, rng);
    }
};

// 3x3 conv + layer norm over channels, flattened to tokens; spatial extent
// unchanged (downsampling belongs to hs_refine).
template <typename T>
TensorT<T> patch_embed(Tape<T>* tp, const TensorT<T>& x, const ConvParams<T>& conv,
                       const LayerNormParams<T>& ln) {
    auto embedded = conv.forward(tp, x);
    auto tokens = map_to_tokens(tp, embedded);
    return layer_norm(tp, tokens, ln.gamma->value, ln.beta->value, 2);
}

// Conv + GELU, then the mean of max and average pooling; halves the extent.
template <typename T>
TensorT<T> hs_refine(Tape<T>* tp, const TensorT<T>& x, const ConvParams<T>& conv) {
    require_shape<T>(x.shape[2] % 2 == 0 && x.shape[3] % 2 == 0,
                     "hs_refine: spatial extent must be even, got " + x.shape.str());
    auto activated = gelu(tp, conv.forward(tp, x));
    auto pooled = add(tp, max_pool2d(tp, activated, 2, 2), avg_pool2d(tp, activated, 2, 2));
    return scale(tp, pooled, T(0.5));
}

// Projection-shortcut residual block (M): 1x1 PWC -> ReLU -> 3x3 stride s,
// shortcut 1x1 stride s, sum -> ReLU.
template <typename T>
struct ResidualBlockM {
    ConvParams<T> pw;
    ConvParams<T> conv;
    ConvParams<T> shortcut;

    ResidualBlockM() = default;
    ResidualBlockM(ParamStoreT<T>& store, const std::string& prefix, int in_ch, int out_ch,
                   int stride, Rng& rng)
        // main path starts small so the block opens as its projection shortcut
        : pw(store, prefix + ".pw", out_ch, in_ch, 1, 1, 0, rng),
          conv(store, prefix + ".conv", out_ch, out_ch, 3, stride, 1, rng, 1, 0.1),
          shortcut(store, prefix + ".short", out_ch, in_ch, 1, stride, 0, rng) {}

    TensorT<T> forward(Tape<T>* tp, const TensorT<T>& x) const {
        auto main = conv.forward(tp, relu(tp, pw.forward(tp, x)));
        return relu(tp, add(tp, main, shortcut.forward(tp, x)));
    }
};

// Identity-shortcut residual block (N): 3x3 -> ReLU -> 3x3, sum -> ReLU.
template <typename T>
struct ResidualBlockN {
    ConvParams<T> conv1;
    ConvParams<T> conv2;

    ResidualBlockN() = default;
    ResidualBlockN(ParamStoreT<T>& store, const std::string& prefix, int dim, Rng& rng)
        : conv1(store, prefix + ".conv1", dim, dim, 3, 1, 1, rng),
          conv2(store, prefix + ".conv2", dim, dim, 3, 1, 1, rng, 1, 0.1) {}

    TensorT<T> forward(Tape<T>* tp, const TensorT<T>& x) const {
        auto main = conv2.forward(tp, relu(tp, conv1.forward(tp, x)));
        return relu(tp, add(tp, main, x));
    }
};

// Channel concatenation of the two streams, HSCMT slice first.
template <typename T>
TensorT<T> fme_fuse(Tape<T>* tp, const TensorT<T>& hscmt_out, const TensorT<T>& residual_out) {
    return concat_channels(tp, hscmt_out, residual_out);
}

template <typename T>
struct ForwardTrace {
    std::array<TensorT<T>, 4> stage_maps;
    TensorT<T> residual_map;
    TensorT<T> fused;
    TensorT<T> gate;
};

template <typename T>
struct ForwardOut {
    TensorT<T> logits;
    TensorT<T> probs;
    TensorT<T> penultimate;
};

template <typename T>
class ModelT {
  public:
    ModelConfig cfg;

    ModelT(const ModelConfig& config, std::uint64_t seed) : cfg(config) {
        cfg.validate();
        Rng rng = Rng(seed).key(0x6d6f64656c);  // init stream
        const int s0 = cfg.stage_dims[0];
        stem_[0] = ConvParams<T>(store_, "stem.conv0", s0, cfg.input_channels, 3, 2, 1, rng);
        stem_[1] = ConvParams<T>(store_, "stem.conv1", s0, s0, 3, 1, 1, rng);
        stem_[2] = ConvParams<T>(store_, "stem.conv2", s0, s0, 3, 1, 1, rng);
        int prev = s0;
        for (int i = 0; i < 4; ++i) {
            stages_[i] = HscmtStage<T>(store_, "stage" + std::to_string(i), prev, cfg.stage_dims[i],
                                       cfg.stage_depths[i], cfg.stage_heads[i], cfg,
                                       cfg.stage_grid(i), rng);
            prev = cfg.stage_dims[i];
        }
        residual_entry_ =
            ConvParams<T>(store_, "residual.entry", cfg.residual_dims[0], cfg.input_channels, 3, 2,
                          1, rng);
        int rprev = cfg.residual_dims[0];
        for (int i = 0; i < 4; ++i) {
            const std::string prefix = "residual.pair" + std::to_string(i);
            res_m_[i] = ResidualBlockM<T>(store_, prefix + ".m", rprev, cfg.residual_dims[i], 2, rng);
            res_n_[i] = ResidualBlockN<T>(store_, prefix + ".n", cfg.residual_dims[i], rng);
            rprev = cfg.residual_dims[i];
        }
        pa_ = PixelAttentionParams<T>(store_, "head.pa", cfg.fused_channels(), rng);
        head_ = ClassifyParams<T>(store_, "head", cfg.fused_channels(), cfg.num_classes,
                                  cfg.dropout, rng);
    }

    ParamStoreT<T>& params() { return store_; }
    const ParamStoreT<T>& params() const { return store_; }

    TensorT<T> stem(Tape<T>* tp, const TensorT<T>& x) const {
        require_shape<T>(x.shape.rank == 4 && x.shape[1] == cfg.input_channels &&
                             x.shape[2] == cfg.input_size && x.shape[3] == cfg.input_size,
                         "stem: expected (N," + std::to_string(cfg.input_channels) + "," +
                             std::to_string(cfg.input_size) + "," + std::to_string(cfg.input_size) +
                             "), got " + x.shape.str());
        auto y = gelu(tp, stem_[0].forward(tp, x));
        y = gelu(tp, stem_[1].forward(tp, y));
        return gelu(tp, stem_[2].forward(tp, y));
    }

    // patch embed -> CMT blocks -> back to map -> HS refine; /2 per stage.
    TensorT<T> hscmt_stage(Tape<T>* tp, const TensorT<T>& x, int i) const {
        if (i < 0 || i > 3) throw ConfigError("hscmt_stage: index out of range");
        const HscmtStage<T>& st = stages_[static_cast<size_t>(i)];
        auto tokens = patch_embed(tp, x, st.patch_conv, st.patch_ln);
        for (const auto& block : st.blocks) tokens = cmt_block(tp, tokens, st.grid, st.grid, block);
        auto map = tokens_to_map(tp, tokens, st.grid, st.grid);
        return hs_refine(tp, map, st.refine_conv);
    }

    TensorT<T> residual_branch(Tape<T>* tp, const TensorT<T>& image) const {
        auto y = residual_entry_.forward(tp, image);
        for (int i = 0; i < 4; ++i) {
            y = res_m_[static_cast<size_t>(i)].forward(tp, y);
            y = res_n_[static_cast<size_t>(i)].forward(tp, y);
        }
        return y;
    }

    ForwardOut<T> forward(Tape<T>* tp, const TensorT<T>& image, Mode mode, Rng& rng,
                          ForwardTrace<T>* trace = nullptr) const {
        check_finite(image.data, "model input");
        auto y = stem(tp, image);
        for (int i = 0; i < 4; ++i) {
            y = hscmt_stage(tp, y, i);
            if (trace) trace->stage_maps[static_cast<size_t>(i)] = y;
        }
        auto r = residual_branch(tp, image);
        if (trace) trace->residual_map = r;
        auto fused = fme_fuse(tp, y, r);
        if (trace) trace->fused = fused;
        auto attended = pixel_attention(tp, fused, pa_);
        if (trace) trace->gate = attended.gate;
        auto out = classify(tp, attended.gated, head_, mode, rng);
        ForwardOut<T> result;
        result.logits = out.logits;
        result.probs = out.probs;
        result.penultimate = out.penultimate;
        return result;
    }

    const PixelAttentionParams<T>& pixel_attention_params() const { return pa_; }
    const ClassifyParams<T>& classify_params() const { return head_; }
    const HscmtStage<T>& stage(int i) const { return stages_[static_cast<size_t>(i)]; }
    const ResidualBlockM<T>& residual_m(int i) const { return res_m_[static_cast<size_t>(i)]; }
    const ResidualBlockN<T>& residual_n(int i) const { return res_n_[static_cast<size_t>(i)]; }

  private:
    ParamStoreT<T> store_;
    std::array<ConvParams<T>, 3> stem_;
    std::array<HscmtStage<T>, 4> stages_;
    ConvParams<T> residual_entry_;
    std::array<ResidualBlockM<T>, 4> res_m_;
    std::array<ResidualBlockN<T>, 4> res_n_;
    PixelAttentionParams<T> pa_;
    ClassifyParams<T> head_;
};

using Model = ModelT<float>;
using ModelD = ModelT<double>;

}  // namespace fme
