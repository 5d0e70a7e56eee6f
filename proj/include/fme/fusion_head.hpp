#pragma once

#include <string>

#include "fme/ops.hpp"
#include "fme/params.hpp"

// Pixel (spatial) attention over the fused feature map, then the
// classification head: a per-position sigmoid gate in (0,1) scales every
// channel, the gated map is average-pooled and classified.

namespace fme {

template <typename T>
struct PixelAttentionParams {
    int hidden = 0;                  // gate bottleneck width
    ParameterT<T>* wx = nullptr;     // (A, C, 1, 1), no bias
    ParameterT<T>* wsa = nullptr;    // (A, 1, 1, 1) over the spatial descriptor
    ParameterT<T>* b_sa = nullptr;   // (A)
    ParameterT<T>* f_w = nullptr;    // (1, A, 1, 1)
    ParameterT<T>* f_b = nullptr;    // (1)

    PixelAttentionParams() = default;
    PixelAttentionParams(ParamStoreT<T>& store, const std::string& prefix, int channels, Rng& rng) {
        hidden = std::max(8, channels / 8);
        wx = store.create(prefix + ".wx", Shape{hidden, channels, 1, 1}, Init::he_normal, rng, true);
        wsa = store.create(prefix + ".wsa", Shape{hidden, 1, 1, 1}, Init::he_normal, rng, true);
        b_sa = store.create(prefix + ".b_sa", Shape{hidden}, Init::zeros, rng);
        // small gate weights keep the sigmoid input moderate, so the gate
        // opens near 0.5 instead of saturating against unnormalized maps
        f_w = store.create(prefix + ".f.w", Shape{1, hidden, 1, 1}, Init::he_normal, rng, true, 0.1);
        f_b = store.create(prefix + ".f.b", Shape{1}, Init::zeros, rng);
    }
};

template <typename T>
struct PixelAttentionOut {
    TensorT<T> gated;  // w_pixel applied to the boosted map
    TensorT<T> gate;   // w_pixel, (N, 1, H, W), entries in (0, 1)
};

// gate = sigmoid(f(relu(Wx x + Wsa SA + b_sa)) + b_f), SA the channel-mean
// spatial descriptor; output = gate (x) broadcast over channels.
template <typename T>
PixelAttentionOut<T> pixel_attention(Tape<T>* tp, const TensorT<T>& boosted,
                                     const PixelAttentionParams<T>& p) {
    require_shape<T>(boosted.shape.rank == 4, "pixel_attention: input must be a map");
    require_shape<T>(boosted.shape[1] == p.wx->value.shape[1],
                     "pixel_attention: map channels " + std::to_string(boosted.shape[1]) +
                         " != gate input channels " + std::to_string(p.wx->value.shape[1]));
    auto descriptor = channel_mean(tp, boosted);
    auto from_map = conv2d(tp, boosted, p.wx->value, static_cast<const TensorT<T>*>(nullptr), 1, 0);
    auto from_sa = conv2d(tp, descriptor, p.wsa->value, &p.b_sa->value, 1, 0);
    auto hidden = relu(tp, add(tp, from_map, from_sa));
    auto gate = sigmoid(tp, conv2d(tp, hidden, p.f_w->value, &p.f_b->value, 1, 0));
    PixelAttentionOut<T> out;
    out.gated = mul_gate_channels(tp, boosted, gate);
    out.gate = gate;
    return out;
}

template <typename T>
struct ClassifyParams {
    ParameterT<T>* fc_w = nullptr;  // (classes, channels)
    ParameterT<T>* fc_b = nullptr;
    double dropout_rate = 0.3;

    ClassifyParams() = default;
    ClassifyParams(ParamStoreT<T>& store, const std::string& prefix, int channels, int classes,
                   double dropout, Rng& rng)
        : dropout_rate(dropout) {
        fc_w = store.create(prefix + ".fc.w", Shape{classes, channels}, Init::he_normal, rng, true);
        fc_b = store.create(prefix + ".fc.b", Shape{classes}, Init::zeros, rng);
    }
};

template <typename T>
struct ClassifyOut {
    TensorT<T> logits;       // (N, classes)
    TensorT<T> probs;        // softmax of logits, not recorded on the tape
    TensorT<T> penultimate;  // pooled vector before the final linear layer
};

template <typename T>
ClassifyOut<T> classify(Tape<T>* tp, const TensorT<T>& gated, const ClassifyParams<T>& p,
                        Mode mode, Rng& rng) {
    require_shape<T>(gated.shape.rank == 4, "classify: input must be a map");
    ClassifyOut<T> out;
    out.penultimate = global_avg_pool(tp, gated);
    auto dropped = dropout(tp, out.penultimate, p.dropout_rate, mode, rng);
    out.logits = linear(tp, dropped, p.fc_w->value, &p.fc_b->value);
    out.probs = softmax<T>(nullptr, out.logits, 1);
    return out;
}

}  // namespace fme
