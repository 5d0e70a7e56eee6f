#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "fme/rng.hpp"
#include "fme/tape.hpp"
#include "fme/tensor.hpp"

// Differentiable primitives. Every op computes its forward value, rejects
// non-finite output, and (when a tape is supplied and any input is tracked)
// records a pull closure that routes gradients back to its inputs.
// Composite layers in attention.hpp / cmt.hpp / backbone.hpp are built
// purely from these, so one backward engine serves the whole model.

namespace fme {

namespace detail {

inline int div_floor(int a, int b) { return (a >= 0) ? a / b : -((-a + b - 1) / b); }
inline int div_ceil(int a, int b) { return (a >= 0) ? (a + b - 1) / b : -((-a) / b); }

template <typename T>
void transpose_into(const T* src, int rows, int cols, std::vector<T>& dst) {
    dst.resize(static_cast<size_t>(rows) * cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            dst[static_cast<size_t>(c) * rows + r] = src[static_cast<size_t>(r) * cols + c];
}

// Multi-lane dot product. The independent lane accumulators break the
// serial reduction chain so the loop vectorizes without relaxed FP flags;
// the summation order is fixed, keeping results deterministic per build.
template <typename T>
inline T dot_lanes(const T* a, const T* b, int k) {
    constexpr int L = 8;
    T lanes[L] = {};
    int i = 0;
    for (; i + L <= k; i += L)
        for (int l = 0; l < L; ++l) lanes[l] += a[i + l] * b[i + l];
    T acc = 0;
    for (; i < k; ++i) acc += a[i] * b[i];
    for (int l = 0; l < L; ++l) acc += lanes[l];
    return acc;
}

// C(M,N) += A(M,K) . B(K,N). Long-N uses row axpys; short-N transposes B
// once so the dot runs over contiguous K.
template <typename T>
void gemm_nn_acc(int M, int N, int K, const T* a, const T* b, T* c) {
    if (N >= 32) {
        for (int i = 0; i < M; ++i) {
            const T* ar = a + static_cast<size_t>(i) * K;
            T* cr = c + static_cast<size_t>(i) * N;
            for (int k = 0; k < K; ++k) {
                const T av = ar[k];
                const T* br = b + static_cast<size_t>(k) * N;
                for (int j = 0; j < N; ++j) cr[j] += av * br[j];
            }
        }
    } else {
        std::vector<T> bt;
        transpose_into(b, K, N, bt);
        for (int i = 0; i < M; ++i) {
            const T* ar = a + static_cast<size_t>(i) * K;
            T* cr = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j)
                cr[j] += dot_lanes(ar, bt.data() + static_cast<size_t>(j) * K, K);
        }
    }
}

// C(M,N) += A(M,K) . B(N,K)^T. Long-K dots directly; short-K transposes B
// and falls back to row axpys.
template <typename T>
void gemm_nt_acc(int M, int N, int K, const T* a, const T* b, T* c) {
    if (K >= 32 || N < 16) {
        for (int i = 0; i < M; ++i) {
            const T* ar = a + static_cast<size_t>(i) * K;
            T* cr = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j)
                cr[j] += dot_lanes(ar, b + static_cast<size_t>(j) * K, K);
        }
    } else {
        std::vector<T> bt;
        transpose_into(b, N, K, bt);  // (K, N)
        for (int i = 0; i < M; ++i) {
            const T* ar = a + static_cast<size_t>(i) * K;
            T* cr = c + static_cast<size_t>(i) * N;
            for (int k = 0; k < K; ++k) {
                const T av = ar[k];
                const T* br = bt.data() + static_cast<size_t>(k) * N;
                for (int j = 0; j < N; ++j) cr[j] += av * br[j];
            }
        }
    }
}

// Valid output range [lo, hi] such that 0 <= o*stride - pad + k <= limit-1.
inline void conv_bounds(int k, int stride, int pad, int limit, int out_limit, int& lo, int& hi) {
    lo = std::max(0, div_ceil(pad - k, stride));
    hi = std::min(out_limit - 1, div_floor(limit - 1 + pad - k, stride));
}

// Pointwise (1x1, pad 0) convolutions are channel mixes: one GEMM per
// (sample, group), with a strided pixel gather when stride > 1.
template <typename T>
void conv1x1_gather(const T* x, int W, int HWo, int Wo, int stride, int Cg, std::int64_t ch_stride,
                    std::vector<T>& xs) {
    xs.resize(static_cast<size_t>(Cg) * HWo);
    for (int cg = 0; cg < Cg; ++cg) {
        const T* xc = x + static_cast<std::int64_t>(cg) * ch_stride;
        T* row = xs.data() + static_cast<size_t>(cg) * HWo;
        for (int o = 0; o < HWo; ++o)
            row[o] = xc[static_cast<size_t>(o / Wo) * stride * W + (o % Wo) * stride];
    }
}

// Small output maps run with the output-channel loop innermost over a
// transposed weight copy, so the vector width comes from Cout, not the
// (tiny) spatial extent.
template <typename T>
void conv_transpose_weights(const T* w, int Cout, int Cg, int kh, int kw, int groups,
                            std::vector<T>& wt) {
    const int Og = Cout / groups;
    wt.resize(static_cast<size_t>(Cout) * Cg * kh * kw);
    for (int co = 0; co < Cout; ++co) {
        const int g = co / Og, og = co % Og;
        for (int cg = 0; cg < Cg; ++cg)
            for (int i = 0; i < kh; ++i)
                for (int j = 0; j < kw; ++j)
                    wt[((((static_cast<size_t>(g) * Cg + cg) * kh + i) * kw + j)) * Og + og] =
                        w[(static_cast<size_t>(co) * Cg + cg) * kh * kw + i * kw + j];
    }
}

inline bool conv_use_small_map(int Ho, int Wo, int Cout, int groups) {
    return Ho * Wo <= 64 && Cout / groups >= 8;
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int N, int Cin, int H, int W,
                    int Cout, int kh, int kw, int stride, int pad, int groups, int Ho, int Wo) {
    const int Cg = Cin / groups;
    const int Og = Cout / groups;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t hwo = static_cast<std::int64_t>(Ho) * Wo;

    if (kh == 1 && kw == 1 && pad == 0) {
        std::vector<T> xs;
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                T* yg = y + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                for (int og = 0; og < Og; ++og)
                    std::fill(yg + og * hwo, yg + (og + 1) * hwo, b ? b[g * Og + og] : T(0));
                const T* wg = w + static_cast<size_t>(g) * Og * Cg;
                const T* xg = x + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                if (stride == 1) {
                    gemm_nn_acc(Og, static_cast<int>(hwo), Cg, wg, xg, yg);
                } else {
                    conv1x1_gather(xg, W, static_cast<int>(hwo), Wo, stride, Cg, hw, xs);
                    gemm_nn_acc(Og, static_cast<int>(hwo), Cg, wg, xs.data(), yg);
                }
            }
        return;
    }

    if (conv_use_small_map(Ho, Wo, Cout, groups)) {
        std::vector<T> wt;
        conv_transpose_weights(w, Cout, Cg, kh, kw, groups, wt);
        std::vector<T> acc(static_cast<size_t>(Og));
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const T* xg = x + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                T* yg = y + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        std::fill(acc.begin(), acc.end(), T(0));
                        for (int cg = 0; cg < Cg; ++cg) {
                            const T* xc = xg + static_cast<std::int64_t>(cg) * hw;
                            for (int i = 0; i < kh; ++i) {
                                const int ih = oh * stride - pad + i;
                                if (ih < 0 || ih >= H) continue;
                                for (int j = 0; j < kw; ++j) {
                                    const int iw = ow * stride - pad + j;
                                    if (iw < 0 || iw >= W) continue;
                                    const T xv = xc[static_cast<size_t>(ih) * W + iw];
                                    const T* wrow =
                                        wt.data() +
                                        (((static_cast<size_t>(g) * Cg + cg) * kh + i) * kw + j) * Og;
                                    for (int og = 0; og < Og; ++og) acc[static_cast<size_t>(og)] += xv * wrow[og];
                                }
                            }
                        }
                        for (int og = 0; og < Og; ++og)
                            yg[static_cast<std::int64_t>(og) * hwo + oh * Wo + ow] =
                                acc[static_cast<size_t>(og)] + (b ? b[g * Og + og] : T(0));
                    }
            }
        return;
    }

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            const int g = co / Og;
            T* yc = y + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
            const T bias = b ? b[co] : T(0);
            std::fill(yc, yc + static_cast<size_t>(Ho) * Wo, bias);
            for (int cg = 0; cg < Cg; ++cg) {
                const int ci = g * Cg + cg;
                const T* xc = x + (static_cast<size_t>(n) * Cin + ci) * H * W;
                const T* wk = w + (static_cast<size_t>(co) * Cg + cg) * kh * kw;
                for (int i = 0; i < kh; ++i) {
                    int oh_lo, oh_hi;
                    conv_bounds(i, stride, pad, H, Ho, oh_lo, oh_hi);
                    for (int j = 0; j < kw; ++j) {
                        const T wv = wk[i * kw + j];
                        int ow_lo, ow_hi;
                        conv_bounds(j, stride, pad, W, Wo, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* xr = xc + static_cast<size_t>(oh * stride - pad + i) * W;
                            T* yr = yc + static_cast<size_t>(oh) * Wo;
                            if (stride == 1) {
                                const T* xs = xr - pad + j + ow_lo;
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    yr[ow] += wv * xs[ow - ow_lo];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    yr[ow] += wv * xr[ow * stride - pad + j];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_input(const T* w, const T* gy, T* gx, int N, int Cin, int H, int W, int Cout,
                           int kh, int kw, int stride, int pad, int groups, int Ho, int Wo) {
    const int Cg = Cin / groups;
    const int Og = Cout / groups;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t hwo = static_cast<std::int64_t>(Ho) * Wo;

    if (kh == 1 && kw == 1 && pad == 0) {
        std::vector<T> wt, buf;
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const T* gg = gy + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                T* xg = gx + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                transpose_into(w + static_cast<size_t>(g) * Og * Cg, Og, Cg, wt);  // (Cg, Og)
                if (stride == 1) {
                    gemm_nn_acc(Cg, static_cast<int>(hwo), Og, wt.data(), gg, xg);
                } else {
                    buf.assign(static_cast<size_t>(Cg) * hwo, T(0));
                    gemm_nn_acc(Cg, static_cast<int>(hwo), Og, wt.data(), gg, buf.data());
                    for (int cg = 0; cg < Cg; ++cg)
                        for (int o = 0; o < hwo; ++o)
                            xg[static_cast<std::int64_t>(cg) * hw +
                               static_cast<size_t>(o / Wo) * stride * W + (o % Wo) * stride] +=
                                buf[static_cast<size_t>(cg) * hwo + o];
                }
            }
        return;
    }

    if (conv_use_small_map(Ho, Wo, Cout, groups)) {
        std::vector<T> wt;
        conv_transpose_weights(w, Cout, Cg, kh, kw, groups, wt);
        std::vector<T> gsite(static_cast<size_t>(Og));
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const T* gg = gy + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                T* xg = gx + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        for (int og = 0; og < Og; ++og)
                            gsite[static_cast<size_t>(og)] =
                                gg[static_cast<std::int64_t>(og) * hwo + oh * Wo + ow];
                        for (int cg = 0; cg < Cg; ++cg) {
                            T* xc = xg + static_cast<std::int64_t>(cg) * hw;
                            for (int i = 0; i < kh; ++i) {
                                const int ih = oh * stride - pad + i;
                                if (ih < 0 || ih >= H) continue;
                                for (int j = 0; j < kw; ++j) {
                                    const int iw = ow * stride - pad + j;
                                    if (iw < 0 || iw >= W) continue;
                                    const T* wrow =
                                        wt.data() +
                                        (((static_cast<size_t>(g) * Cg + cg) * kh + i) * kw + j) * Og;
                                    T acc = 0;
                                    for (int og = 0; og < Og; ++og)
                                        acc += gsite[static_cast<size_t>(og)] * wrow[og];
                                    xc[static_cast<size_t>(ih) * W + iw] += acc;
                                }
                            }
                        }
                    }
            }
        return;
    }

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Cout; ++co) {
            const int g = co / Og;
            const T* gc = gy + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
            for (int cg = 0; cg < Cg; ++cg) {
                const int ci = g * Cg + cg;
                T* xc = gx + (static_cast<size_t>(n) * Cin + ci) * H * W;
                const T* wk = w + (static_cast<size_t>(co) * Cg + cg) * kh * kw;
                for (int i = 0; i < kh; ++i) {
                    int oh_lo, oh_hi;
                    conv_bounds(i, stride, pad, H, Ho, oh_lo, oh_hi);
                    for (int j = 0; j < kw; ++j) {
                        const T wv = wk[i * kw + j];
                        int ow_lo, ow_hi;
                        conv_bounds(j, stride, pad, W, Wo, ow_lo, ow_hi);
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            T* xr = xc + static_cast<size_t>(oh * stride - pad + i) * W;
                            const T* gr = gc + static_cast<size_t>(oh) * Wo;
                            if (stride == 1) {
                                T* xs = xr - pad + j + ow_lo;
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    xs[ow - ow_lo] += wv * gr[ow];
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    xr[ow * stride - pad + j] += wv * gr[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

template <typename T>
void conv2d_backward_weight(const T* x, const T* gy, T* gw, int N, int Cin, int H, int W, int Cout,
                            int kh, int kw, int stride, int pad, int groups, int Ho, int Wo) {
    const int Cg = Cin / groups;
    const int Og = Cout / groups;
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    const std::int64_t hwo = static_cast<std::int64_t>(Ho) * Wo;

    if (kh == 1 && kw == 1 && pad == 0) {
        std::vector<T> xs;
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const T* gg = gy + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                const T* xg = x + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                T* wg = gw + static_cast<size_t>(g) * Og * Cg;
                if (stride == 1) {
                    gemm_nt_acc(Og, Cg, static_cast<int>(hwo), gg, xg, wg);
                } else {
                    conv1x1_gather(xg, W, static_cast<int>(hwo), Wo, stride, Cg, hw, xs);
                    gemm_nt_acc(Og, Cg, static_cast<int>(hwo), gg, xs.data(), wg);
                }
            }
        return;
    }

    if (conv_use_small_map(Ho, Wo, Cout, groups)) {
        std::vector<T> gwt(static_cast<size_t>(Cout) * Cg * kh * kw, T(0));
        std::vector<T> gsite(static_cast<size_t>(Og));
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const T* gg = gy + (static_cast<std::int64_t>(n) * Cout + g * Og) * hwo;
                const T* xg = x + (static_cast<std::int64_t>(n) * Cin + g * Cg) * hw;
                for (int oh = 0; oh < Ho; ++oh)
                    for (int ow = 0; ow < Wo; ++ow) {
                        for (int og = 0; og < Og; ++og)
                            gsite[static_cast<size_t>(og)] =
                                gg[static_cast<std::int64_t>(og) * hwo + oh * Wo + ow];
                        for (int cg = 0; cg < Cg; ++cg) {
                            const T* xc = xg + static_cast<std::int64_t>(cg) * hw;
                            for (int i = 0; i < kh; ++i) {
                                const int ih = oh * stride - pad + i;
                                if (ih < 0 || ih >= H) continue;
                                for (int j = 0; j < kw; ++j) {
                                    const int iw = ow * stride - pad + j;
                                    if (iw < 0 || iw >= W) continue;
                                    const T xv = xc[static_cast<size_t>(ih) * W + iw];
                                    T* wrow =
                                        gwt.data() +
                                        (((static_cast<size_t>(g) * Cg + cg) * kh + i) * kw + j) * Og;
                                    for (int og = 0; og < Og; ++og)
                                        wrow[og] += xv * gsite[static_cast<size_t>(og)];
                                }
                            }
                        }
                    }
            }
        // fold the transposed scratch back into the (Cout, Cg, kh, kw) layout
        for (int co = 0; co < Cout; ++co) {
            const int g = co / Og, og = co % Og;
            for (int cg = 0; cg < Cg; ++cg)
                for (int i = 0; i < kh; ++i)
                    for (int j = 0; j < kw; ++j)
                        gw[(static_cast<size_t>(co) * Cg + cg) * kh * kw + i * kw + j] +=
                            gwt[(((static_cast<size_t>(g) * Cg + cg) * kh + i) * kw + j) * Og + og];
        }
        return;
    }

    for (int co = 0; co < Cout; ++co) {
        const int g = co / Og;
        for (int cg = 0; cg < Cg; ++cg) {
            const int ci = g * Cg + cg;
            T* wk = gw + (static_cast<size_t>(co) * Cg + cg) * kh * kw;
            for (int i = 0; i < kh; ++i) {
                int oh_lo, oh_hi;
                conv_bounds(i, stride, pad, H, Ho, oh_lo, oh_hi);
                for (int j = 0; j < kw; ++j) {
                    int ow_lo, ow_hi;
                    conv_bounds(j, stride, pad, W, Wo, ow_lo, ow_hi);
                    T acc = 0;
                    for (int n = 0; n < N; ++n) {
                        const T* xc = x + (static_cast<size_t>(n) * Cin + ci) * H * W;
                        const T* gc = gy + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                        for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                            const T* xr = xc + static_cast<size_t>(oh * stride - pad + i) * W;
                            const T* gr = gc + static_cast<size_t>(oh) * Wo;
                            if (stride == 1) {
                                acc += dot_lanes(xr - pad + j + ow_lo, gr + ow_lo,
                                                 ow_hi - ow_lo + 1);
                            } else {
                                for (int ow = ow_lo; ow <= ow_hi; ++ow)
                                    acc += xr[ow * stride - pad + j] * gr[ow];
                            }
                        }
                    }
                    wk[i * kw + j] += acc;
                }
            }
        }
    }
}

// Iterates slices along `axis`: calls fn(base, stride, extent) for every
// position holding the other axes fixed.
template <typename F>
void for_each_slice(const Shape& s, int axis, F&& fn) {
    std::int64_t inner = 1;
    for (int i = axis + 1; i < s.rank; ++i) inner *= s.d[i];
    std::int64_t outer = 1;
    for (int i = 0; i < axis; ++i) outer *= s.d[i];
    const int extent = s.d[axis];
    for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in = 0; in < inner; ++in) fn(o * extent * inner + in, inner, extent);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution and pooling

template <typename T>
TensorT<T> conv2d(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* bias,
                  int stride, int pad, int groups = 1) {
    require_shape<T>(x.shape.rank == 4, "conv2d: input must be rank-4, got " + x.shape.str());
    require_shape<T>(w.shape.rank == 4, "conv2d: kernel must be rank-4, got " + w.shape.str());
    if (stride < 1 || pad < 0 || groups < 1) throw ConfigError("conv2d: bad stride/pad/groups");
    const int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    if (Cin % groups != 0 || Cout % groups != 0)
        throw ConfigError("conv2d: channels not divisible by groups=" + std::to_string(groups));
    require_shape<T>(w.shape[1] == Cin / groups, "conv2d: kernel expects " +
                         std::to_string(w.shape[1] * groups) + " input channels, input has " +
                         std::to_string(Cin));
    require_shape<T>(H + 2 * pad >= kh && W + 2 * pad >= kw,
                     "conv2d: kernel " + w.shape.str() + " larger than padded input " + x.shape.str());
    if (bias)
        require_shape<T>(bias->shape.numel() == Cout, "conv2d: bias length " +
                             std::to_string(bias->shape.numel()) + " != out channels " +
                             std::to_string(Cout));
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;

    TensorT<T> y(Shape{N, Cout, Ho, Wo});
    detail::conv2d_forward(x.data.data(), w.data.data(), bias ? bias->data.data() : nullptr,
                           y.data.data(), N, Cin, H, W, Cout, kh, kw, stride, pad, groups, Ho, Wo);
    check_finite(y.data, "conv2d");

    const int xn = x.node, wn = w.node, bn = bias ? bias->node : -1;
    if (tp && (xn >= 0 || wn >= 0 || bn >= 0)) {
        std::vector<T> xcap = (wn >= 0) ? x.data : std::vector<T>{};
        std::vector<T> wcap = (xn >= 0) ? w.data : std::vector<T>{};
        y.node = tp->record(
            "conv2d", y.shape, {xn, wn, bn},
            [=, xcap = std::move(xcap), wcap = std::move(wcap)](Tape<T>& t, const std::vector<T>& g) {
                if (xn >= 0)
                    detail::conv2d_backward_input(wcap.data(), g.data(), t.grad_buffer(xn).data(), N,
                                                  Cin, H, W, Cout, kh, kw, stride, pad, groups, Ho, Wo);
                if (wn >= 0)
                    detail::conv2d_backward_weight(xcap.data(), g.data(), t.grad_buffer(wn).data(), N,
                                                   Cin, H, W, Cout, kh, kw, stride, pad, groups, Ho, Wo);
                if (bn >= 0) {
                    auto& gb = t.grad_buffer(bn);
                    for (int n = 0; n < N; ++n)
                        for (int co = 0; co < Cout; ++co) {
                            const T* gr = g.data() + (static_cast<size_t>(n) * Cout + co) * Ho * Wo;
                            T acc = 0;
                            for (std::int64_t i = 0; i < static_cast<std::int64_t>(Ho) * Wo; ++i)
                                acc += gr[i];
                            gb[co] += acc;
                        }
                }
            });
    }
    return y;
}

template <typename T>
TensorT<T> max_pool2d(Tape<T>* tp, const TensorT<T>& x, int window, int stride) {
    require_shape<T>(x.shape.rank == 4, "max_pool2d: input must be rank-4, got " + x.shape.str());
    if (window < 1 || stride < 1) throw ConfigError("max_pool2d: bad window/stride");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    require_shape<T>(window <= H && window <= W,
                     "max_pool2d: window " + std::to_string(window) + " exceeds input " + x.shape.str());
    const int Ho = (H - window) / stride + 1;
    const int Wo = (W - window) / stride + 1;

    TensorT<T> y(Shape{N, C, Ho, Wo});
    // argmax per output site (first maximum in scan order, for determinism)
    auto arg = std::make_shared<std::vector<std::int64_t>>(y.data.size());
    std::int64_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xc = x.data.data() + (static_cast<size_t>(n) * C + c) * H * W;
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow, ++o) {
                    T best = xc[static_cast<size_t>(oh * stride) * W + ow * stride];
                    std::int64_t besti = base + static_cast<std::int64_t>(oh * stride) * W + ow * stride;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j) {
                            const std::int64_t ix = static_cast<std::int64_t>(oh * stride + i) * W +
                                                    ow * stride + j;
                            if (xc[ix] > best) {
                                best = xc[ix];
                                besti = base + ix;
                            }
                        }
                    y.data[static_cast<size_t>(o)] = best;
                    (*arg)[static_cast<size_t>(o)] = besti;
                }
        }
    check_finite(y.data, "max_pool2d");

    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("max_pool2d", y.shape, {xn},
                            [xn, arg](Tape<T>& t, const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (size_t i = 0; i < g.size(); ++i)
                                    gx[static_cast<size_t>((*arg)[i])] += g[i];
                            });
    }
    return y;
}

template <typename T>
TensorT<T> avg_pool2d(Tape<T>* tp, const TensorT<T>& x, int window, int stride) {
    require_shape<T>(x.shape.rank == 4, "avg_pool2d: input must be rank-4, got " + x.shape.str());
    if (window < 1 || stride < 1) throw ConfigError("avg_pool2d: bad window/stride");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    require_shape<T>(window <= H && window <= W,
                     "avg_pool2d: window " + std::to_string(window) + " exceeds input " + x.shape.str());
    const int Ho = (H - window) / stride + 1;
    const int Wo = (W - window) / stride + 1;
    const T inv = T(1) / static_cast<T>(window * window);

    TensorT<T> y(Shape{N, C, Ho, Wo});
    std::int64_t o = 0;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xc = x.data.data() + (static_cast<size_t>(n) * C + c) * H * W;
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow, ++o) {
                    T acc = 0;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j)
                            acc += xc[static_cast<size_t>(oh * stride + i) * W + ow * stride + j];
                    y.data[static_cast<size_t>(o)] = acc * inv;
                }
        }
    check_finite(y.data, "avg_pool2d");

    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record(
            "avg_pool2d", y.shape, {xn}, [=](Tape<T>& t, const std::vector<T>& g) {
                auto& gx = t.grad_buffer(xn);
                std::int64_t oo = 0;
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        T* gc = gx.data() + (static_cast<size_t>(n) * C + c) * H * W;
                        for (int oh = 0; oh < Ho; ++oh)
                            for (int ow = 0; ow < Wo; ++ow, ++oo) {
                                const T gv = g[static_cast<size_t>(oo)] * inv;
                                for (int i = 0; i < window; ++i)
                                    for (int j = 0; j < window; ++j)
                                        gc[static_cast<size_t>(oh * stride + i) * W + ow * stride + j] += gv;
                            }
                    }
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise activations

namespace detail {

template <typename T, typename F, typename DF>
TensorT<T> unary_op(Tape<T>* tp, const TensorT<T>& x, const char* name, F f, DF df) {
    TensorT<T> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) y.data[i] = f(x.data[i]);
    check_finite(y.data, name);
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record(name, y.shape, {xn},
                            [xn, df, xd = x.data](Tape<T>& t, const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xd[i]);
                            });
    }
    return y;
}

}  // namespace detail

// Exact-erf GELU: 0.5 x (1 + erf(x / sqrt(2))). The gaussian CDF from the
// forward pass is cached for backward.
template <typename T>
TensorT<T> gelu(Tape<T>* tp, const TensorT<T>& x) {
    const T inv_sqrt2 = static_cast<T>(0.7071067811865476);
    const T inv_sqrt2pi = static_cast<T>(0.3989422804014327);
    TensorT<T> y(x.shape);
    const bool recording = tp && x.node >= 0;
    auto cdf = recording ? std::make_shared<std::vector<T>>(x.data.size()) : nullptr;
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T v = x.data[i];
        const T c = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        y.data[i] = v * c;
        if (recording) (*cdf)[i] = c;
    }
    check_finite(y.data, "gelu");
    if (recording) {
        const int xn = x.node;
        y.node = tp->record("gelu", y.shape, {xn},
                            [xn, cdf, xd = x.data, inv_sqrt2pi](Tape<T>& t,
                                                                const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (size_t i = 0; i < g.size(); ++i) {
                                    const T v = xd[i];
                                    const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
                                    gx[i] += g[i] * ((*cdf)[i] + v * pdf);
                                }
                            });
    }
    return y;
}

template <typename T>
TensorT<T> relu(Tape<T>* tp, const TensorT<T>& x) {
    return detail::unary_op(
        tp, x, "relu", [](T v) { return v > T(0) ? v : T(0); },
        [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
TensorT<T> sigmoid(Tape<T>* tp, const TensorT<T>& x) {
    auto sg = [](T v) {
        if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
    };
    return detail::unary_op(tp, x, "sigmoid", sg, [sg](T v) {
        const T s = sg(v);
        return s * (T(1) - s);
    });
}

// ---------------------------------------------------------------------------
// Normalization and softmax

template <typename T>
TensorT<T> softmax(Tape<T>* tp, const TensorT<T>& x, int axis) {
    if (axis < 0) axis += x.shape.rank;
    if (axis < 0 || axis >= x.shape.rank) throw ConfigError("softmax: axis out of range");
    TensorT<T> y(x.shape);
    detail::for_each_slice(x.shape, axis, [&](std::int64_t base, std::int64_t step, int extent) {
        T m = x.data[static_cast<size_t>(base)];
        for (int k = 1; k < extent; ++k) m = std::max(m, x.data[static_cast<size_t>(base + k * step)]);
        T sum = 0;
        for (int k = 0; k < extent; ++k) {
            const T e = std::exp(x.data[static_cast<size_t>(base + k * step)] - m);
            y.data[static_cast<size_t>(base + k * step)] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (int k = 0; k < extent; ++k) y.data[static_cast<size_t>(base + k * step)] *= inv;
    });
    check_finite(y.data, "softmax");

    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("softmax", y.shape, {xn},
                            [xn, axis, yd = y.data, shape = y.shape](Tape<T>& t,
                                                                     const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                detail::for_each_slice(
                                    shape, axis, [&](std::int64_t base, std::int64_t step, int extent) {
                                        T dot = 0;
                                        for (int k = 0; k < extent; ++k) {
                                            const auto ix = static_cast<size_t>(base + k * step);
                                            dot += g[ix] * yd[ix];
                                        }
                                        for (int k = 0; k < extent; ++k) {
                                            const auto ix = static_cast<size_t>(base + k * step);
                                            gx[ix] += yd[ix] * (g[ix] - dot);
                                        }
                                    });
                            });
    }
    return y;
}

// Per-position normalization over `axis` (channel axis for maps, feature
// axis for token sequences), epsilon 1e-5, affine gamma/beta.
template <typename T>
TensorT<T> layer_norm(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& gamma,
                      const TensorT<T>& beta, int axis) {
    if (axis < 0) axis += x.shape.rank;
    if (axis < 0 || axis >= x.shape.rank) throw ConfigError("layer_norm: axis out of range");
    const int C = x.shape[axis];
    require_shape<T>(gamma.shape.numel() == C && beta.shape.numel() == C,
                     "layer_norm: affine length != channel extent " + std::to_string(C));
    constexpr double eps = 1e-5;

    TensorT<T> y(x.shape);
    detail::for_each_slice(x.shape, axis, [&](std::int64_t base, std::int64_t step, int extent) {
        double mean = 0;
        for (int k = 0; k < extent; ++k) mean += x.data[static_cast<size_t>(base + k * step)];
        mean /= extent;
        double var = 0;
        for (int k = 0; k < extent; ++k) {
            const double d = x.data[static_cast<size_t>(base + k * step)] - mean;
            var += d * d;
        }
        var /= extent;
        const double inv = 1.0 / std::sqrt(var + eps);
        for (int k = 0; k < extent; ++k) {
            const auto ix = static_cast<size_t>(base + k * step);
            const double xhat = (x.data[ix] - mean) * inv;
            y.data[ix] = static_cast<T>(gamma.data[static_cast<size_t>(k)] * xhat +
                                        beta.data[static_cast<size_t>(k)]);
        }
    });
    check_finite(y.data, "layer_norm");

    const int xn = x.node, gn = gamma.node, bn = beta.node;
    if (tp && (xn >= 0 || gn >= 0 || bn >= 0)) {
        y.node = tp->record(
            "layer_norm", y.shape, {xn, gn, bn},
            [xn, gn, bn, axis, xd = x.data, gd = gamma.data, shape = x.shape](
                Tape<T>& t, const std::vector<T>& g) {
                std::vector<T>* gx = xn >= 0 ? &t.grad_buffer(xn) : nullptr;
                std::vector<T>* gg = gn >= 0 ? &t.grad_buffer(gn) : nullptr;
                std::vector<T>* gb = bn >= 0 ? &t.grad_buffer(bn) : nullptr;
                detail::for_each_slice(shape, axis, [&](std::int64_t base, std::int64_t step,
                                                        int extent) {
                    double mean = 0;
                    for (int k = 0; k < extent; ++k) mean += xd[static_cast<size_t>(base + k * step)];
                    mean /= extent;
                    double var = 0;
                    for (int k = 0; k < extent; ++k) {
                        const double d = xd[static_cast<size_t>(base + k * step)] - mean;
                        var += d * d;
                    }
                    var /= extent;
                    const double inv = 1.0 / std::sqrt(var + eps);
                    double m1 = 0, m2 = 0;
                    for (int k = 0; k < extent; ++k) {
                        const auto ix = static_cast<size_t>(base + k * step);
                        const double xhat = (xd[ix] - mean) * inv;
                        const double gh = g[ix] * gd[static_cast<size_t>(k)];
                        m1 += gh;
                        m2 += gh * xhat;
                        if (gg) (*gg)[static_cast<size_t>(k)] += static_cast<T>(g[ix] * xhat);
                        if (gb) (*gb)[static_cast<size_t>(k)] += g[ix];
                    }
                    m1 /= extent;
                    m2 /= extent;
                    if (gx)
                        for (int k = 0; k < extent; ++k) {
                            const auto ix = static_cast<size_t>(base + k * step);
                            const double xhat = (xd[ix] - mean) * inv;
                            const double gh = g[ix] * gd[static_cast<size_t>(k)];
                            (*gx)[ix] += static_cast<T>((gh - m1 - xhat * m2) * inv);
                        }
                });
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Linear algebra

// Affine map over the last axis: y = x . W^T + b, W is (out, in).
template <typename T>
TensorT<T> linear(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>* b) {
    require_shape<T>(w.shape.rank == 2, "linear: weight must be rank-2, got " + w.shape.str());
    const int in = w.shape[1], out = w.shape[0];
    require_shape<T>(x.shape.rank >= 1 && x.shape[x.shape.rank - 1] == in,
                     "linear: input " + x.shape.str() + " inner dim != " + std::to_string(in));
    if (b)
        require_shape<T>(b->shape.numel() == out, "linear: bias length != out dim");
    const std::int64_t rows = x.numel() / in;

    Shape ys = x.shape;
    ys.d[ys.rank - 1] = out;
    TensorT<T> y(ys);
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = x.data.data() + r * in;
        T* yr = y.data.data() + r * out;
        for (int o = 0; o < out; ++o)
            yr[o] = (b ? b->data[static_cast<size_t>(o)] : T(0)) +
                    detail::dot_lanes(xr, w.data.data() + static_cast<size_t>(o) * in, in);
    }
    check_finite(y.data, "linear");

    const int xn = x.node, wn = w.node, bn = b ? b->node : -1;
    if (tp && (xn >= 0 || wn >= 0 || bn >= 0)) {
        std::vector<T> xcap = (wn >= 0) ? x.data : std::vector<T>{};
        std::vector<T> wcap = (xn >= 0) ? w.data : std::vector<T>{};
        y.node = tp->record(
            "linear", y.shape, {xn, wn, bn},
            [=, xcap = std::move(xcap), wcap = std::move(wcap)](Tape<T>& t, const std::vector<T>& g) {
                if (xn >= 0) {
                    auto& gx = t.grad_buffer(xn);
                    for (std::int64_t r = 0; r < rows; ++r) {
                        T* gxr = gx.data() + r * in;
                        const T* gr = g.data() + r * out;
                        for (int o = 0; o < out; ++o) {
                            const T gv = gr[o];
                            const T* wr = wcap.data() + static_cast<size_t>(o) * in;
                            for (int i = 0; i < in; ++i) gxr[i] += gv * wr[i];
                        }
                    }
                }
                if (wn >= 0) {
                    auto& gw = t.grad_buffer(wn);
                    for (std::int64_t r = 0; r < rows; ++r) {
                        const T* xr = xcap.data() + r * in;
                        const T* gr = g.data() + r * out;
                        for (int o = 0; o < out; ++o) {
                            const T gv = gr[o];
                            T* gwr = gw.data() + static_cast<size_t>(o) * in;
                            for (int i = 0; i < in; ++i) gwr[i] += gv * xr[i];
                        }
                    }
                }
                if (bn >= 0) {
                    auto& gb = t.grad_buffer(bn);
                    for (std::int64_t r = 0; r < rows; ++r) {
                        const T* gr = g.data() + r * out;
                        for (int o = 0; o < out; ++o) gb[static_cast<size_t>(o)] += gr[o];
                    }
                }
            });
    }
    return y;
}

namespace detail {

template <typename T>
void require_same_batch(const TensorT<T>& a, const TensorT<T>& b, const char* op) {
    require_shape<T>(a.shape.rank == b.shape.rank && a.shape.rank >= 2,
                     std::string(op) + ": rank mismatch " + a.shape.str() + " vs " + b.shape.str());
    for (int i = 0; i + 2 < a.shape.rank; ++i)
        require_shape<T>(a.shape[i] == b.shape[i], std::string(op) + ": batch dims differ " +
                                                       a.shape.str() + " vs " + b.shape.str());
}

}  // namespace detail

// Batched y = a . b^T where a is (..., n, k) and b is (..., m, k).
template <typename T>
TensorT<T> matmul_nt(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_batch(a, b, "matmul_nt");
    const int n = a.shape[a.shape.rank - 2], k = a.shape[a.shape.rank - 1];
    const int m = b.shape[b.shape.rank - 2];
    require_shape<T>(b.shape[b.shape.rank - 1] == k,
                     "matmul_nt: inner dims " + a.shape.str() + " vs " + b.shape.str());
    const std::int64_t batch = a.numel() / (static_cast<std::int64_t>(n) * k);

    Shape ys = a.shape;
    ys.d[ys.rank - 1] = m;
    TensorT<T> y(ys);
    for (std::int64_t t = 0; t < batch; ++t)
        detail::gemm_nt_acc(n, m, k, a.data.data() + t * n * k, b.data.data() + t * m * k,
                            y.data.data() + t * n * m);
    check_finite(y.data, "matmul_nt");

    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record(
            "matmul_nt", y.shape, {an, bn},
            [=, ad = a.data, bd = b.data](Tape<T>& t, const std::vector<T>& g) {
                std::vector<T> tmp;
                if (an >= 0) {
                    // da += G . B
                    auto& ga = t.grad_buffer(an);
                    for (std::int64_t tb = 0; tb < batch; ++tb)
                        detail::gemm_nn_acc(n, k, m, g.data() + tb * n * m,
                                            bd.data() + tb * m * k, ga.data() + tb * n * k);
                }
                if (bn >= 0) {
                    // db += G^T . A
                    auto& gb = t.grad_buffer(bn);
                    for (std::int64_t tb = 0; tb < batch; ++tb) {
                        detail::transpose_into(g.data() + tb * n * m, n, m, tmp);  // (m, n)
                        detail::gemm_nn_acc(m, k, n, tmp.data(), ad.data() + tb * n * k,
                                            gb.data() + tb * m * k);
                    }
                }
            });
    }
    return y;
}

// Batched y = a . b where a is (..., n, m) and b is (..., m, p).
template <typename T>
TensorT<T> matmul_nn(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    detail::require_same_batch(a, b, "matmul_nn");
    const int n = a.shape[a.shape.rank - 2], m = a.shape[a.shape.rank - 1];
    const int p = b.shape[b.shape.rank - 1];
    require_shape<T>(b.shape[b.shape.rank - 2] == m,
                     "matmul_nn: inner dims " + a.shape.str() + " vs " + b.shape.str());
    const std::int64_t batch = a.numel() / (static_cast<std::int64_t>(n) * m);

    Shape ys = b.shape;
    ys.d[ys.rank - 2] = n;
    TensorT<T> y(ys);
    for (std::int64_t t = 0; t < batch; ++t)
        detail::gemm_nn_acc(n, p, m, a.data.data() + t * n * m, b.data.data() + t * m * p,
                            y.data.data() + t * n * p);
    check_finite(y.data, "matmul_nn");

    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record(
            "matmul_nn", y.shape, {an, bn},
            [=, ad = a.data, bd = b.data](Tape<T>& t, const std::vector<T>& g) {
                std::vector<T> tmp;
                if (an >= 0) {
                    // da += G . B^T
                    auto& ga = t.grad_buffer(an);
                    for (std::int64_t tb = 0; tb < batch; ++tb)
                        detail::gemm_nt_acc(n, m, p, g.data() + tb * n * p,
                                            bd.data() + tb * m * p, ga.data() + tb * n * m);
                }
                if (bn >= 0) {
                    // db += A^T . G
                    auto& gb = t.grad_buffer(bn);
                    for (std::int64_t tb = 0; tb < batch; ++tb) {
                        detail::transpose_into(ad.data() + tb * n * m, n, m, tmp);  // (m, n)
                        detail::gemm_nn_acc(m, p, n, tmp.data(), g.data() + tb * n * p,
                                            gb.data() + tb * m * p);
                    }
                }
            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Elementwise combinators

template <typename T>
TensorT<T> add(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    require_shape<T>(a.shape == b.shape,
                     "add: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    TensorT<T> y(a.shape);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] + b.data[i];
    check_finite(y.data, "add");
    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record("add", y.shape, {an, bn}, [an, bn](Tape<T>& t, const std::vector<T>& g) {
            if (an >= 0) t.accumulate(an, g.data(), static_cast<std::int64_t>(g.size()));
            if (bn >= 0) t.accumulate(bn, g.data(), static_cast<std::int64_t>(g.size()));
        });
    }
    return y;
}

// a + b where b's shape is a trailing suffix of a's shape (tiled over the
// leading dims). Used to add the (heads, n, n') bias table to batched scores.
template <typename T>
TensorT<T> add_broadcast(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    require_shape<T>(b.shape.rank <= a.shape.rank, "add_broadcast: rank of b exceeds a");
    for (int i = 0; i < b.shape.rank; ++i)
        require_shape<T>(b.shape[i] == a.shape[a.shape.rank - b.shape.rank + i],
                         "add_broadcast: " + b.shape.str() + " is not a suffix of " + a.shape.str());
    const std::int64_t bs = b.numel();
    const std::int64_t reps = a.numel() / bs;
    TensorT<T> y(a.shape);
    for (std::int64_t r = 0; r < reps; ++r)
        for (std::int64_t i = 0; i < bs; ++i)
            y.data[static_cast<size_t>(r * bs + i)] =
                a.data[static_cast<size_t>(r * bs + i)] + b.data[static_cast<size_t>(i)];
    check_finite(y.data, "add_broadcast");
    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record("add_broadcast", y.shape, {an, bn},
                            [=](Tape<T>& t, const std::vector<T>& g) {
                                if (an >= 0)
                                    t.accumulate(an, g.data(), static_cast<std::int64_t>(g.size()));
                                if (bn >= 0) {
                                    auto& gb = t.grad_buffer(bn);
                                    for (std::int64_t r = 0; r < reps; ++r)
                                        for (std::int64_t i = 0; i < bs; ++i)
                                            gb[static_cast<size_t>(i)] +=
                                                g[static_cast<size_t>(r * bs + i)];
                                }
                            });
    }
    return y;
}

template <typename T>
TensorT<T> scale(Tape<T>* tp, const TensorT<T>& x, T c) {
    TensorT<T> y(x.shape);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = x.data[i] * c;
    check_finite(y.data, "scale");
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("scale", y.shape, {xn}, [xn, c](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buffer(xn);
            for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
        });
    }
    return y;
}

template <typename T>
TensorT<T> mul(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    require_shape<T>(a.shape == b.shape,
                     "mul: shape mismatch " + a.shape.str() + " vs " + b.shape.str());
    TensorT<T> y(a.shape);
    for (size_t i = 0; i < y.data.size(); ++i) y.data[i] = a.data[i] * b.data[i];
    check_finite(y.data, "mul");
    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record("mul", y.shape, {an, bn},
                            [an, bn, ad = a.data, bd = b.data](Tape<T>& t, const std::vector<T>& g) {
                                if (an >= 0) {
                                    auto& ga = t.grad_buffer(an);
                                    for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bd[i];
                                }
                                if (bn >= 0) {
                                    auto& gb = t.grad_buffer(bn);
                                    for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ad[i];
                                }
                            });
    }
    return y;
}

// Gate a (N, C, H, W) map by a (N, 1, H, W) per-pixel weight.
template <typename T>
TensorT<T> mul_gate_channels(Tape<T>* tp, const TensorT<T>& x, const TensorT<T>& gate) {
    require_shape<T>(x.shape.rank == 4 && gate.shape.rank == 4 && gate.shape[1] == 1 &&
                         gate.shape[0] == x.shape[0] && gate.shape[2] == x.shape[2] &&
                         gate.shape[3] == x.shape[3],
                     "mul_gate_channels: gate " + gate.shape.str() + " does not match map " +
                         x.shape.str());
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    TensorT<T> y(x.shape);
    for (int n = 0; n < N; ++n) {
        const T* gt = gate.data.data() + n * hw;
        for (int c = 0; c < C; ++c) {
            const T* xr = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            T* yr = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) yr[i] = xr[i] * gt[i];
        }
    }
    check_finite(y.data, "mul_gate_channels");
    const int xn = x.node, gn = gate.node;
    if (tp && (xn >= 0 || gn >= 0)) {
        y.node = tp->record(
            "mul_gate_channels", y.shape, {xn, gn},
            [=, xd = x.data, gd = gate.data](Tape<T>& t, const std::vector<T>& g) {
                if (xn >= 0) {
                    auto& gx = t.grad_buffer(xn);
                    for (int n = 0; n < N; ++n)
                        for (int c = 0; c < C; ++c) {
                            const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                            for (std::int64_t i = 0; i < hw; ++i)
                                gx[static_cast<size_t>(off + i)] +=
                                    g[static_cast<size_t>(off + i)] * gd[static_cast<size_t>(n * hw + i)];
                        }
                }
                if (gn >= 0) {
                    auto& gg = t.grad_buffer(gn);
                    for (int n = 0; n < N; ++n)
                        for (int c = 0; c < C; ++c) {
                            const std::int64_t off = (static_cast<std::int64_t>(n) * C + c) * hw;
                            for (std::int64_t i = 0; i < hw; ++i)
                                gg[static_cast<size_t>(n * hw + i)] +=
                                    g[static_cast<size_t>(off + i)] * xd[static_cast<size_t>(off + i)];
                        }
                }
            });
    }
    return y;
}

// Channel concatenation, first operand's channels first.
template <typename T>
TensorT<T> concat_channels(Tape<T>* tp, const TensorT<T>& a, const TensorT<T>& b) {
    require_shape<T>(a.shape.rank == 4 && b.shape.rank == 4 && a.shape[0] == b.shape[0] &&
                         a.shape[2] == b.shape[2] && a.shape[3] == b.shape[3],
                     "concat_channels: incompatible shapes " + a.shape.str() + " vs " +
                         b.shape.str());
    const int N = a.shape[0], Ca = a.shape[1], Cb = b.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(a.shape[2]) * a.shape[3];
    TensorT<T> y(Shape{N, Ca + Cb, a.shape[2], a.shape[3]});
    for (int n = 0; n < N; ++n) {
        std::copy(a.data.begin() + n * Ca * hw, a.data.begin() + (n + 1) * Ca * hw,
                  y.data.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw);
        std::copy(b.data.begin() + n * Cb * hw, b.data.begin() + (n + 1) * Cb * hw,
                  y.data.begin() + static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw);
    }
    const int an = a.node, bn = b.node;
    if (tp && (an >= 0 || bn >= 0)) {
        y.node = tp->record("concat_channels", y.shape, {an, bn},
                            [=](Tape<T>& t, const std::vector<T>& g) {
                                if (an >= 0) {
                                    auto& ga = t.grad_buffer(an);
                                    for (int n = 0; n < N; ++n)
                                        for (std::int64_t i = 0; i < Ca * hw; ++i)
                                            ga[static_cast<size_t>(n * Ca * hw + i)] += g[static_cast<size_t>(
                                                static_cast<std::int64_t>(n) * (Ca + Cb) * hw + i)];
                                }
                                if (bn >= 0) {
                                    auto& gb = t.grad_buffer(bn);
                                    for (int n = 0; n < N; ++n)
                                        for (std::int64_t i = 0; i < Cb * hw; ++i)
                                            gb[static_cast<size_t>(n * Cb * hw + i)] += g[static_cast<size_t>(
                                                static_cast<std::int64_t>(n) * (Ca + Cb) * hw + Ca * hw + i)];
                                }
                            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Reductions

// (N, C, H, W) -> (N, C): mean over spatial positions.
template <typename T>
TensorT<T> global_avg_pool(Tape<T>* tp, const TensorT<T>& x) {
    require_shape<T>(x.shape.rank == 4, "global_avg_pool: input must be rank-4");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    const T inv = T(1) / static_cast<T>(hw);
    TensorT<T> y(Shape{N, C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* xr = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            T acc = 0;
            for (std::int64_t i = 0; i < hw; ++i) acc += xr[i];
            y.at(n, c) = acc * inv;
        }
    check_finite(y.data, "global_avg_pool");
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("global_avg_pool", y.shape, {xn},
                            [=](Tape<T>& t, const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (int n = 0; n < N; ++n)
                                    for (int c = 0; c < C; ++c) {
                                        const T gv = g[static_cast<size_t>(n) * C + c] * inv;
                                        T* gr = gx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                                        for (std::int64_t i = 0; i < hw; ++i) gr[i] += gv;
                                    }
                            });
    }
    return y;
}

// (N, C, H, W) -> (N, 1, H, W): per-position mean over channels.
template <typename T>
TensorT<T> channel_mean(Tape<T>* tp, const TensorT<T>& x) {
    require_shape<T>(x.shape.rank == 4, "channel_mean: input must be rank-4");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    const T inv = T(1) / static_cast<T>(C);
    TensorT<T> y(Shape{N, 1, x.shape[2], x.shape[3]});
    for (int n = 0; n < N; ++n) {
        T* yr = y.data.data() + n * hw;
        std::fill(yr, yr + hw, T(0));
        for (int c = 0; c < C; ++c) {
            const T* xr = x.data.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
            for (std::int64_t i = 0; i < hw; ++i) yr[i] += xr[i];
        }
        for (std::int64_t i = 0; i < hw; ++i) yr[i] *= inv;
    }
    check_finite(y.data, "channel_mean");
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("channel_mean", y.shape, {xn},
                            [=](Tape<T>& t, const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (int n = 0; n < N; ++n)
                                    for (int c = 0; c < C; ++c) {
                                        T* gr = gx.data() + (static_cast<std::int64_t>(n) * C + c) * hw;
                                        for (std::int64_t i = 0; i < hw; ++i)
                                            gr[i] += g[static_cast<size_t>(n * hw + i)] * inv;
                                    }
                            });
    }
    return y;
}

template <typename T>
TensorT<T> sum_all(Tape<T>* tp, const TensorT<T>& x) {
    TensorT<T> y(Shape{1});
    T acc = 0;
    for (T v : x.data) acc += v;
    y.data[0] = acc;
    check_finite(y.data, "sum_all");
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("sum_all", y.shape, {xn}, [xn](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buffer(xn);
            for (auto& v : gx) v += g[0];
        });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Dropout

enum class Mode { train, eval };

// Inverted dropout: train mode zeroes with probability `rate` and scales
// survivors by 1/(1-rate); eval mode is the identity.
template <typename T>
TensorT<T> dropout(Tape<T>* tp, const TensorT<T>& x, double rate, Mode mode, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
    if (mode == Mode::eval || rate == 0.0) return x;
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
    auto mask = std::make_shared<std::vector<T>>(x.data.size());
    TensorT<T> y(x.shape);
    for (size_t i = 0; i < x.data.size(); ++i) {
        const T m = rng.uniform() < rate ? T(0) : keep_scale;
        (*mask)[i] = m;
        y.data[i] = x.data[i] * m;
    }
    check_finite(y.data, "dropout");
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record("dropout", y.shape, {xn},
                            [xn, mask](Tape<T>& t, const std::vector<T>& g) {
                                auto& gx = t.grad_buffer(xn);
                                for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*mask)[i];
                            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Layout conversions (index reinterpretation between map and token views)

namespace detail {

template <typename T, typename FwdIndex>
TensorT<T> permutation_op(Tape<T>* tp, const TensorT<T>& x, const char* name, Shape out_shape,
                          FwdIndex dst_of_src) {
    TensorT<T> y(out_shape);
    const std::int64_t n = x.numel();
    auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t d = dst_of_src(i);
        (*idx)[static_cast<size_t>(i)] = d;
        y.data[static_cast<size_t>(d)] = x.data[static_cast<size_t>(i)];
    }
    if (tp && x.node >= 0) {
        const int xn = x.node;
        y.node = tp->record(name, y.shape, {xn}, [xn, idx](Tape<T>& t, const std::vector<T>& g) {
            auto& gx = t.grad_buffer(xn);
            for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[static_cast<size_t>((*idx)[i])];
        });
    }
    return y;
}

}  // namespace detail

// (N, C, H, W) -> (N, H*W, C)
template <typename T>
TensorT<T> map_to_tokens(Tape<T>* tp, const TensorT<T>& x) {
    require_shape<T>(x.shape.rank == 4, "map_to_tokens: input must be rank-4");
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    return detail::permutation_op(tp, x, "map_to_tokens", Shape{N, H * W, C},
                                  [=](std::int64_t i) {
                                      const std::int64_t n = i / (C * hw);
                                      const std::int64_t r = i % (C * hw);
                                      const std::int64_t c = r / hw;
                                      const std::int64_t p = r % hw;
                                      return (n * hw + p) * C + c;
                                  });
}

// (N, n, d) -> (N, d, H, W) with n == H*W
template <typename T>
TensorT<T> tokens_to_map(Tape<T>* tp, const TensorT<T>& x, int H, int W) {
    require_shape<T>(x.shape.rank == 3, "tokens_to_map: input must be rank-3");
    const int N = x.shape[0], n = x.shape[1], d = x.shape[2];
    require_shape<T>(n == H * W, "tokens_to_map: " + std::to_string(n) + " tokens != " +
                                     std::to_string(H) + "x" + std::to_string(W) + " grid");
    const std::int64_t hw = static_cast<std::int64_t>(H) * W;
    return detail::permutation_op(tp, x, "tokens_to_map", Shape{N, d, H, W},
                                  [=](std::int64_t i) {
                                      const std::int64_t nn = i / (hw * d);
                                      const std::int64_t r = i % (hw * d);
                                      const std::int64_t p = r / d;
                                      const std::int64_t c = r % d;
                                      return (nn * d + c) * hw + p;
                                  });
}

// (N, n, d) -> (N, h, n, d/h)
template <typename T>
TensorT<T> split_heads(Tape<T>* tp, const TensorT<T>& x, int heads) {
    require_shape<T>(x.shape.rank == 3, "split_heads: input must be rank-3");
    const int N = x.shape[0], n = x.shape[1], d = x.shape[2];
    if (heads < 1 || d % heads != 0)
        throw ConfigError("split_heads: dim " + std::to_string(d) + " not divisible by heads " +
                          std::to_string(heads));
    const int dk = d / heads;
    return detail::permutation_op(tp, x, "split_heads", Shape{N, heads, n, dk},
                                  [=](std::int64_t i) {
                                      const std::int64_t nn = i / (static_cast<std::int64_t>(n) * d);
                                      const std::int64_t r = i % (static_cast<std::int64_t>(n) * d);
                                      const std::int64_t tok = r / d;
                                      const std::int64_t c = r % d;
                                      const std::int64_t h = c / dk;
                                      const std::int64_t k = c % dk;
                                      return ((nn * heads + h) * n + tok) * dk + k;
                                  });
}

// (N, h, n, dk) -> (N, n, h*dk)
template <typename T>
TensorT<T> merge_heads(Tape<T>* tp, const TensorT<T>& x) {
    require_shape<T>(x.shape.rank == 4, "merge_heads: input must be rank-4");
    const int N = x.shape[0], h = x.shape[1], n = x.shape[2], dk = x.shape[3];
    return detail::permutation_op(tp, x, "merge_heads", Shape{N, n, h * dk},
                                  [=](std::int64_t i) {
                                      const std::int64_t nn = i / (static_cast<std::int64_t>(h) * n * dk);
                                      const std::int64_t r = i % (static_cast<std::int64_t>(h) * n * dk);
                                      const std::int64_t hh = r / (static_cast<std::int64_t>(n) * dk);
                                      const std::int64_t r2 = r % (static_cast<std::int64_t>(n) * dk);
                                      const std::int64_t tok = r2 / dk;
                                      const std::int64_t k = r2 % dk;
                                      return (nn * n + tok) * (static_cast<std::int64_t>(h) * dk) +
                                             hh * dk + k;
                                  });
}

// ---------------------------------------------------------------------------
// Table gather (relative position bias)

// table is (heads, table_size); idx maps each (query, key) pair to a table
// entry. Output is (heads, n, m). Gradient scatter-adds into the table.
template <typename T>
TensorT<T> bias_gather(Tape<T>* tp, const TensorT<T>& table,
                       std::shared_ptr<const std::vector<int>> idx, int n, int m) {
    require_shape<T>(table.shape.rank == 2, "bias_gather: table must be rank-2 (heads, size)");
    require_shape<T>(static_cast<std::int64_t>(idx->size()) == static_cast<std::int64_t>(n) * m,
                     "bias_gather: index map length mismatch");
    const int heads = table.shape[0];
    const int tsize = table.shape[1];
    for (int v : *idx)
        if (v < 0 || v >= tsize) throw ContractError("bias_gather: index outside table");
    TensorT<T> y(Shape{heads, n, m});
    for (int h = 0; h < heads; ++h) {
        const T* tr = table.data.data() + static_cast<size_t>(h) * tsize;
        T* yr = y.data.data() + static_cast<std::int64_t>(h) * n * m;
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * m; ++i)
            yr[i] = tr[(*idx)[static_cast<size_t>(i)]];
    }
    check_finite(y.data, "bias_gather");
    if (tp && table.node >= 0) {
        const int tn = table.node;
        y.node = tp->record("bias_gather", y.shape, {tn},
                            [=](Tape<T>& t, const std::vector<T>& g) {
                                auto& gt = t.grad_buffer(tn);
                                for (int h = 0; h < heads; ++h) {
                                    T* gr = gt.data() + static_cast<size_t>(h) * tsize;
                                    const T* gg = g.data() + static_cast<std::int64_t>(h) * n * m;
                                    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * m; ++i)
                                        gr[(*idx)[static_cast<size_t>(i)]] += gg[i];
                                }
                            });
    }
    return y;
}

// ---------------------------------------------------------------------------
// Classification loss

// Mean negative log-likelihood over the batch, computed in log-space.
template <typename T>
TensorT<T> cross_entropy(Tape<T>* tp, const TensorT<T>& logits, const std::vector<int>& labels) {
    require_shape<T>(logits.shape.rank == 2, "cross_entropy: logits must be (batch, classes)");
    const int B = logits.shape[0], K = logits.shape[1];
    if (static_cast<int>(labels.size()) != B)
        throw ContractError("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                            std::to_string(B));
    for (int l : labels)
        if (l < 0 || l >= K) throw ContractError("cross_entropy: label " + std::to_string(l) +
                                                 " outside [0," + std::to_string(K) + ")");
    TensorT<T> y(Shape{1});
    double total = 0;
    for (int r = 0; r < B; ++r) {
        const T* lr = logits.data.data() + static_cast<size_t>(r) * K;
        T m = lr[0];
        for (int k = 1; k < K; ++k) m = std::max(m, lr[k]);
        double s = 0;
        for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(lr[k] - m));
        total += std::log(s) + m - lr[labels[static_cast<size_t>(r)]];
    }
    y.data[0] = static_cast<T>(total / B);
    check_finite(y.data, "cross_entropy");

    if (tp && logits.node >= 0) {
        const int ln = logits.node;
        y.node = tp->record("cross_entropy", y.shape, {ln},
                            [ln, labels, ld = logits.data, B, K](Tape<T>& t, const std::vector<T>& g) {
                                auto& gl = t.grad_buffer(ln);
                                const T gs = g[0] / static_cast<T>(B);
                                for (int r = 0; r < B; ++r) {
                                    const T* lr = ld.data() + static_cast<size_t>(r) * K;
                                    T m = lr[0];
                                    for (int k = 1; k < K; ++k) m = std::max(m, lr[k]);
                                    double s = 0;
                                    for (int k = 0; k < K; ++k) s += std::exp(static_cast<double>(lr[k] - m));
                                    for (int k = 0; k < K; ++k) {
                                        const double p = std::exp(static_cast<double>(lr[k] - m)) / s;
                                        const double onehot = (k == labels[static_cast<size_t>(r)]) ? 1.0 : 0.0;
                                        gl[static_cast<size_t>(r) * K + k] +=
                                            gs * static_cast<T>(p - onehot);
                                    }
                                }
                            });
    }
    return y;
}

// Test/utility helper: channel slice [c0, c1) of a map, forward only.
template <typename T>
TensorT<T> slice_channels(const TensorT<T>& x, int c0, int c1) {
    require_shape<T>(x.shape.rank == 4 && c0 >= 0 && c1 <= x.shape[1] && c0 < c1,
                     "slice_channels: bad range");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t hw = static_cast<std::int64_t>(x.shape[2]) * x.shape[3];
    TensorT<T> y(Shape{N, c1 - c0, x.shape[2], x.shape[3]});
    for (int n = 0; n < N; ++n)
        std::copy(x.data.begin() + (static_cast<std::int64_t>(n) * C + c0) * hw,
                  x.data.begin() + (static_cast<std::int64_t>(n) * C + c1) * hw,
                  y.data.begin() + static_cast<std::int64_t>(n) * (c1 - c0) * hw);
    return y;
}

}  // namespace fme
