#pragma once

// Independent reference implementations used only by tests. These are
// deliberately naive (nested loops, O(n^2) sweeps, series expansions) and
// must stay decoupled from the kernels they check.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "fme/tensor.hpp"

namespace oracle {

// Quintuple-loop cross-correlation with padding/stride/groups, all in double.
template <typename T>
fme::TensorT<double> conv2d_ref(const fme::TensorT<T>& x, const fme::TensorT<T>& w,
                                const std::vector<T>* bias, int stride, int pad, int groups) {
    const int N = x.shape[0], Cin = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    const int Cg = Cin / groups, Og = Cout / groups;
    fme::TensorT<double> y(fme::Shape{N, Cout, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = bias ? static_cast<double>((*bias)[co]) : 0.0;
                    const int g = co / Og;
                    for (int cg = 0; cg < Cg; ++cg)
                        for (int i = 0; i < kh; ++i)
                            for (int j = 0; j < kw; ++j) {
                                const int ih = oh * stride - pad + i;
                                const int iw = ow * stride - pad + j;
                                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                                acc += static_cast<double>(x.at(n, g * Cg + cg, ih, iw)) *
                                       static_cast<double>(w.at(co, cg, i, j));
                            }
                    y.at(n, co, oh, ow) = acc;
                }
    return y;
}

template <typename T>
fme::TensorT<double> max_pool2d_ref(const fme::TensorT<T>& x, int window, int stride) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Ho = (H - window) / stride + 1;
    const int Wo = (W - window) / stride + 1;
    fme::TensorT<double> y(fme::Shape{N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double best = -1e300;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j)
                            best = std::max(best, static_cast<double>(
                                                      x.at(n, c, oh * stride + i, ow * stride + j)));
                    y.at(n, c, oh, ow) = best;
                }
    return y;
}

template <typename T>
fme::TensorT<double> avg_pool2d_ref(const fme::TensorT<T>& x, int window, int stride) {
    const int N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
    const int Ho = (H - window) / stride + 1;
    const int Wo = (W - window) / stride + 1;
    fme::TensorT<double> y(fme::Shape{N, C, Ho, Wo});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double acc = 0;
                    for (int i = 0; i < window; ++i)
                        for (int j = 0; j < window; ++j)
                            acc += static_cast<double>(x.at(n, c, oh * stride + i, ow * stride + j));
                    y.at(n, c, oh, ow) = acc / (window * window);
                }
    return y;
}

// Triple-loop y = x . W^T + b over the last axis.
template <typename T>
std::vector<double> linear_ref(const fme::TensorT<T>& x, const fme::TensorT<T>& w,
                               const std::vector<T>* b) {
    const int in = w.shape[1], out = w.shape[0];
    const std::int64_t rows = x.numel() / in;
    std::vector<double> y(static_cast<size_t>(rows * out), 0.0);
    for (std::int64_t r = 0; r < rows; ++r)
        for (int o = 0; o < out; ++o) {
            double acc = b ? static_cast<double>((*b)[o]) : 0.0;
            for (int i = 0; i < in; ++i)
                acc += static_cast<double>(x.data[static_cast<size_t>(r * in + i)]) *
                       static_cast<double>(w.data[static_cast<size_t>(o * in + i)]);
            y[static_cast<size_t>(r * out + o)] = acc;
        }
    return y;
}

// erf via its Maclaurin series, independent of std::erf.
inline double erf_series(double x) {
    const double inv_sqrt_pi = 0.5641895835477563;
    double term = x, sum = x;
    for (int n = 1; n < 64; ++n) {
        term *= -x * x / n;
        sum += term / (2 * n + 1);
    }
    return 2.0 * inv_sqrt_pi * sum;
}

// Central finite differences of a scalar function of one coordinate.
template <typename F>
double central_diff(F f, double& coord, double eps = 1e-5) {
    const double saved = coord;
    coord = saved + eps;
    const double fp = f();
    coord = saved - eps;
    const double fm = f();
    coord = saved;
    return (fp - fm) / (2 * eps);
}

template <typename T>
double max_rel_err(const std::vector<T>& got, const std::vector<double>& want) {
    double worst = 0;
    for (size_t i = 0; i < got.size(); ++i) {
        const double denom = std::max(1.0, std::abs(want[i]));
        worst = std::max(worst, std::abs(static_cast<double>(got[i]) - want[i]) / denom);
    }
    return worst;
}

}  // namespace oracle
