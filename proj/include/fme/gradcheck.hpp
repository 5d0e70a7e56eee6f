#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fme/tape.hpp"
#include "fme/tensor.hpp"

namespace fme {

// Central-difference gradient verification. Runs in 64-bit only: finite
// differences are unreliable at float precision.
//
// The builder receives a tape (or nullptr for plain re-evaluation) and must
// return the scalar loss tensor; when a tape is given it must watch() each
// tensor whose gradient is to be checked. The same tensor objects are
// perturbed in place between evaluations.

struct GradCheckResult {
    double max_rel_err = 0.0;
    std::string worst;  // "tensor[coord]" of the worst coordinate
    int coords_checked = 0;
};

struct WatchedTensor {
    std::string name;
    TensorD* tensor;
};

inline GradCheckResult grad_check(const std::function<TensorD(TapeD*)>& build,
                                  const std::vector<WatchedTensor>& watched, double eps = 1e-5,
                                  int max_coords_per_tensor = 0) {
    TapeD tape;
    TensorD loss = build(&tape);
    if (loss.shape.numel() != 1) throw ContractError("grad_check: loss is not scalar");
    tape.backward(loss.node);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(watched.size());
    for (const auto& w : watched) {
        if (w.tensor->node < 0)
            throw ContractError("grad_check: watched tensor '" + w.name + "' was not bound");
        analytic.push_back(tape.grad(w.tensor->node));
    }

    GradCheckResult res;
    for (size_t wi = 0; wi < watched.size(); ++wi) {
        TensorD& t = *watched[wi].tensor;
        const std::int64_t n = t.numel();
        const int samples =
            (max_coords_per_tensor > 0 && n > max_coords_per_tensor) ? max_coords_per_tensor
                                                                     : static_cast<int>(n);
        for (int s = 0; s < samples; ++s) {
            const std::int64_t i = (n * s + samples / 2) / samples;  // deterministic spread
            const double saved = t.data[static_cast<size_t>(i)];
            t.data[static_cast<size_t>(i)] = saved + eps;
            const double fp = build(nullptr).data[0];
            t.data[static_cast<size_t>(i)] = saved - eps;
            const double fm = build(nullptr).data[0];
            t.data[static_cast<size_t>(i)] = saved;
            const double fd = (fp - fm) / (2.0 * eps);
            const double a = analytic[wi][static_cast<size_t>(i)];
            const double rel = std::abs(a - fd) / std::max(1.0, std::abs(fd));
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = watched[wi].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return res;
}

}  // namespace fme
