#pragma once

#include <string>
#include <vector>

namespace fme::check {

struct LayerCheck {
    std::string name;
    double max_rel_err = 0.0;
    double threshold = 1e-4;
    bool pass = false;
};

// 64-bit central-difference verification over every layer type plus a
// micro end-to-end model (32x32 input, widths 8/16/32/64, threshold 5e-4).
// `only` filters by substring; `inject_wrong` appends a deliberately broken
// gradient to prove the harness can fail.
std::vector<LayerCheck> run_suite(const std::string& only = "", bool inject_wrong = false);

}  // namespace fme::check
