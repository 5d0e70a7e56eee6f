#include "fme/gradcheck_suite.hpp"

#include "fme/backbone.hpp"
#include "fme/gradcheck.hpp"

namespace fme::check {

namespace {

TensorD random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

std::vector<WatchedTensor> watch_all(ParamStoreD& store, std::vector<WatchedTensor> extra = {}) {
    for (size_t i = 0; i < store.size(); ++i)
        extra.push_back({store.at(i).name, &store.at(i).value});
    return extra;
}

using Builder = std::function<TensorD(TapeD*)>;

TensorD squared_sum(TapeD* tp, const TensorD& y) { return sum_all(tp, mul(tp, y, y)); }

LayerCheck run_one(const std::string& name, const Builder& build,
                   const std::vector<WatchedTensor>& watched, double threshold,
                   int coords_per_tensor) {
    LayerCheck check;
    check.name = name;
    check.threshold = threshold;
    auto res = grad_check(build, watched, 1e-5, coords_per_tensor);
    check.max_rel_err = res.max_rel_err;
    check.pass = res.max_rel_err < threshold;
    return check;
}

ModelConfig micro_model_config() {
    ModelConfig c;
    c.input_size = 32;
    c.stage_dims = {8, 16, 32, 64};
    c.stage_depths = {1, 1, 1, 1};
    c.stage_heads = {1, 2, 2, 4};
    c.irffn_ratio = 2;
    c.residual_dims = {8, 16, 24, 32};
    return c;
}

}  // namespace

std::vector<LayerCheck> run_suite(const std::string& only, bool inject_wrong) {
    std::vector<LayerCheck> results;
    auto wants = [&](const std::string& name) {
        return only.empty() || name.find(only) != std::string::npos;
    };

    Rng rng(0x67726164);

    if (wants("conv")) {
        auto x = random_tensor(Shape{1, 3, 6, 6}, rng);
        auto w = random_tensor(Shape{4, 3, 3, 3}, rng);
        auto b = random_tensor(Shape{4}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                tp->watch(x);
                tp->watch(w);
                tp->watch(b);
            }
            return squared_sum(tp, conv2d(tp, x, w, &b, 2, 1));
        };
        results.push_back(run_one("conv", build, {{"x", &x}, {"w", &w}, {"b", &b}}, 1e-4, 0));
    }
    if (wants("depthwise_conv")) {
        auto x = random_tensor(Shape{1, 4, 5, 5}, rng);
        auto w = random_tensor(Shape{4, 1, 3, 3}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                tp->watch(x);
                tp->watch(w);
            }
            return squared_sum(tp, conv2d(tp, x, w, static_cast<const TensorD*>(nullptr), 1, 1, 4));
        };
        results.push_back(run_one("depthwise_conv", build, {{"x", &x}, {"w", &w}}, 1e-4, 0));
    }
    if (wants("linear")) {
        auto x = random_tensor(Shape{3, 5}, rng);
        auto w = random_tensor(Shape{4, 5}, rng);
        auto b = random_tensor(Shape{4}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                tp->watch(x);
                tp->watch(w);
                tp->watch(b);
            }
            return squared_sum(tp, linear(tp, x, w, &b));
        };
        results.push_back(run_one("linear", build, {{"x", &x}, {"w", &w}, {"b", &b}}, 1e-4, 0));
    }
    if (wants("gelu")) {
        auto x = random_tensor(Shape{4, 6}, rng, -2, 2);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, gelu(tp, x));
        };
        results.push_back(run_one("gelu", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("relu")) {
        auto x = random_tensor(Shape{4, 6}, rng, 0.25, 2.0);  // away from the kink
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, relu(tp, x));
        };
        results.push_back(run_one("relu", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("sigmoid")) {
        auto x = random_tensor(Shape{4, 6}, rng, -3, 3);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, sigmoid(tp, x));
        };
        results.push_back(run_one("sigmoid", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("softmax")) {
        auto x = random_tensor(Shape{3, 7}, rng, -2, 2);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, softmax(tp, x, 1));
        };
        results.push_back(run_one("softmax", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("layer_norm")) {
        auto x = random_tensor(Shape{2, 8}, rng, -2, 2);
        auto gamma = random_tensor(Shape{8}, rng, 0.5, 1.5);
        auto beta = random_tensor(Shape{8}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                tp->watch(x);
                tp->watch(gamma);
                tp->watch(beta);
            }
            return squared_sum(tp, layer_norm(tp, x, gamma, beta, 1));
        };
        results.push_back(run_one("layer_norm", build,
                                  {{"x", &x}, {"gamma", &gamma}, {"beta", &beta}}, 1e-4, 0));
    }
    if (wants("max_pool")) {
        auto x = random_tensor(Shape{1, 2, 6, 6}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, max_pool2d(tp, x, 2, 2));
        };
        results.push_back(run_one("max_pool", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("avg_pool")) {
        auto x = random_tensor(Shape{1, 2, 6, 6}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            return squared_sum(tp, avg_pool2d(tp, x, 2, 2));
        };
        results.push_back(run_one("avg_pool", build, {{"x", &x}}, 1e-4, 0));
    }
    if (wants("cross_entropy")) {
        auto logits = random_tensor(Shape{4, 4}, rng, -2, 2);
        const std::vector<int> labels = {0, 2, 1, 3};
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(logits);
            return cross_entropy(tp, logits, labels);
        };
        results.push_back(run_one("cross_entropy", build, {{"logits", &logits}}, 1e-4, 0));
    }
    if (wants("lmhsa")) {
        AttentionConfig cfg;
        cfg.dim = 4;
        cfg.heads = 2;
        cfg.kv_stride = 2;
        ParamStoreD store;
        LmhsaParams<double> p(store, "lmhsa", cfg, 4, 4, rng);
        auto x = random_tensor(Shape{1, 16, 4}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            return squared_sum(tp, lmhsa(tp, x, 4, 4, p));
        };
        results.push_back(run_one("lmhsa", build, watch_all(store, {{"x", &x}}), 1e-4, 8));
    }
    if (wants("lpu")) {
        auto x = random_tensor(Shape{1, 3, 5, 5}, rng);
        auto w = random_tensor(Shape{3, 1, 3, 3}, rng);
        auto b = random_tensor(Shape{3}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                tp->watch(x);
                tp->watch(w);
                tp->watch(b);
            }
            return squared_sum(tp, lpu(tp, x, w, b));
        };
        results.push_back(run_one("lpu", build, {{"x", &x}, {"w", &w}, {"b", &b}}, 1e-4, 0));
    }
    if (wants("irffn")) {
        ParamStoreD store;
        IrffnParams<double> p(store, "irffn", 4, 2, rng);
        auto x = random_tensor(Shape{1, 16, 4}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            return squared_sum(tp, irffn(tp, x, 4, 4, p));
        };
        results.push_back(run_one("irffn", build, watch_all(store, {{"x", &x}}), 1e-4, 8));
    }
    if (wants("cmt_block")) {
        CmtBlockConfig cfg;
        cfg.dim = 8;
        cfg.heads = 2;
        cfg.irffn_ratio = 2;
        cfg.kv_stride = 2;
        ParamStoreD store;
        CmtBlockParams<double> p(store, "cmt", cfg, 4, 4, rng);
        auto x = random_tensor(Shape{1, 16, 8}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            return squared_sum(tp, cmt_block(tp, x, 4, 4, p));
        };
        results.push_back(run_one("cmt_block", build, watch_all(store, {{"x", &x}}), 1e-4, 4));
    }
    if (wants("pixel_attention")) {
        ParamStoreD store;
        PixelAttentionParams<double> p(store, "pa", 8, rng);
        auto x = random_tensor(Shape{1, 8, 4, 4}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            auto out = pixel_attention(tp, x, p);
            return squared_sum(tp, out.gated);
        };
        results.push_back(run_one("pixel_attention", build, watch_all(store, {{"x", &x}}), 1e-4, 8));
    }
    if (wants("residual_m")) {
        ParamStoreD store;
        ResidualBlockM<double> m(store, "m", 3, 4, 2, rng);
        auto x = random_tensor(Shape{1, 3, 6, 6}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            return squared_sum(tp, m.forward(tp, x));
        };
        results.push_back(run_one("residual_m", build, watch_all(store, {{"x", &x}}), 1e-4, 8));
    }
    if (wants("residual_n")) {
        ParamStoreD store;
        ResidualBlockN<double> n(store, "n", 3, rng);
        auto x = random_tensor(Shape{1, 3, 6, 6}, rng);
        auto build = [&](TapeD* tp) {
            if (tp) {
                store.bind(*tp);
                tp->watch(x);
            } else {
                store.unbind();
            }
            return squared_sum(tp, n.forward(tp, x));
        };
        results.push_back(run_one("residual_n", build, watch_all(store, {{"x", &x}}), 1e-4, 8));
    }
    if (wants("end_to_end")) {
        ModelD model(micro_model_config(), 0x6d6963726f);
        auto x = random_tensor(Shape{1, 1, 32, 32}, rng, 0.0, 1.0);
        const std::vector<int> labels = {2};
        auto build = [&](TapeD* tp) {
            Rng unused(0);
            if (tp) {
                model.params().bind(*tp);
                tp->watch(x);
            } else {
                model.params().unbind();
            }
            auto out = model.forward(tp, x, Mode::eval, unused);
            return cross_entropy(tp, out.logits, labels);
        };
        results.push_back(
            run_one("end_to_end", build, watch_all(model.params(), {{"x", &x}}), 5e-4, 2));
    }
    if (inject_wrong) {
        auto x = random_tensor(Shape{4}, rng, 0.5, 1.5);
        auto build = [&](TapeD* tp) {
            if (tp) tp->watch(x);
            TensorD y = x;
            y.node = -1;
            if (tp && x.node >= 0) {
                const int xn = x.node;
                y.node = tp->record("wrong_gradient_probe", y.shape, {xn},
                                    [xn](TapeD& t, const std::vector<double>& g) {
                                        auto& gx = t.grad_buffer(xn);
                                        for (size_t i = 0; i < g.size(); ++i) gx[i] += 0.5 * g[i];
                                    });
            }
            return sum_all(tp, y);
        };
        results.push_back(run_one("wrong_gradient_probe", build, {{"x", &x}}, 1e-4, 0));
    }
    return results;
}

}  // namespace fme::check
