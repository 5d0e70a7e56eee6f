#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fme/cmt.hpp"
#include "fme/gradcheck.hpp"
#include "oracles.hpp"

using namespace fme;

namespace {

TensorD random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

void zero(ParameterT<double>* p) {
    std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
}

void identity_1x1(ParameterT<double>* p) {
    std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
    for (int i = 0; i < p->value.shape[0]; ++i) p->value.at(i, i, 0, 0) = 1.0;
}

}  // namespace

TEST_CASE("lpu with zero weights is the identity") {
    Rng rng(1);
    auto x = random_tensor(Shape{1, 3, 5, 5}, rng);
    TensorD w(Shape{3, 1, 3, 3}, 0.0);
    TensorD b(Shape{3}, 0.0);
    auto y = lpu<double>(nullptr, x, w, b);
    CHECK(y.data == x.data);
}

TEST_CASE("lpu preserves shape and rejects channel mismatch") {
    Rng rng(2);
    auto x = random_tensor(Shape{2, 4, 6, 7}, rng);
    auto w = random_tensor(Shape{4, 1, 3, 3}, rng);
    auto b = random_tensor(Shape{4}, rng);
    auto y = lpu<double>(nullptr, x, w, b);
    CHECK(y.shape == x.shape);

    auto wbad = random_tensor(Shape{3, 1, 3, 3}, rng);
    auto bbad = random_tensor(Shape{3}, rng);
    CHECK_THROWS_AS(lpu<double>(nullptr, x, wbad, bbad), ShapeError);
}

TEST_CASE("lpu commutes with translation away from the border") {
    Rng rng(3);
    const int S = 8;
    auto x = random_tensor(Shape{1, 2, S, S}, rng);
    TensorD shifted(x.shape);
    for (int c = 0; c < 2; ++c)
        for (int h = 0; h < S; ++h)
            for (int w = 0; w < S; ++w)
                shifted.at(0, c, h, w) = x.at(0, c, (h + S - 1) % S, (w + S - 1) % S);
    auto w = random_tensor(Shape{2, 1, 3, 3}, rng);
    auto b = random_tensor(Shape{2}, rng);
    auto y = lpu<double>(nullptr, x, w, b);
    auto ys = lpu<double>(nullptr, shifted, w, b);
    // interior only: the clamped border sees different padding
    for (int c = 0; c < 2; ++c)
        for (int h = 2; h < S - 1; ++h)
            for (int ww = 2; ww < S - 1; ++ww)
                CHECK(ys.at(0, c, h, ww) == doctest::Approx(y.at(0, c, h - 1, ww - 1)).epsilon(1e-12));
}

TEST_CASE("irffn zero projection weights yield a zero map") {
    Rng rng(4);
    ParamStoreD store;
    IrffnParams<double> p(store, "ffn", 4, 2, rng);
    zero(p.project_w);
    zero(p.project_b);
    auto x = random_tensor(Shape{1, 16, 4}, rng);
    auto y = irffn<double>(nullptr, x, 4, 4, p);
    CHECK(y.shape == x.shape);
    for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("irffn inner skip passes the expanded activation through when depthwise is zero") {
    Rng rng(5);
    ParamStoreD store;
    IrffnParams<double> p(store, "ffn", 3, 1, rng);
    identity_1x1(p.expand_w);
    zero(p.expand_b);
    zero(p.dw_w);
    zero(p.dw_b);
    identity_1x1(p.project_w);
    zero(p.project_b);
    auto x = random_tensor(Shape{1, 9, 3}, rng);
    auto y = irffn<double>(nullptr, x, 3, 3, p);
    // with identity pointwise maps and a dead depthwise branch the op
    // reduces to the two activations alone
    auto want = gelu<double>(nullptr, gelu<double>(nullptr, x));
    for (size_t i = 0; i < y.data.size(); ++i)
        CHECK(y.data[i] == doctest::Approx(want.data[i]).epsilon(1e-12));
}

TEST_CASE("irffn keeps the token dim for any expansion ratio") {
    Rng rng(6);
    for (int ratio : {1, 2, 4}) {
        ParamStoreD store;
        IrffnParams<double> p(store, "ffn", 5, ratio, rng);
        auto x = random_tensor(Shape{2, 12, 5}, rng);
        auto y = irffn<double>(nullptr, x, 3, 4, p);
        CHECK(y.shape == x.shape);
    }
}

TEST_CASE("irffn gradient matches central differences") {
    Rng rng(7);
    ParamStoreD store;
    IrffnParams<double> p(store, "ffn", 3, 2, rng);
    auto x = random_tensor(Shape{1, 9, 3}, rng);
    auto build = [&](TapeD* tp) {
        if (tp) {
            store.bind(*tp);
            tp->watch(x);
        } else {
            store.unbind();
        }
        auto y = irffn<double>(tp, x, 3, 3, p);
        return sum_all<double>(tp, mul<double>(tp, y, y));
    };
    std::vector<WatchedTensor> watched{{"x", &x}};
    for (size_t i = 0; i < store.size(); ++i)
        watched.push_back({store.at(i).name, &store.at(i).value});
    CHECK(grad_check(build, watched, 1e-5, 8).max_rel_err < 1e-4);
}

TEST_CASE("cmt block with dead sublayers is an exact skip") {
    Rng rng(8);
    CmtBlockConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.irffn_ratio = 2;
    cfg.kv_stride = 2;
    ParamStoreD store;
    CmtBlockParams<double> p(store, "block", cfg, 4, 4, rng);
    zero(p.lpu_w);
    zero(p.lpu_b);
    zero(p.attn.wv);
    zero(p.ffn.project_w);
    zero(p.ffn.project_b);

    auto x = random_tensor(Shape{1, 16, 4}, rng);
    auto y = cmt_block<double>(nullptr, x, 4, 4, p);
    CHECK(y.data == x.data);
}

TEST_CASE("cmt block preserves shape for random valid configs") {
    Rng rng(9);
    for (int heads : {1, 2}) {
        CmtBlockConfig cfg;
        cfg.dim = 6;
        cfg.heads = heads;
        cfg.irffn_ratio = 2;
        cfg.kv_stride = 2;
        ParamStoreD store;
        CmtBlockParams<double> p(store, "block", cfg, 3, 4, rng);
        auto x = random_tensor(Shape{2, 12, 6}, rng);
        auto y = cmt_block<double>(nullptr, x, 3, 4, p);
        CHECK(y.shape == x.shape);
    }
}

TEST_CASE("residual composition: out equals irffn output plus z, bit-exact") {
    Rng rng(10);
    CmtBlockConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.irffn_ratio = 2;
    ParamStoreD store;
    CmtBlockParams<double> p(store, "block", cfg, 4, 4, rng);
    auto x = random_tensor(Shape{1, 16, 4}, rng);
    CmtTrace<double> trace;
    auto out = cmt_block<double>(nullptr, x, 4, 4, p, &trace);
    REQUIRE(trace.z.shape == out.shape);
    REQUIRE(trace.irffn_out.shape == out.shape);
    for (size_t i = 0; i < out.data.size(); ++i)
        CHECK(out.data[i] == trace.irffn_out.data[i] + trace.z.data[i]);
}

TEST_CASE("token and map entries produce identical results") {
    Rng rng(11);
    CmtBlockConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.irffn_ratio = 2;
    ParamStoreD store;
    CmtBlockParams<double> p(store, "block", cfg, 4, 4, rng);
    auto map = random_tensor(Shape{1, 4, 4, 4}, rng);

    auto via_map = cmt_block_map<double>(nullptr, map, p);
    auto tokens = map_to_tokens<double>(nullptr, map);
    auto via_tokens = tokens_to_map<double>(nullptr, cmt_block<double>(nullptr, tokens, 4, 4, p), 4, 4);
    for (size_t i = 0; i < via_map.data.size(); ++i)
        CHECK(via_map.data[i] == doctest::Approx(via_tokens.data[i]).epsilon(1e-6));
}

TEST_CASE("stacking preserves shape for any depth including zero") {
    Rng rng(12);
    CmtBlockConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.irffn_ratio = 2;
    for (int depth : {0, 1, 3}) {
        ParamStoreD store;
        std::vector<CmtBlockParams<double>> blocks;
        for (int i = 0; i < depth; ++i)
            blocks.emplace_back(store, "block" + std::to_string(i), cfg, 4, 4, rng);
        auto x = random_tensor(Shape{1, 16, 4}, rng);
        auto y = x;
        for (auto& b : blocks) y = cmt_block<double>(nullptr, y, 4, 4, b);
        CHECK(y.shape == x.shape);
        if (depth == 0) CHECK(y.data == x.data);
    }
}

TEST_CASE("full cmt block gradient check on a 4x4 grid, d=8, h=2") {
    Rng rng(13);
    CmtBlockConfig cfg;
    cfg.dim = 8;
    cfg.heads = 2;
    cfg.irffn_ratio = 2;
    cfg.kv_stride = 2;
    ParamStoreD store;
    CmtBlockParams<double> p(store, "block", cfg, 4, 4, rng);
    auto x = random_tensor(Shape{1, 16, 8}, rng);
    auto build = [&](TapeD* tp) {
        if (tp) {
            store.bind(*tp);
            tp->watch(x);
        } else {
            store.unbind();
        }
        auto y = cmt_block<double>(tp, x, 4, 4, p);
        return sum_all<double>(tp, mul<double>(tp, y, y));
    };
    std::vector<WatchedTensor> watched{{"x", &x}};
    for (size_t i = 0; i < store.size(); ++i)
        watched.push_back({store.at(i).name, &store.at(i).value});
    auto res = grad_check(build, watched, 1e-5, 4);
    CHECK(res.max_rel_err < 1e-4);
}
