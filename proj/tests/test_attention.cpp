#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fme/attention.hpp"
#include "fme/gradcheck.hpp"
#include "oracles.hpp"

using namespace fme;

namespace {

TensorD random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorD t(s);
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

TensorD identity_matrix(int n) {
    TensorD m(Shape{n, n}, 0.0);
    for (int i = 0; i < n; ++i) m.at(i, i) = 1.0;
    return m;
}

// Depthwise delta kernel: center tap 1, everything else 0.
TensorD delta_depthwise(int channels) {
    TensorD w(Shape{channels, 1, 3, 3}, 0.0);
    for (int c = 0; c < channels; ++c) w.at(c, 0, 1, 1) = 1.0;
    return w;
}

}  // namespace

TEST_CASE("qkv_project identity and zero weights") {
    Rng rng(1);
    auto x = random_tensor(Shape{1, 6, 4}, rng);
    auto eye = identity_matrix(4);
    auto zero = TensorD(Shape{4, 4}, 0.0);
    auto qkv = qkv_project<double>(nullptr, x, eye, eye, eye);
    CHECK(qkv[0].data == x.data);
    CHECK(qkv[1].data == x.data);
    CHECK(qkv[2].data == x.data);

    auto qkv2 = qkv_project<double>(nullptr, x, zero, eye, eye);
    for (double v : qkv2[0].data) CHECK(v == 0.0);
}

TEST_CASE("qkv_project random case matches matmul oracle") {
    Rng rng(2);
    auto x = random_tensor(Shape{2, 5, 4}, rng);
    auto wq = random_tensor(Shape{4, 4}, rng);
    auto qkv = qkv_project<double>(nullptr, x, wq, wq, wq);
    auto ref = oracle::linear_ref(x, wq, static_cast<const std::vector<double>*>(nullptr));
    CHECK(oracle::max_rel_err(qkv[0].data, ref) < 1e-12);
}

TEST_CASE("reduce_kv stride 1 with delta kernel is the identity") {
    Rng rng(3);
    AttentionConfig cfg;
    cfg.dim = 3;
    cfg.heads = 1;
    cfg.kv_stride = 1;
    auto k = random_tensor(Shape{1, 16, 3}, rng);
    auto v = random_tensor(Shape{1, 16, 3}, rng);
    auto dw = delta_depthwise(3);
    auto db = TensorD(Shape{3}, 0.0);
    auto red = reduce_kv<double>(nullptr, k, v, 4, 4, cfg, dw, db, dw, db);
    CHECK(red.h == 4);
    CHECK(red.w == 4);
    CHECK(red.k.data == k.data);
    CHECK(red.v.data == v.data);
}

TEST_CASE("reduce_kv stride 2 on a 4x4 grid yields 4 tokens") {
    Rng rng(4);
    AttentionConfig cfg;
    cfg.dim = 2;
    cfg.heads = 1;
    cfg.kv_stride = 2;
    auto k = random_tensor(Shape{1, 16, 2}, rng);
    auto v = random_tensor(Shape{1, 16, 2}, rng);
    auto dw = random_tensor(Shape{2, 1, 3, 3}, rng);
    auto db = random_tensor(Shape{2}, rng);
    auto red = reduce_kv<double>(nullptr, k, v, 4, 4, cfg, dw, db, dw, db);
    CHECK(red.k.shape == Shape{1, 4, 2});
    CHECK(red.v.shape == Shape{1, 4, 2});

    // against the depthwise-conv oracle on the token grid
    TensorD km(Shape{1, 2, 4, 4});
    for (int t = 0; t < 16; ++t)
        for (int c = 0; c < 2; ++c) km.at(0, c, t / 4, t % 4) = k.at(0, t, c);
    auto ref = oracle::conv2d_ref<double>(km, dw, &db.data, 2, 1, 2);
    for (int t = 0; t < 4; ++t)
        for (int c = 0; c < 2; ++c)
            CHECK(red.k.at(0, t, c) == doctest::Approx(ref.at(0, c, t / 2, t % 2)).epsilon(1e-12));

    auto bad = random_tensor(Shape{1, 15, 2}, rng);
    CHECK_THROWS_AS(reduce_kv<double>(nullptr, bad, bad, 4, 4, cfg, dw, db, dw, db), ShapeError);
}

TEST_CASE("light_attention with a single key returns v") {
    Rng rng(5);
    auto q = random_tensor(Shape{1, 3}, rng);
    auto k = random_tensor(Shape{1, 3}, rng);
    auto v = random_tensor(Shape{1, 3}, rng);
    auto y = light_attention<double>(nullptr, q, k, v, nullptr);
    CHECK(y.data == v.data);
}

TEST_CASE("light_attention with two identical keys averages v rows") {
    Rng rng(6);
    auto q = random_tensor(Shape{4, 3}, rng);
    TensorD k(Shape{2, 3});
    for (int j = 0; j < 3; ++j) k.at(0, j) = k.at(1, j) = rng.uniform(-1, 1);
    auto v = random_tensor(Shape{2, 3}, rng);
    auto y = light_attention<double>(nullptr, q, k, v, nullptr);
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 3; ++j)
            CHECK(y.at(i, j) == doctest::Approx(0.5 * (v.at(0, j) + v.at(1, j))).epsilon(1e-12));
}

TEST_CASE("light_attention against a brute-force softmax-matmul oracle") {
    Rng rng(7);
    const int n = 5, m = 4, dk = 3, dv = 2;
    auto q = random_tensor(Shape{n, dk}, rng);
    auto k = random_tensor(Shape{m, dk}, rng);
    auto v = random_tensor(Shape{m, dv}, rng);
    auto bias = random_tensor(Shape{n, m}, rng);
    auto y = light_attention<double>(nullptr, q, k, v, &bias);

    for (int i = 0; i < n; ++i) {
        std::vector<double> row(m);
        double mx = -1e300;
        for (int j = 0; j < m; ++j) {
            double s = 0;
            for (int c = 0; c < dk; ++c) s += q.at(i, c) * k.at(j, c);
            row[j] = s / std::sqrt(double(dk)) + bias.at(i, j);
            mx = std::max(mx, row[j]);
        }
        double z = 0;
        for (double& r : row) {
            r = std::exp(r - mx);
            z += r;
        }
        for (int c = 0; c < dv; ++c) {
            double want = 0;
            for (int j = 0; j < m; ++j) want += row[j] / z * v.at(j, c);
            CHECK(y.at(i, c) == doctest::Approx(want).epsilon(1e-10));
        }
    }
}

TEST_CASE("adding a constant to the bias leaves attention unchanged") {
    Rng rng(8);
    auto q = random_tensor(Shape{4, 3}, rng);
    auto k = random_tensor(Shape{5, 3}, rng);
    auto v = random_tensor(Shape{5, 3}, rng);
    auto bias = random_tensor(Shape{4, 5}, rng);
    auto base = light_attention<double>(nullptr, q, k, v, &bias);
    TensorD shifted = bias;
    for (auto& b : shifted.data) b += 3.75;
    auto moved = light_attention<double>(nullptr, q, k, v, &shifted);
    for (size_t i = 0; i < base.data.size(); ++i)
        CHECK(std::abs(base.data[i] - moved.data[i]) < 1e-10);
}

TEST_CASE("attention probability rows are distributions") {
    // Feeding v = I makes the output the attention matrix itself.
    Rng rng(9);
    const int n = 6, m = 4;
    auto q = random_tensor(Shape{n, 3}, rng, -3, 3);
    auto k = random_tensor(Shape{m, 3}, rng, -3, 3);
    auto probe = identity_matrix(m);
    auto attn = light_attention<double>(nullptr, q, k, probe, nullptr);
    for (int i = 0; i < n; ++i) {
        double sum = 0;
        for (int j = 0; j < m; ++j) {
            CHECK(attn.at(i, j) >= 0.0);
            CHECK(attn.at(i, j) <= 1.0);
            sum += attn.at(i, j);
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("relative bias index is total and sized to the documented extent") {
    auto b = RelativeBiasIndex::build(4, 4, 2, 2, 2);
    CHECK(b.table_rows() == 2 * 4 - 1);
    CHECK(b.table_cols() == 2 * 2 - 1);
    CHECK(b.idx->size() == static_cast<size_t>(16 * 4));
    for (int v : *b.idx) {
        CHECK(v >= 0);
        CHECK(v < b.table_rows() * b.table_cols());
    }
}

TEST_CASE("lmhsa with one head and identity projection reduces to light_attention") {
    Rng rng(10);
    AttentionConfig cfg;
    cfg.dim = 4;
    cfg.heads = 1;
    cfg.kv_stride = 2;
    cfg.bias_enabled = false;
    ParamStoreD store;
    LmhsaParams<double> p(store, "attn", cfg, 4, 4, rng);
    // identity output projection
    std::fill(p.wo->value.data.begin(), p.wo->value.data.end(), 0.0);
    for (int i = 0; i < 4; ++i) p.wo->value.at(i, i) = 1.0;

    auto x = random_tensor(Shape{1, 16, 4}, rng);
    auto out = lmhsa<double>(nullptr, x, 4, 4, p);
    CHECK(out.shape == Shape{1, 16, 4});

    auto qkv = qkv_project<double>(nullptr, x, p.wq->value, p.wk->value, p.wv->value);
    auto red = reduce_kv<double>(nullptr, qkv[1], qkv[2], 4, 4, cfg, p.dwk_w->value,
                                 p.dwk_b->value, p.dwv_w->value, p.dwv_b->value);
    auto direct = light_attention<double>(nullptr, qkv[0], red.k, red.v, nullptr);
    for (size_t i = 0; i < out.data.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(direct.data[i]).epsilon(1e-12));
}

TEST_CASE("lmhsa output shape holds for any head count dividing dim") {
    Rng rng(11);
    for (int heads : {1, 2, 4}) {
        AttentionConfig cfg;
        cfg.dim = 8;
        cfg.heads = heads;
        cfg.kv_stride = 2;
        ParamStoreD store;
        LmhsaParams<double> p(store, "attn", cfg, 4, 4, rng);
        auto x = random_tensor(Shape{2, 16, 8}, rng);
        auto out = lmhsa<double>(nullptr, x, 4, 4, p);
        CHECK(out.shape == Shape{2, 16, 8});
    }
    AttentionConfig bad;
    bad.dim = 8;
    bad.heads = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("zero query/key weights give uniform attention over reduced values") {
    Rng rng(12);
    AttentionConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.kv_stride = 2;
    cfg.bias_enabled = true;  // table is zero-initialized, so B == 0
    ParamStoreD store;
    LmhsaParams<double> p(store, "attn", cfg, 4, 4, rng);
    std::fill(p.wq->value.data.begin(), p.wq->value.data.end(), 0.0);
    std::fill(p.wk->value.data.begin(), p.wk->value.data.end(), 0.0);

    auto x = random_tensor(Shape{1, 16, 4}, rng);
    auto out = lmhsa<double>(nullptr, x, 4, 4, p);

    auto qkv = qkv_project<double>(nullptr, x, p.wq->value, p.wk->value, p.wv->value);
    auto red = reduce_kv<double>(nullptr, qkv[1], qkv[2], 4, 4, cfg, p.dwk_w->value,
                                 p.dwk_b->value, p.dwv_w->value, p.dwv_b->value);
    const int nk = red.k.shape[1];
    TensorD mean_v(Shape{1, 16, 4});
    for (int t = 0; t < 16; ++t)
        for (int c = 0; c < 4; ++c) {
            double acc = 0;
            for (int j = 0; j < nk; ++j) acc += red.v.at(0, j, c);
            mean_v.at(0, t, c) = acc / nk;
        }
    auto want = linear<double>(nullptr, mean_v, p.wo->value,
                               static_cast<const TensorT<double>*>(nullptr));
    for (size_t i = 0; i < out.data.size(); ++i)
        CHECK(out.data[i] == doctest::Approx(want.data[i]).epsilon(1e-10));
}

TEST_CASE("lmhsa is permutation equivariant at stride 1 with delta reduction and zero bias") {
    Rng rng(13);
    AttentionConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.kv_stride = 1;
    cfg.bias_enabled = false;
    ParamStoreD store;
    LmhsaParams<double> p(store, "attn", cfg, 3, 3, rng);
    p.dwk_w->value = delta_depthwise(4);
    p.dwv_w->value = delta_depthwise(4);

    auto x = random_tensor(Shape{1, 9, 4}, rng);
    auto base = lmhsa<double>(nullptr, x, 3, 3, p);

    std::vector<int> perm = {4, 0, 7, 2, 8, 1, 3, 6, 5};
    TensorD px(Shape{1, 9, 4});
    for (int t = 0; t < 9; ++t)
        for (int c = 0; c < 4; ++c) px.at(0, t, c) = x.at(0, perm[static_cast<size_t>(t)], c);
    auto permuted = lmhsa<double>(nullptr, px, 3, 3, p);
    for (int t = 0; t < 9; ++t)
        for (int c = 0; c < 4; ++c)
            CHECK(permuted.at(0, t, c) ==
                  doctest::Approx(base.at(0, perm[static_cast<size_t>(t)], c)).epsilon(1e-10));
}

TEST_CASE("score matrix extent is n x n', never n x n, when stride > 1") {
    Rng rng(14);
    AttentionConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.kv_stride = 2;
    ParamStoreD store;
    LmhsaParams<double> p(store, "attn", cfg, 6, 6, rng);
    auto x = random_tensor(Shape{1, 36, 4}, rng);
    TapeD tape;
    store.bind(tape);
    tape.watch(x);
    (void)lmhsa<double>(&tape, x, 6, 6, p);
    auto shapes = tape.shapes_of("matmul_nt");
    REQUIRE(shapes.size() == 1);
    CHECK(shapes[0] == Shape{1, 2, 36, 9});  // n' = ceil(6/2)^2 = 9
}

TEST_CASE("lmhsa full-op gradient matches central differences") {
    Rng rng(15);
    AttentionConfig cfg;
    cfg.dim = 4;
    cfg.heads = 2;
    cfg.kv_stride = 2;
    ParamStoreD store;
    LmhsaParams<double> p(store, "attn", cfg, 4, 4, rng);
    auto x = random_tensor(Shape{1, 16, 4}, rng);

    auto build = [&](TapeD* tp) {
        if (tp) {
            store.bind(*tp);
            tp->watch(x);
        } else {
            store.unbind();
        }
        auto y = lmhsa<double>(tp, x, 4, 4, p);
        return sum_all<double>(tp, mul<double>(tp, y, y));
    };
    std::vector<WatchedTensor> watched{{"x", &x}};
    for (size_t i = 0; i < store.size(); ++i)
        watched.push_back({store.at(i).name, &store.at(i).value});
    auto res = grad_check(build, watched, 1e-5, 8);
    CHECK(res.max_rel_err < 1e-4);
}
