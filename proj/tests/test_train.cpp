#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "fme/train.hpp"

using namespace fme;
using namespace fme::train;
namespace fs = std::filesystem;

namespace {

ModelConfig micro_config() {
    ModelConfig c;
    c.input_size = 32;
    c.stage_dims = {8, 16, 32, 64};
    c.stage_depths = {1, 1, 1, 1};
    c.stage_heads = {1, 2, 2, 4};
    c.irffn_ratio = 2;
    c.residual_dims = {8, 16, 24, 32};
    return c;
}

data::DatasetSplit micro_split(std::uint64_t seed = 3) {
    auto samples = data::synth_generate(25, 32, seed);
    return data::split(samples, 0.7, 0.1, 0.2, seed);
}

TrainConfig micro_train(int epochs, std::uint64_t seed = 5) {
    TrainConfig t;
    t.epochs = epochs;
    t.seed = seed;
    t.batch_size = 16;
    return t;
}

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("fme_train_test_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("lr schedule steps by the decay factor every decay_every epochs") {
    TrainConfig cfg;
    for (int e = 0; e < 20; ++e) CHECK(lr_at(e, cfg) == doctest::Approx(1e-3).epsilon(1e-12));
    CHECK(lr_at(20, cfg) == doctest::Approx(8.5e-4).epsilon(1e-12));
    CHECK(lr_at(39, cfg) == doctest::Approx(8.5e-4).epsilon(1e-12));
    CHECK(lr_at(40, cfg) == doctest::Approx(7.225e-4).epsilon(1e-12));
    double prev = lr_at(0, cfg);
    for (int e = 1; e < 100; ++e) {
        CHECK(lr_at(e, cfg) <= prev + 1e-15);
        prev = lr_at(e, cfg);
    }
}

TEST_CASE("adam leaves parameters untouched on zero gradients without decay") {
    Rng rng(1);
    ParamStore store;
    auto* w = store.create("layer.w", Shape{4, 4}, Init::he_normal, rng, true);
    auto* b = store.create("layer.b", Shape{4}, Init::zeros, rng);
    w->value.ensure_grad();
    b->value.ensure_grad();
    const auto w_before = w->value.data;
    AdamState st;
    adam_step(store, st, 1e-3, 0.0);
    CHECK(w->value.data == w_before);
}

TEST_CASE("adam converges on the scalar quadratic") {
    Rng rng(2);
    ParamStore store;
    auto* w = store.create("w", Shape{1}, Init::zeros, rng, true);
    AdamState st;
    for (int step = 0; step < 2000; ++step) {
        w->value.ensure_grad();
        w->value.grad[0] = w->value.data[0] - 3.0f;  // d/dw of (w-3)^2/2
        adam_step(store, st, 1e-2, 0.0);
    }
    CHECK(std::abs(w->value.data[0] - 3.0f) < 1e-3);
}

TEST_CASE("decoupled weight decay scales decayable weights by the closed form") {
    Rng rng(3);
    ParamStore store;
    auto* w = store.create("conv.w", Shape{3, 3}, Init::he_normal, rng, true);
    auto* b = store.create("conv.b", Shape{3}, Init::ones, rng);
    auto* ln = store.create("ln.gamma", Shape{3}, Init::ones, rng);
    const auto w0 = w->value.data;
    const auto b0 = b->value.data;
    const auto ln0 = ln->value.data;
    AdamState st;
    const double lr = 1e-2, wd = 0.04;
    const int steps = 5;
    for (int i = 0; i < steps; ++i) {
        for (auto* p : {w, b, ln}) {
            p->value.ensure_grad();
            p->value.zero_grad();
        }
        adam_step(store, st, lr, wd);
    }
    const float factor = std::pow(1.0f - static_cast<float>(lr * wd), steps);
    for (size_t i = 0; i < w0.size(); ++i)
        CHECK(w->value.data[i] == doctest::Approx(w0[i] * factor).epsilon(1e-6));
    CHECK(b->value.data == b0);    // biases excluded
    CHECK(ln->value.data == ln0);  // layer-norm affine excluded
}

TEST_CASE("weight decay never touches excluded parameter classes in a real model") {
    Model model(micro_config(), 7);
    auto& store = model.params();
    std::vector<std::vector<float>> before;
    for (size_t i = 0; i < store.size(); ++i) {
        before.push_back(store.at(i).value.data);
        store.at(i).value.ensure_grad();
        store.at(i).value.zero_grad();
    }
    AdamState st;
    adam_step(store, st, 1e-2, 0.04);
    for (size_t i = 0; i < store.size(); ++i) {
        const auto& p = store.at(i);
        const bool changed = p.value.data != before[i];
        CHECK(changed == p.decay);
        // biases, layer-norm affine and bias tables are never decayed
        const bool excluded = p.name.ends_with(".b") || p.name.ends_with("gamma") ||
                              p.name.ends_with("beta") || p.name.ends_with("bias_table") ||
                              p.name.ends_with("b_sa");
        if (excluded) CHECK(!p.decay);
        if (p.decay) CHECK(!excluded);
    }
}

TEST_CASE("zero-epoch fit leaves an empty history and an initial checkpoint") {
    auto dir = temp_dir("zero_epochs");
    Model model(micro_config(), 11);
    auto split = micro_split();
    FitOptions opts;
    opts.checkpoint_dir = dir.string();
    auto history = fit(model, split, micro_train(0), opts);
    CHECK(history.empty());
    CHECK(fs::exists(dir / "last" / "manifest.json"));
    CHECK(fs::exists(dir / "last" / "params.bin"));
    CHECK(!fs::exists(dir / "best"));
    fs::remove_all(dir);
}

TEST_CASE("training on the synthetic set reduces the loss and repeats bit-identically") {
    auto split = micro_split();
    const auto cfg = micro_train(4);

    Model a(micro_config(), 13);
    auto ha = fit(a, split, cfg);
    REQUIRE(ha.size() == 4);
    CHECK(ha.back().train_loss < ha.front().train_loss);
    for (const auto& e : ha) CHECK(std::isfinite(e.train_loss));

    Model b(micro_config(), 13);
    auto hb = fit(b, split, cfg);
    REQUIRE(hb.size() == ha.size());
    for (size_t i = 0; i < ha.size(); ++i) {
        CHECK(ha[i].train_loss == hb[i].train_loss);
        CHECK(ha[i].val_loss == hb[i].val_loss);
        CHECK(ha[i].val_acc == hb[i].val_acc);
    }
    for (size_t i = 0; i < a.params().size(); ++i)
        CHECK(a.params().at(i).value.data == b.params().at(i).value.data);
}

TEST_CASE("checkpoint roundtrip restores forward outputs bit-exactly") {
    auto dir = temp_dir("roundtrip");
    Model trained(micro_config(), 17);
    auto split = micro_split();
    fit(trained, split, micro_train(1));
    TrainState state;
    save_checkpoint(trained, micro_train(1), &state, dir.string());

    Model restored(micro_config(), 999);  // different init, then overwritten
    load_checkpoint(dir.string(), restored, nullptr);

    Rng r0(0);
    Tensor batch(Shape{2, 1, 32, 32});
    Rng fill(21);
    for (auto& v : batch.data) v = static_cast<float>(fill.uniform());
    auto fa = trained.forward(nullptr, batch, Mode::eval, r0);
    auto fb = restored.forward(nullptr, batch, Mode::eval, r0);
    CHECK(fa.logits.data == fb.logits.data);
    fs::remove_all(dir);
}

TEST_CASE("corrupt checkpoints are rejected with the offending entry") {
    auto dir = temp_dir("corrupt");
    Model model(micro_config(), 19);
    save_checkpoint(model, micro_train(0), nullptr, dir.string());

    // truncate the blob
    const auto blob_path = dir / "params.bin";
    const auto full = fs::file_size(blob_path);
    fs::resize_file(blob_path, full / 2);
    Model target(micro_config(), 23);
    CHECK_THROWS_AS(load_checkpoint(dir.string(), target, nullptr), CheckpointError);

    // config mismatch
    save_checkpoint(model, micro_train(0), nullptr, dir.string());
    ModelConfig other = micro_config();
    other.stage_depths = {2, 1, 1, 1};
    Model wrong(other, 23);
    CHECK_THROWS_AS(load_checkpoint(dir.string(), wrong, nullptr), CheckpointError);

    // unsupported format version
    {
        std::ifstream in(dir / "manifest.json");
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        auto pos = text.find("\"format_version\": 1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, std::string("\"format_version\": 1").size(), "\"format_version\": 99");
        std::ofstream(dir / "manifest.json") << text;
    }
    Model target2(micro_config(), 23);
    CHECK_THROWS_AS(load_checkpoint(dir.string(), target2, nullptr), CheckpointError);
    fs::remove_all(dir);
}

TEST_CASE("resumed training matches the uninterrupted run") {
    auto dir = temp_dir("resume");
    auto split = micro_split();
    const auto cfg4 = micro_train(4, 29);

    Model solid(micro_config(), 29);
    auto h_solid = fit(solid, split, cfg4);

    Model first(micro_config(), 29);
    FitOptions opts;
    opts.checkpoint_dir = dir.string();
    TrainState st;
    auto cfg2 = cfg4;
    cfg2.epochs = 2;
    fit(first, split, cfg2, opts, &st);

    Model resumed(micro_config(), 31);
    TrainState st2;
    load_checkpoint((dir / "last").string(), resumed, &st2);
    CHECK(st2.next_epoch == 2);
    auto h_resumed = fit(resumed, split, cfg4, {}, &st2);

    REQUIRE(h_resumed.size() == h_solid.size());
    for (size_t i = 0; i < h_solid.size(); ++i) {
        CHECK(h_resumed[i].train_loss == h_solid[i].train_loss);
        CHECK(h_resumed[i].val_acc == h_solid[i].val_acc);
    }
    for (size_t i = 0; i < solid.params().size(); ++i)
        CHECK(resumed.params().at(i).value.data == solid.params().at(i).value.data);
    fs::remove_all(dir);
}

TEST_CASE("import hook reports matched, missing and extra paths") {
    auto dir = temp_dir("import");
    Model source(micro_config(), 37);
    save_checkpoint(source, micro_train(0), nullptr, dir.string());

    Model same(micro_config(), 41);
    auto report = import_weights(same, dir.string());
    CHECK(report.matched.size() == same.params().size());
    CHECK(report.missing.empty());
    CHECK(report.extra.empty());
    CHECK(report.mismatched.empty());
    auto* w = same.params().find("stem.conv0.w");
    auto* src = source.params().find("stem.conv0.w");
    REQUIRE(w);
    REQUIRE(src);
    CHECK(w->value.data == src->value.data);

    ModelConfig deeper = micro_config();
    deeper.stage_depths = {2, 1, 1, 1};
    deeper.stage_dims = {8, 16, 32, 128};
    deeper.stage_heads = {1, 2, 2, 4};
    Model other(deeper, 43);
    auto partial = import_weights(other, dir.string());
    CHECK(!partial.matched.empty());
    CHECK(!partial.missing.empty());     // stage0.block1.* has no checkpoint entry
    CHECK(!partial.mismatched.empty());  // stage3 widths differ
    fs::remove_all(dir);
}

TEST_CASE("history csv carries the documented header and one row per epoch") {
    auto dir = temp_dir("csv");
    History h;
    h.push_back({0, 1e-3, 1.5, 1.4, 0.25});
    h.push_back({1, 1e-3, 1.2, 1.1, 0.5});
    const auto path = (dir / "history.csv").string();
    write_history_csv(h, path);
    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    CHECK(line == "epoch,lr,train_loss,val_loss,val_acc");
    int rows = 0;
    while (std::getline(in, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 2);
    fs::remove_all(dir);
}

TEST_CASE("a non-finite forward aborts with epoch and batch diagnostics") {
    Model model(micro_config(), 47);
    model.params().find("stem.conv0.w")->value.data[0] = std::numeric_limits<float>::quiet_NaN();
    auto split = micro_split();
    try {
        fit(model, split, micro_train(1));
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("epoch 0") != std::string::npos);
        CHECK(msg.find("batch 0") != std::string::npos);
    }
}

TEST_CASE("threaded inference equals the serial result bit-exactly") {
    Model model(micro_config(), 53);
    auto samples = data::synth_generate(12, 32, 7);
    auto serial = infer(model, samples, 8, 1);
    auto threaded = infer(model, samples, 8, 3);
    CHECK(serial.probs.data == threaded.probs.data);
    CHECK(serial.penultimate.data == threaded.penultimate.data);
    CHECK(serial.predictions == threaded.predictions);
}
