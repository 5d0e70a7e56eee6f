// Acceptance suite: runs every criterion at its stated tolerance and prints
// one [PASS]/[FAIL] line per criterion. Exit code 0 iff all pass.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <vector>

#include "fme/backbone.hpp"
#include "fme/cli.hpp"
#include "fme/data.hpp"
#include "fme/evalkit.hpp"
#include "fme/gradcheck_suite.hpp"
#include "fme/train.hpp"
#include "oracles.hpp"

using namespace fme;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& what, bool pass, const std::string& detail = "") {
    std::printf("[%s] criterion %d: %s%s%s\n", pass ? "PASS" : "FAIL", criterion, what.c_str(),
                detail.empty() ? "" : " -- ", detail.c_str());
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename T>
TensorT<T> random_tensor(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    TensorT<T> t(s);
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

fs::path work_dir() {
    auto p = fs::temp_directory_path() / "fme_acceptance";
    fs::create_directories(p);
    return p;
}

// -------------------------------------------------------------------------
// 1. kernel oracle suite

void criterion_1() {
    const auto start = Clock::now();
    Rng rng(0xACC1);
    double worst = 0;
    int shapes = 0;
    for (int trial = 0; trial < 56; ++trial) {
        const int kind = trial % 4;
        const int N = 1 + static_cast<int>(rng.below(2));
        if (kind == 0 || kind == 1) {
            const bool depthwise = kind == 1;
            const int Cin = 2 * (1 + static_cast<int>(rng.below(3)));
            const int groups = depthwise ? Cin : 1 + static_cast<int>(rng.below(2));
            const int Cout = depthwise ? Cin : groups * (1 + static_cast<int>(rng.below(3)));
            const int k = 1 + 2 * static_cast<int>(rng.below(2));
            const int H = k + static_cast<int>(rng.below(9));
            const int W = k + static_cast<int>(rng.below(9));
            const int stride = 1 + static_cast<int>(rng.below(2));
            const int pad = static_cast<int>(rng.below(2));
            auto x = random_tensor<float>(Shape{N, Cin, H, W}, rng);
            auto w = random_tensor<float>(Shape{Cout, Cin / groups, k, k}, rng);
            auto b = random_tensor<float>(Shape{Cout}, rng);
            auto got = conv2d<float>(nullptr, x, w, &b, stride, pad, groups);
            auto want = oracle::conv2d_ref<float>(x, w, &b.data, stride, pad, groups);
            worst = std::max(worst, oracle::max_rel_err(got.data, want.data));
            // wide-output small-map variant exercises the channels-innermost
            // kernel path; verified on the 64-bit route at 1e-12
            if (!depthwise && trial % 3 == 0) {
                auto xd = random_tensor<double>(Shape{1, Cin, H, W}, rng);
                auto wd = random_tensor<double>(Shape{16 * groups, Cin / groups, k, k}, rng);
                auto got_d = conv2d<double>(nullptr, xd, wd, nullptr, stride, pad, groups);
                auto want_d = oracle::conv2d_ref<double>(
                    xd, wd, static_cast<const std::vector<double>*>(nullptr), stride, pad, groups);
                if (oracle::max_rel_err(got_d.data, want_d.data) > 1e-12) worst = 1.0;
            }
        } else {
            const int C = 1 + static_cast<int>(rng.below(3));
            const int window = 2 + static_cast<int>(rng.below(2));
            const int H = window + static_cast<int>(rng.below(8));
            const int W = window + static_cast<int>(rng.below(8));
            const int stride = 1 + static_cast<int>(rng.below(2));
            auto x = random_tensor<float>(Shape{N, C, H, W}, rng);
            if (kind == 2) {
                auto got = max_pool2d<float>(nullptr, x, window, stride);
                auto want = oracle::max_pool2d_ref(x, window, stride);
                worst = std::max(worst, oracle::max_rel_err(got.data, want.data));
            } else {
                auto got = avg_pool2d<float>(nullptr, x, window, stride);
                auto want = oracle::avg_pool2d_ref(x, window, stride);
                worst = std::max(worst, oracle::max_rel_err(got.data, want.data));
            }
        }
        ++shapes;
    }
    const double elapsed = seconds_since(start);
    char detail[160];
    std::snprintf(detail, sizeof(detail), "%d shapes, max rel err %.2e, %.1fs", shapes, worst,
                  elapsed);
    report(1, "kernel oracle suite (conv/depthwise/pool vs nested loops, <=1e-6)",
           shapes >= 50 && worst <= 1e-6 && elapsed < 30.0, detail);
}

// -------------------------------------------------------------------------
// 2. gradient suite

void criterion_2() {
    const auto start = Clock::now();
    auto results = check::run_suite();
    bool all_pass = !results.empty();
    double worst = 0;
    std::string failing;
    bool saw_e2e = false;
    for (const auto& r : results) {
        worst = std::max(worst, r.max_rel_err);
        all_pass = all_pass && r.pass;
        if (!r.pass) failing += " " + r.name;
        if (r.name == "end_to_end") saw_e2e = true;
    }
    const double elapsed = seconds_since(start);
    char detail[200];
    std::snprintf(detail, sizeof(detail), "%zu layers, worst %.2e, %.1fs%s%s", results.size(),
                  worst, elapsed, failing.empty() ? "" : ", failing:", failing.c_str());
    report(2, "gradient suite (64-bit central differences, <1e-4 per layer, <5e-4 end-to-end)",
           all_pass && saw_e2e && elapsed < 300.0, detail);
}

// -------------------------------------------------------------------------
// 3. shape contract

void criterion_3() {
    bool ok = true;
    std::string detail;
    try {
        Model paper(ModelConfig::paper_preset(), 1);
        Rng r0(0);
        Tensor image(Shape{1, 1, 224, 224});
        Rng fill(2);
        for (auto& v : image.data) v = static_cast<float>(fill.uniform());
        ForwardTrace<float> trace;
        auto out = paper.forward(nullptr, image, Mode::eval, r0, &trace);
        const int want_dims[4] = {64, 128, 256, 512};
        const int want_extent[4] = {56, 28, 14, 7};
        for (int i = 0; i < 4; ++i)
            ok = ok && trace.stage_maps[static_cast<size_t>(i)].shape ==
                           Shape{1, want_dims[i], want_extent[i], want_extent[i]};
        ok = ok && trace.residual_map.shape == Shape{1, 256, 7, 7};
        ok = ok && trace.fused.shape == Shape{1, 768, 7, 7};
        ok = ok && out.logits.shape == Shape{1, 4};

        Model desk(ModelConfig::desk_preset(), 1);
        Tensor small(Shape{1, 1, 64, 64});
        for (auto& v : small.data) v = static_cast<float>(fill.uniform());
        ForwardTrace<float> dtrace;
        auto dout = desk.forward(nullptr, small, Mode::eval, r0, &dtrace);
        for (int i = 0; i < 4; ++i) {
            const int extent = 64 >> (i + 2);
            ok = ok && dtrace.stage_maps[static_cast<size_t>(i)].shape[2] == extent &&
                 dtrace.stage_maps[static_cast<size_t>(i)].shape[3] == extent;
        }
        ok = ok && dtrace.fused.shape[2] == 2 && dout.logits.shape == Shape{1, 4};
        detail = "paper: 64@56^2 128@28^2 256@14^2 512@7^2, residual 256@7^2, fused 768@7^2; "
                 "desk obeys /2 per stage";
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(3, "shape contract for presets paper and desk", ok, detail);
}

// -------------------------------------------------------------------------
// 4. identity / degeneracy suite

void criterion_4() {
    bool ok = true;
    std::string detail;
    try {
        Rng rng(0xACC4);
        // residual blocks with a dead main path equal relu(identity), bit-exact
        {
            ParamStoreD store;
            ResidualBlockM<double> m(store, "m", 3, 3, 1, rng);
            for (auto* p : {m.pw.w, m.pw.b, m.conv.w, m.conv.b, m.shortcut.w, m.shortcut.b})
                std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
            for (int c = 0; c < 3; ++c) m.shortcut.w->value.at(c, c, 0, 0) = 1.0;
            ResidualBlockN<double> n(store, "n", 3, rng);
            for (auto* p : {n.conv1.w, n.conv1.b, n.conv2.w, n.conv2.b})
                std::fill(p->value.data.begin(), p->value.data.end(), 0.0);
            auto x = random_tensor<double>(Shape{1, 3, 5, 5}, rng);
            auto want = relu<double>(nullptr, x);
            ok = ok && m.forward(nullptr, x).data == want.data;
            ok = ok && n.forward(nullptr, x).data == want.data;
        }
        // LPU zero-weight identity
        {
            auto x = random_tensor<double>(Shape{1, 4, 5, 5}, rng);
            TensorD w(Shape{4, 1, 3, 3}, 0.0), b(Shape{4}, 0.0);
            ok = ok && lpu<double>(nullptr, x, w, b).data == x.data;
        }
        // IRFFN zero projection weights: op contributes exactly zero and the
        // CMT block reduces to a bit-exact skip
        {
            CmtBlockConfig cfg;
            cfg.dim = 4;
            cfg.heads = 2;
            cfg.irffn_ratio = 2;
            ParamStoreD store;
            CmtBlockParams<double> p(store, "block", cfg, 4, 4, rng);
            for (auto* par : {p.ffn.project_w, p.ffn.project_b})
                std::fill(par->value.data.begin(), par->value.data.end(), 0.0);
            auto tokens = random_tensor<double>(Shape{1, 16, 4}, rng);
            auto ffn_out = irffn<double>(nullptr, tokens, 4, 4, p.ffn);
            bool all_zero = true;
            for (double v : ffn_out.data) all_zero = all_zero && v == 0.0;
            ok = ok && all_zero;

            for (auto* par : {p.lpu_w, p.lpu_b, p.attn.wv})
                std::fill(par->value.data.begin(), par->value.data.end(), 0.0);
            ok = ok && cmt_block<double>(nullptr, tokens, 4, 4, p).data == tokens.data;
        }
        // softmax rows sum to one, extreme logits included
        {
            auto x = random_tensor<float>(Shape{6, 9}, rng, -1e4, 1e4);
            auto y = softmax<float>(nullptr, x, 1);
            for (int r = 0; r < 6; ++r) {
                double sum = 0;
                for (int k = 0; k < 9; ++k) sum += y.at(r, k);
                ok = ok && std::abs(sum - 1.0) < 1e-6;
            }
        }
        // pixel-attention gate in (0,1) and saturated passthrough
        {
            ParamStoreD store;
            PixelAttentionParams<double> p(store, "pa", 8, rng);
            auto boosted = random_tensor<double>(Shape{1, 8, 4, 4}, rng);
            auto out = pixel_attention<double>(nullptr, boosted, p);
            for (double g : out.gate.data) ok = ok && g > 0.0 && g < 1.0;
            p.f_b->value.data[0] = 40.0;
            auto open = pixel_attention<double>(nullptr, boosted, p);
            for (size_t i = 0; i < boosted.data.size(); ++i)
                ok = ok && std::abs(open.gated.data[i] - boosted.data[i]) < 1e-6;
        }
        detail = "residual T=0, LPU/IRFFN zero-weight, softmax rows, pixel gate";
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(4, "identity and degeneracy suite", ok, detail);
}

// -------------------------------------------------------------------------
// 5. metrics oracle

void criterion_5() {
    bool ok = true;
    std::string detail;
    try {
        Rng rng(0xACC5);
        for (int trial = 0; trial < 100 && ok; ++trial) {
            const int K = 2 + static_cast<int>(rng.below(4));
            const int n = 20 + static_cast<int>(rng.below(200));
            std::vector<int> labels(static_cast<size_t>(n)), preds(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                labels[static_cast<size_t>(i)] = static_cast<int>(rng.below(K));
                preds[static_cast<size_t>(i)] = static_cast<int>(rng.below(K));
            }
            auto cm = eval::confusion(labels, preds, K);
            auto got = eval::metrics(cm);

            // independent counting oracle straight from the label/pred lists
            std::int64_t agree = 0;
            for (int i = 0; i < n; ++i)
                if (labels[static_cast<size_t>(i)] == preds[static_cast<size_t>(i)]) ++agree;
            const double acc = 100.0 * (static_cast<double>(agree) / static_cast<double>(n));
            if (got.overall_acc != acc) ok = false;
            for (int c = 0; c < K && ok; ++c) {
                std::int64_t tp = 0, fp = 0, fn = 0;
                for (int i = 0; i < n; ++i) {
                    const bool is_true = labels[static_cast<size_t>(i)] == c;
                    const bool is_pred = preds[static_cast<size_t>(i)] == c;
                    if (is_true && is_pred) ++tp;
                    if (!is_true && is_pred) ++fp;
                    if (is_true && !is_pred) ++fn;
                }
                const auto& m = got.per_class[static_cast<size_t>(c)];
                if (m.tp != tp || m.fp != fp || m.fn != fn) ok = false;
                const double sen =
                    (tp + fn) ? 100.0 * (static_cast<double>(tp) / static_cast<double>(tp + fn))
                              : 0.0;
                const double pre =
                    (tp + fp) ? 100.0 * (static_cast<double>(tp) / static_cast<double>(tp + fp))
                              : 0.0;
                if (m.sen != sen || m.pre != pre) ok = false;
                const double f1 = (pre + sen) > 0 ? 2.0 * pre * sen / (pre + sen) : 0.0;
                if (m.f1 != f1) ok = false;
            }
        }
        // Table 2 consistency spot checks
        ok = ok && std::abs(eval::f1_percent(98.60, 98.50) - 98.55) < 0.01;
        ok = ok && std::abs(eval::f1_percent(94.81, 94.52) - 94.67) < 0.01;
        // confidence interval against direct evaluation of its closed form
        Rng crng(17);
        for (int i = 0; i < 50; ++i) {
            const double err = crng.uniform();
            const auto n = static_cast<std::int64_t>(1 + crng.below(5000));
            const double direct = 1.96 * std::sqrt(err * (1 - err) / static_cast<double>(n));
            if (std::abs(eval::confidence_interval(err, n) - direct) > 1e-9) ok = false;
        }
        detail = "100 random confusion matrices exact, F1(98.60,98.50)=98.55, "
                 "F1(94.81,94.52)=94.67, CI closed form";
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(5, "metrics oracle (counting oracle exact, table spot checks, CI)", ok, detail);
}

// -------------------------------------------------------------------------
// 6. AUC oracle

void criterion_6() {
    bool ok = true;
    std::string detail;
    try {
        Rng rng(0xACC6);
        double worst = 0;
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 50 + static_cast<int>(rng.below(150));
            std::vector<double> scores(static_cast<size_t>(n));
            std::vector<bool> positive(static_cast<size_t>(n));
            for (int i = 0; i < n; ++i) {
                scores[static_cast<size_t>(i)] = std::floor(rng.uniform() * 40) / 40.0;
                positive[static_cast<size_t>(i)] = rng.uniform() < 0.4;
            }
            positive[0] = true;
            positive[1] = false;
            auto out = eval::roc_pr(scores, positive);
            double wins = 0, ties = 0;
            std::int64_t pairs = 0;
            for (int i = 0; i < n; ++i) {
                if (!positive[static_cast<size_t>(i)]) continue;
                for (int j = 0; j < n; ++j) {
                    if (positive[static_cast<size_t>(j)]) continue;
                    ++pairs;
                    if (scores[static_cast<size_t>(i)] > scores[static_cast<size_t>(j)])
                        wins += 1;
                    else if (scores[static_cast<size_t>(i)] == scores[static_cast<size_t>(j)])
                        ties += 1;
                }
            }
            worst = std::max(worst,
                             std::abs(out.auc_roc - (wins + 0.5 * ties) / static_cast<double>(pairs)));
        }
        ok = ok && worst < 1e-9;

        std::vector<double> s = {0.9, 0.8, 0.2, 0.1};
        auto perfect = eval::roc_pr(s, {true, true, false, false});
        auto anti = eval::roc_pr(s, {false, false, true, true});
        ok = ok && perfect.auc_roc == 1.0 && anti.auc_roc == 0.0;
        char buf[100];
        std::snprintf(buf, sizeof(buf), "20 score sets, worst |diff| %.2e; corners exact", worst);
        detail = buf;
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(6, "AUC oracle (trapezoid vs pairwise rank statistic, 1e-9)", ok, detail);
}

// -------------------------------------------------------------------------
// 7. desk-scale training smoke

void criterion_7() {
    bool ok = true;
    std::string detail;
    try {
        const auto start = Clock::now();
        const auto base = work_dir() / "desk_smoke";
        fs::remove_all(base);
        const auto out1 = base / "run1";
        const auto out2 = base / "run2";
        const std::vector<std::string> cmd1 = {"train", "--preset", "desk",  "--synthetic", "100",
                                               "--epochs", "20",  "--seed", "7", "--out",
                                               out1.string()};
        ok = cli::run(cmd1) == 0;
        const double first_run_seconds = seconds_since(start);

        double best_val = 0;
        std::vector<double> train_losses;
        {
            std::ifstream hist(out1 / "history.csv");
            std::string line;
            std::getline(hist, line);  // header
            while (std::getline(hist, line)) {
                if (line.empty()) continue;
                std::stringstream ss(line);
                std::string cell;
                std::vector<double> row;
                while (std::getline(ss, cell, ',')) row.push_back(std::stod(cell));
                train_losses.push_back(row[2]);
                best_val = std::max(best_val, row[4]);
            }
        }
        ok = ok && train_losses.size() == 20;
        for (size_t e = 1; e < 5 && e < train_losses.size(); ++e)
            ok = ok && train_losses[e] < train_losses[e - 1];
        ok = ok && best_val >= 0.95;
        ok = ok && first_run_seconds < 900.0;

        const std::vector<std::string> cmd2 = {"train", "--preset", "desk",  "--synthetic", "100",
                                               "--epochs", "20",  "--seed", "7", "--out",
                                               out2.string()};
        ok = ok && cli::run(cmd2) == 0;
        ok = ok && slurp(out1 / "history.csv") == slurp(out2 / "history.csv");

        char buf[200];
        std::snprintf(buf, sizeof(buf),
                      "best val acc %.3f, losses e0..e4 strictly decreasing, %.0fs/run, "
                      "history.csv bit-identical",
                      best_val, first_run_seconds);
        detail = buf;
        fs::remove_all(base);
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(7, "desk-scale training smoke (>=95% val acc in 20 epochs, <15 min, reproducible)", ok,
           detail);
}

// -------------------------------------------------------------------------
// 8. persistence

void criterion_8() {
    bool ok = true;
    std::string detail;
    try {
        const auto base = work_dir() / "persistence";
        fs::remove_all(base);
        fs::create_directories(base);

        ModelConfig micro;
        micro.input_size = 32;
        micro.stage_dims = {8, 16, 32, 64};
        micro.stage_depths = {1, 1, 1, 1};
        micro.stage_heads = {1, 2, 2, 4};
        micro.irffn_ratio = 2;
        micro.residual_dims = {8, 16, 24, 32};

        auto samples = data::synth_generate(25, 32, 3);
        auto parts = data::split(samples, 0.7, 0.1, 0.2, 3);
        train::TrainConfig cfg;
        cfg.epochs = 4;
        cfg.seed = 5;

        // roundtrip: save -> load reproduces forward outputs bit-exactly
        Model trained(micro, 41);
        train::fit(trained, parts, cfg);
        train::TrainState state;
        train::save_checkpoint(trained, cfg, &state, (base / "ck").string());
        Model restored(micro, 17);
        train::load_checkpoint((base / "ck").string(), restored, nullptr);
        Rng r0(0);
        Tensor batch(Shape{3, 1, 32, 32});
        Rng fill(9);
        for (auto& v : batch.data) v = static_cast<float>(fill.uniform());
        auto fa = trained.forward(nullptr, batch, Mode::eval, r0);
        auto fb = restored.forward(nullptr, batch, Mode::eval, r0);
        ok = ok && fa.logits.data == fb.logits.data;

        // resume at epoch 2 matches the uninterrupted epoch-4 state
        Model solid(micro, 41);
        train::fit(solid, parts, cfg);
        Model half(micro, 41);
        auto cfg2 = cfg;
        cfg2.epochs = 2;
        train::FitOptions opts;
        opts.checkpoint_dir = (base / "resume").string();
        train::TrainState st;
        train::fit(half, parts, cfg2, opts, &st);
        Model resumed(micro, 1);
        train::TrainState st2;
        train::load_checkpoint((base / "resume" / "last").string(), resumed, &st2);
        train::fit(resumed, parts, cfg, {}, &st2);
        for (size_t i = 0; i < solid.params().size() && ok; ++i)
            ok = resumed.params().at(i).value.data == solid.params().at(i).value.data;

        detail = "save/load forward bit-exact; resume(2)+2 == uninterrupted 4 epochs";
        fs::remove_all(base);
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(8, "persistence (checkpoint roundtrip and bit-exact resume)", ok, detail);
}

// -------------------------------------------------------------------------
// 9. dataset-layout dry run

void criterion_9() {
    bool ok = true;
    std::string detail;
    try {
        const auto base = work_dir() / "dry_run";
        fs::remove_all(base);
        const auto dataset = base / "dataset";
        ok = cli::run({"synth", "--n", "16", "--size", "64", "--seed", "21", "--out",
                       dataset.string()}) == 0;

        // micro-ish run against the on-disk layout; no accuracy asserted
        const auto train_out = base / "train";
        ok = ok && cli::run({"train", "--preset", "desk", "--data", dataset.string(), "--epochs",
                             "2", "--seed", "21", "--out", train_out.string()}) == 0;
        const auto ckpt = (train_out / "ckpt" / "last").string();
        const auto eval_out = base / "eval";
        ok = ok && cli::run({"eval", "--checkpoint", ckpt, "--data", dataset.string(), "--out",
                             eval_out.string()}) == 0;
        const auto feat_out = base / "features";
        ok = ok && cli::run({"features", "--checkpoint", ckpt, "--data", dataset.string(), "--out",
                             feat_out.string()}) == 0;

        for (const auto& must : {eval_out / "confusion.csv", eval_out / "metrics.json",
                                 eval_out / "roc_checker.csv", eval_out / "pr_ring.csv",
                                 feat_out / "pca.csv", feat_out / "pca.svg"})
            ok = ok && fs::exists(must);
        detail = "synth -> train -> eval -> features emitted all reports";
        fs::remove_all(base);
    } catch (const std::exception& e) {
        ok = false;
        detail = e.what();
    }
    report(9, "dataset-layout dry run (train/eval/features emit reports)", ok, detail);
}

}  // namespace

int main() {
    std::printf("acceptance suite\n");
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    std::printf("%s (%d failing)\n", g_failures == 0 ? "ALL CRITERIA PASS" : "FAILURES PRESENT",
                g_failures);
    return g_failures == 0 ? 0 : 1;
}
