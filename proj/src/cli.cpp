#include "fme/cli.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "fme/config_json.hpp"
#include "fme/data.hpp"
#include "fme/evalkit.hpp"
#include "fme/gradcheck_suite.hpp"
#include "fme/svg.hpp"
#include "fme/train.hpp"

namespace fs = std::filesystem;

namespace fme::cli {

namespace {

constexpr const char* kVersion = "fme 0.1.0";

constexpr int kExitOk = 0;
constexpr int kExitVerification = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNumeric = 3;

const char* kPalette[8] = {"#1f77b4", "#2ca02c", "#d62728", "#9467bd",
                           "#ff7f0e", "#8c564b", "#e377c2", "#17becf"};

struct RunConfig {
    std::string preset = "paper";
    ModelConfig model = ModelConfig::paper_preset();
    train::TrainConfig train;
    std::string data_dir;
    int synthetic = 0;  // samples per class; 0 = use data_dir
    std::string out_dir = "runs/out";
    std::uint64_t seed = 0;
    int threads = 1;
    bool force = false;
    bool balance = true;
    std::string import_dir;
    std::string checkpoint;
    std::string eval_split = "test";
};

void apply_preset(RunConfig& rc, const std::string& preset) {
    if (preset == "paper")
        rc.model = ModelConfig::paper_preset();
    else if (preset == "desk")
        rc.model = ModelConfig::desk_preset();
    else
        throw ConfigError("unknown preset '" + preset + "' (expected paper|desk)");
    rc.preset = preset;
}

void apply_config_file(RunConfig& rc, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    if (j.contains("preset")) apply_preset(rc, j["preset"].get<std::string>());
    try {
        if (j.contains("model")) j["model"].get_to(rc.model);
        if (j.contains("train")) j["train"].get_to(rc.train);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path + ": " + e.what());
    }
    if (j.contains("data")) rc.data_dir = j["data"].get<std::string>();
    if (j.contains("synthetic")) rc.synthetic = j["synthetic"].get<int>();
    if (j.contains("out")) rc.out_dir = j["out"].get<std::string>();
    if (j.contains("seed"))
        rc.seed = j["seed"].get<std::uint64_t>();
    else if (j.contains("train") && j["train"].contains("seed"))
        rc.seed = j["train"]["seed"].get<std::uint64_t>();
    if (j.contains("threads")) rc.threads = j["threads"].get<int>();
    if (j.contains("balance")) rc.balance = j["balance"].get<bool>();
}

nlohmann::json resolved_json(const RunConfig& rc, const std::string& command) {
    nlohmann::json j;
    j["version"] = kVersion;
    j["command"] = command;
    j["preset"] = rc.preset;
    j["model"] = rc.model;
    j["train"] = rc.train;
    j["data"] = rc.data_dir;
    j["synthetic"] = rc.synthetic;
    j["out"] = rc.out_dir;
    j["seed"] = rc.seed;
    j["threads"] = rc.threads;
    j["balance"] = rc.balance;
    j["completed"] = false;
    return j;
}

// Creates the output directory and writes the provenance record. Refuses to
// clobber a completed run unless --force.
void open_run_dir(const RunConfig& rc, const std::string& command) {
    const auto run_json = fs::path(rc.out_dir) / "run.json";
    if (fs::exists(run_json) && !rc.force) {
        std::ifstream in(run_json);
        nlohmann::json prior;
        try {
            in >> prior;
        } catch (...) {
            prior = {};
        }
        if (prior.value("completed", false))
            throw ConfigError("output directory " + rc.out_dir +
                              " holds a completed run; pass --force to overwrite");
    }
    fs::create_directories(rc.out_dir);
    std::ofstream out(run_json);
    if (!out) throw ConfigError("cannot write " + run_json.string());
    out << resolved_json(rc, command).dump(2) << "\n";
}

void close_run_dir(const RunConfig& rc, const std::string& command) {
    auto j = resolved_json(rc, command);
    j["completed"] = true;
    std::ofstream out(fs::path(rc.out_dir) / "run.json");
    out << j.dump(2) << "\n";
}

struct LoadedData {
    std::vector<data::Sample> samples;
    std::vector<std::string> class_names;
};

LoadedData gather_dataset(const RunConfig& rc) {
    LoadedData out;
    if (rc.synthetic > 0) {
        out.samples = data::synth_generate(rc.synthetic, rc.model.input_size, rc.seed);
        out.class_names.assign(data::synth_class_names().begin(), data::synth_class_names().end());
    } else if (!rc.data_dir.empty()) {
        auto report = data::load_dataset(rc.data_dir, rc.model.input_size);
        for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";
        out.samples = std::move(report.samples);
        out.class_names = std::move(report.class_names);
    } else {
        throw ConfigError("no dataset: pass --data DIR or --synthetic N");
    }
    return out;
}

void write_confusion_csv(const eval::ConfusionMatrix& cm, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    out << "true\\pred";
    for (const auto& name : cm.class_names) out << "," << name;
    out << "\n";
    for (int i = 0; i < cm.k(); ++i) {
        out << cm.class_names[static_cast<size_t>(i)];
        for (int j = 0; j < cm.k(); ++j)
            out << "," << cm.counts[static_cast<size_t>(i)][static_cast<size_t>(j)];
        out << "\n";
    }
}

void write_curve_csv(const eval::Curve& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    out << "threshold,x,y\n";
    char line[128];
    for (size_t i = 0; i < curve.x.size(); ++i) {
        std::snprintf(line, sizeof(line), "%.9g,%.9g,%.9g\n", curve.threshold[i], curve.x[i],
                      curve.y[i]);
        out << line;
    }
}

nlohmann::json metrics_to_json(const eval::MetricsReport& report,
                               const std::vector<double>& auc_roc,
                               const std::vector<double>& auc_pr,
                               const std::vector<std::string>& class_names) {
    nlohmann::json j;
    j["overall_acc"] = report.overall_acc;
    j["macro"] = {{"acc", report.macro_acc},
                  {"sen", report.macro_sen},
                  {"pre", report.macro_pre},
                  {"f1", report.macro_f1},
                  {"f1_ci", report.macro_f1_ci}};
    auto& per_class = j["per_class"] = nlohmann::json::array();
    for (size_t c = 0; c < report.per_class.size(); ++c) {
        const auto& m = report.per_class[c];
        nlohmann::json e = {{"name", m.name}, {"tp", m.tp},   {"fp", m.fp},
                            {"fn", m.fn},     {"tn", m.tn},   {"acc", m.acc},
                            {"sen", m.sen},   {"pre", m.pre}, {"f1", m.f1},
                            {"f1_ci", m.f1_ci}};
        if (c < auc_roc.size()) {
            e["auc_roc"] = auc_roc[c];
            e["auc_pr"] = auc_pr[c];
        }
        per_class.push_back(std::move(e));
    }
    if (!auc_roc.empty()) {
        double mr = 0, mp = 0;
        for (double v : auc_roc) mr += v;
        for (double v : auc_pr) mp += v;
        j["macro_auc_roc"] = mr / static_cast<double>(auc_roc.size());
        j["macro_auc_pr"] = mp / static_cast<double>(auc_pr.size());
    }
    j["warnings"] = report.warnings;
    j["notes"] = report.notes;
    (void)class_names;
    return j;
}

// Shared by eval/features: load checkpoint, build the model, slice the
// requested split of the dataset.
struct EvalSetup {
    Model model;
    std::vector<data::Sample> samples;
    std::vector<std::string> class_names;
};

EvalSetup load_eval_setup(RunConfig& rc, const std::string& split_name) {
    if (rc.checkpoint.empty()) throw ConfigError("--checkpoint is required");
    const auto model_cfg = train::checkpoint_model_config(rc.checkpoint);
    const auto train_cfg = train::checkpoint_train_config(rc.checkpoint);
    rc.model = model_cfg;
    if (rc.synthetic > 0 && rc.seed == 0) rc.seed = train_cfg.seed;

    EvalSetup setup{Model(model_cfg, 0), {}, {}};
    train::load_checkpoint(rc.checkpoint, setup.model, nullptr);

    auto dataset = gather_dataset(rc);
    if (static_cast<int>(dataset.class_names.size()) != model_cfg.num_classes)
        throw ConfigError("dataset has " + std::to_string(dataset.class_names.size()) +
                          " classes but the checkpoint expects " +
                          std::to_string(model_cfg.num_classes));
    setup.class_names = dataset.class_names;

    if (split_name == "all") {
        setup.samples = std::move(dataset.samples);
    } else {
        auto parts = data::split(dataset.samples, train_cfg.f_train, train_cfg.f_val,
                                 train_cfg.f_test, train_cfg.seed);
        if (split_name == "train")
            setup.samples = std::move(parts.train);
        else if (split_name == "val")
            setup.samples = std::move(parts.val);
        else if (split_name == "test")
            setup.samples = std::move(parts.test);
        else
            throw ConfigError("unknown split '" + split_name + "'");
    }
    if (setup.samples.empty()) throw DatasetError("selected split is empty");
    return setup;
}

int cmd_train(RunConfig rc) {
    rc.train.seed = rc.seed;
    rc.model.dropout = rc.train.dropout;
    rc.model.validate();
    rc.train.validate();
    open_run_dir(rc, "train");

    auto dataset = gather_dataset(rc);
    if (static_cast<int>(dataset.class_names.size()) != rc.model.num_classes) {
        std::cout << "adjusting num_classes to " << dataset.class_names.size()
                  << " (dataset layout)\n";
        rc.model.num_classes = static_cast<int>(dataset.class_names.size());
        rc.model.validate();
    }
    auto parts =
        data::split(dataset.samples, rc.train.f_train, rc.train.f_val, rc.train.f_test, rc.seed);
    data::write_split_manifest(parts, (fs::path(rc.out_dir) / "split.json").string());

    Rng balance_rng = Rng(rc.seed).key(0x62616c);
    if (rc.balance) parts.train = data::oversample_balance(parts.train, balance_rng);

    Model model(rc.model, rc.seed);
    if (!rc.import_dir.empty()) {
        auto report = train::import_weights(model, rc.import_dir);
        std::cout << "imported " << report.matched.size() << " parameters from " << rc.import_dir
                  << "\n";
        for (const auto& name : report.missing) std::cout << "  not in checkpoint: " << name << "\n";
        for (const auto& name : report.extra) std::cout << "  no model parameter: " << name << "\n";
        for (const auto& name : report.mismatched) std::cout << "  shape mismatch: " << name << "\n";
    }

    train::FitOptions opts;
    opts.checkpoint_dir = (fs::path(rc.out_dir) / "ckpt").string();
    opts.on_epoch = [](const train::EpochStats& e) {
        std::printf("epoch %3d  lr %.3g  train %.4f  val %.4f  acc %.4f\n", e.epoch, e.lr,
                    e.train_loss, e.val_loss, e.val_acc);
    };
    auto history = train::fit(model, parts, rc.train, opts);
    train::write_history_csv(history, (fs::path(rc.out_dir) / "history.csv").string());

    // final metrics on the validation split
    if (!parts.val.empty()) {
        auto inference = train::infer(model, parts.val, rc.train.batch_size, rc.threads);
        std::vector<int> labels;
        for (const auto& s : parts.val) labels.push_back(s.label);
        auto cm = eval::confusion(labels, inference.predictions, rc.model.num_classes);
        cm.class_names = dataset.class_names;
        auto report = eval::metrics(cm);
        std::ofstream out(fs::path(rc.out_dir) / "val_metrics.json");
        out << metrics_to_json(report, {}, {}, cm.class_names).dump(2) << "\n";
        std::printf("val: overall acc %.2f%%, macro f1 %.2f%%\n", report.overall_acc,
                    report.macro_f1);
    }
    close_run_dir(rc, "train");
    return kExitOk;
}

int cmd_eval(RunConfig rc) {
    auto setup = load_eval_setup(rc, rc.eval_split);
    open_run_dir(rc, "eval");

    const int K = setup.model.cfg.num_classes;
    auto inference =
        train::infer(setup.model, setup.samples, rc.train.batch_size, rc.threads);
    std::vector<int> labels;
    for (const auto& s : setup.samples) labels.push_back(s.label);

    auto cm = eval::confusion(labels, inference.predictions, K);
    cm.class_names = setup.class_names;
    write_confusion_csv(cm, (fs::path(rc.out_dir) / "confusion.csv").string());

    auto report = eval::metrics(cm);
    std::vector<double> auc_roc, auc_pr;
    std::vector<double> probs(inference.probs.data.begin(), inference.probs.data.end());
    for (int c = 0; c < K; ++c) {
        const auto& name = setup.class_names[static_cast<size_t>(c)];
        try {
            auto curves = eval::roc_pr_class(probs, K, labels, c);
            auc_roc.push_back(curves.auc_roc);
            auc_pr.push_back(curves.auc_pr);
            write_curve_csv(curves.roc, (fs::path(rc.out_dir) / ("roc_" + name + ".csv")).string());
            write_curve_csv(curves.pr, (fs::path(rc.out_dir) / ("pr_" + name + ".csv")).string());
            svg::Series roc_series{"ROC " + name, kPalette[c % 8], curves.roc.x, curves.roc.y};
            svg::write_file((fs::path(rc.out_dir) / ("roc_" + name + ".svg")).string(),
                            svg::line_chart("ROC: " + name, "false positive rate",
                                            "true positive rate", {roc_series}));
            svg::Series pr_series{"PR " + name, kPalette[c % 8], curves.pr.x, curves.pr.y};
            svg::write_file((fs::path(rc.out_dir) / ("pr_" + name + ".svg")).string(),
                            svg::line_chart("PR: " + name, "recall", "precision", {pr_series}));
        } catch (const CurveError& e) {
            std::cerr << "warning: " << name << ": " << e.what() << "\n";
            auc_roc.push_back(0.0);
            auc_pr.push_back(0.0);
        }
    }

    {
        std::ofstream out(fs::path(rc.out_dir) / "metrics.json");
        out << metrics_to_json(report, auc_roc, auc_pr, setup.class_names).dump(2) << "\n";
    }
    std::printf("samples %zu  overall acc %.2f%%\n", setup.samples.size(), report.overall_acc);
    std::printf("macro: acc %.2f%%  sen %.2f%%  pre %.2f%%  f1 %.2f%% (+/- %.2f)\n",
                report.macro_acc, report.macro_sen, report.macro_pre, report.macro_f1,
                report.macro_f1_ci);
    if (!auc_roc.empty()) {
        double mr = 0, mp = 0;
        for (double v : auc_roc) mr += v;
        for (double v : auc_pr) mp += v;
        std::printf("macro AUC-ROC %.4f  AUC-PR %.4f\n", mr / K, mp / K);
    }
    close_run_dir(rc, "eval");
    return kExitOk;
}

int cmd_features(RunConfig rc) {
    auto setup = load_eval_setup(rc, rc.eval_split);
    open_run_dir(rc, "features");

    auto inference =
        train::infer(setup.model, setup.samples, rc.train.batch_size, rc.threads);
    const int N = inference.penultimate.shape[0];
    const int D = inference.penultimate.shape[1];

    {
        std::ofstream out(fs::path(rc.out_dir) / "features.csv");
        for (int i = 0; i < N; ++i) {
            for (int j = 0; j < D; ++j) out << (j ? "," : "") << inference.penultimate.at(i, j);
            out << "," << setup.samples[static_cast<size_t>(i)].label << "\n";
        }
    }

    std::vector<std::vector<double>> features(static_cast<size_t>(N),
                                              std::vector<double>(static_cast<size_t>(D)));
    for (int i = 0; i < N; ++i)
        for (int j = 0; j < D; ++j)
            features[static_cast<size_t>(i)][static_cast<size_t>(j)] = inference.penultimate.at(i, j);
    auto pca = eval::pca_project(features);
    if (pca.degenerate) std::cerr << "warning: zero-variance features, pca degenerate\n";

    {
        std::ofstream out(fs::path(rc.out_dir) / "pca.csv");
        out << "pc1,pc2,label\n";
        char line[128];
        for (int i = 0; i < N; ++i) {
            std::snprintf(line, sizeof(line), "%.9g,%.9g,%d\n", pca.coords[static_cast<size_t>(i)][0],
                          pca.coords[static_cast<size_t>(i)][1],
                          setup.samples[static_cast<size_t>(i)].label);
            out << line;
        }
    }

    std::vector<svg::Series> series(setup.class_names.size());
    for (size_t c = 0; c < setup.class_names.size(); ++c) {
        series[c].name = setup.class_names[c];
        series[c].color = kPalette[c % 8];
    }
    for (int i = 0; i < N; ++i) {
        const auto c = static_cast<size_t>(setup.samples[static_cast<size_t>(i)].label);
        series[c].x.push_back(pca.coords[static_cast<size_t>(i)][0]);
        series[c].y.push_back(pca.coords[static_cast<size_t>(i)][1]);
    }
    svg::write_file((fs::path(rc.out_dir) / "pca.svg").string(),
                    svg::scatter_chart("PCA of penultimate features", "pc1", "pc2", series));

    std::printf("features: %d samples, %d dims; explained variance %.3g + %.3g\n", N, D,
                pca.explained[0], pca.explained[1]);
    close_run_dir(rc, "features");
    return kExitOk;
}

int cmd_gradcheck(const RunConfig& rc, const std::string& only, bool inject_wrong) {
    auto results = check::run_suite(only, inject_wrong);
    if (results.empty()) {
        std::cerr << "no layer matches '" << only << "'\n";
        return kExitUsage;
    }
    bool all_pass = true;
    for (const auto& r : results) {
        std::printf("%-22s max rel err %.3e  (threshold %.0e)  %s\n", r.name.c_str(),
                    r.max_rel_err, r.threshold, r.pass ? "PASS" : "FAIL");
        all_pass = all_pass && r.pass;
    }
    if (!all_pass) {
        std::printf("failing layers:");
        for (const auto& r : results)
            if (!r.pass) std::printf(" %s", r.name.c_str());
        std::printf("\n");
    }
    (void)rc;
    return all_pass ? kExitOk : kExitVerification;
}

int cmd_synth(RunConfig rc, int n, int size) {
    open_run_dir(rc, "synth");
    auto samples = data::synth_generate(n, size, rc.seed);
    export_dataset(samples, {data::synth_class_names().begin(), data::synth_class_names().end()},
                   rc.out_dir);
    std::printf("wrote %zu images under %s\n", samples.size(), rc.out_dir.c_str());
    close_run_dir(rc, "synth");
    return kExitOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
    CLI::App app{"FME-Residual-HSCMT: hybrid CNN-transformer classifier toolkit"};
    app.require_subcommand(1);

    RunConfig rc;
    std::string config_path, preset;
    std::string gradcheck_only;
    bool inject_wrong = false;
    int synth_n = 100, synth_size = 64;

    auto add_shared = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON config file (flags override it)");
        cmd->add_option("--out", rc.out_dir, "output directory for this run");
        cmd->add_option("--seed", rc.seed, "master random seed");
        cmd->add_option("--preset", preset, "configuration preset: paper|desk");
        cmd->add_option("--threads", rc.threads, "worker threads for batch-parallel inference");
        cmd->add_flag("--force", rc.force, "overwrite a completed run in --out");
    };

    auto* train_cmd = app.add_subcommand("train", "train a model and write history/checkpoints");
    add_shared(train_cmd);
    train_cmd->add_option("--data", rc.data_dir, "dataset root (one subdirectory per class)");
    train_cmd->add_option("--synthetic", rc.synthetic,
                          "use the synthetic dataset with N samples per class");
    train_cmd->add_option("--epochs", rc.train.epochs, "training epochs");
    train_cmd->add_option("--batch-size", rc.train.batch_size, "minibatch size");
    train_cmd->add_option("--lr", rc.train.lr0, "initial learning rate");
    train_cmd->add_option("--dropout", rc.train.dropout, "head dropout rate");
    train_cmd->add_option("--weight-decay", rc.train.weight_decay, "decoupled weight decay");
    train_cmd->add_option("--clip-norm", rc.train.clip_norm,
                          "global gradient-norm clip (0 disables)");
    train_cmd->add_flag("!--no-augment", rc.train.augment, "disable training augmentation");
    train_cmd->add_flag("!--no-balance", rc.balance, "disable minority-class oversampling");
    train_cmd->add_option("--import", rc.import_dir,
                          "checkpoint directory to import weights from by parameter path");

    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint and emit reports");
    add_shared(eval_cmd);
    eval_cmd->add_option("--checkpoint", rc.checkpoint, "checkpoint directory")->required();
    eval_cmd->add_option("--data", rc.data_dir, "dataset root");
    eval_cmd->add_option("--synthetic", rc.synthetic, "synthetic dataset, N per class");
    eval_cmd->add_option("--split", rc.eval_split, "train|val|test|all (default test)");

    auto* features_cmd =
        app.add_subcommand("features", "export penultimate features and the PCA projection");
    add_shared(features_cmd);
    features_cmd->add_option("--checkpoint", rc.checkpoint, "checkpoint directory")->required();
    features_cmd->add_option("--data", rc.data_dir, "dataset root");
    features_cmd->add_option("--synthetic", rc.synthetic, "synthetic dataset, N per class");
    features_cmd->add_option("--split", rc.eval_split, "train|val|test|all (default test)");

    auto* gradcheck_cmd =
        app.add_subcommand("gradcheck", "run the 64-bit finite-difference verification suite");
    add_shared(gradcheck_cmd);
    gradcheck_cmd->add_option("--only", gradcheck_only, "run only layers whose name contains this");
    gradcheck_cmd->add_flag("--inject-wrong-grad", inject_wrong,
                            "add a deliberately wrong gradient to prove the harness fails");

    auto* synth_cmd = app.add_subcommand("synth", "write a synthetic dataset in class-dir layout");
    add_shared(synth_cmd);
    synth_cmd->add_option("--n", synth_n, "samples per class");
    synth_cmd->add_option("--size", synth_size, "image side length (>= 16)");

    // precedence: defaults < preset < config file < explicit flags. The
    // preset and file are pre-scanned so the CLI11 pass (which binds flag
    // values) runs last and wins.
    try {
        auto value_of = [&](const std::string& key) -> std::string {
            for (size_t i = 0; i < args.size(); ++i) {
                if (args[i] == key && i + 1 < args.size()) return args[i + 1];
                if (args[i].rfind(key + "=", 0) == 0) return args[i].substr(key.size() + 1);
            }
            return {};
        };
        const auto config_arg = value_of("--config");
        const auto preset_arg = value_of("--preset");
        if (!config_arg.empty()) apply_config_file(rc, config_arg);
        if (!preset_arg.empty()) apply_preset(rc, preset_arg);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(rc);
        if (eval_cmd->parsed()) return cmd_eval(rc);
        if (features_cmd->parsed()) return cmd_features(rc);
        if (gradcheck_cmd->parsed()) return cmd_gradcheck(rc, gradcheck_only, inject_wrong);
        if (synth_cmd->parsed()) return cmd_synth(rc, synth_n, synth_size);
    } catch (const NumericError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace fme::cli
