#include "fme/train.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "fme/config_json.hpp"
#include "fme/ops.hpp"

namespace fs = std::filesystem;

namespace fme::train {

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are little-endian float32");

double lr_at(int epoch, const TrainConfig& cfg) {
    if (epoch < 0) throw ContractError("lr_at: negative epoch");
    return cfg.lr0 * std::pow(cfg.decay_factor, epoch / cfg.decay_every);
}

void AdamState::init(const ParamStore& params) {
    m.assign(params.size(), {});
    v.assign(params.size(), {});
    for (size_t i = 0; i < params.size(); ++i) {
        m[i].assign(params.at(i).value.data.size(), 0.0f);
        v[i].assign(params.at(i).value.data.size(), 0.0f);
    }
    t = 0;
}

void adam_step(ParamStore& params, AdamState& state, double lr, double weight_decay) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    if (!state.initialized()) state.init(params);
    ++state.t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
    for (size_t i = 0; i < params.size(); ++i) {
        Parameter& p = params.at(i);
        if (!p.trainable) continue;
        if (p.value.grad.size() != p.value.data.size())
            throw ContractError("adam_step: parameter " + p.name + " has no gradient");
        auto& m = state.m[i];
        auto& v = state.v[i];
        for (size_t k = 0; k < p.value.data.size(); ++k) {
            const double g = p.value.grad[k];
            m[k] = static_cast<float>(beta1 * m[k] + (1.0 - beta1) * g);
            v[k] = static_cast<float>(beta2 * v[k] + (1.0 - beta2) * g * g);
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            p.value.data[k] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
        }
        if (weight_decay > 0 && p.decay)
            for (auto& w : p.value.data) w -= static_cast<float>(lr * weight_decay) * w;
    }
}

namespace {

// Stacks samples (optionally augmented) into one (B, 1, S, S) batch.
Tensor make_batch(const std::vector<data::Sample>& samples, const std::vector<size_t>& order,
                  size_t first, size_t count) {
    const Shape& s = samples[order[first]].image.shape;
    Tensor batch(Shape{static_cast<int>(count), 1, s[1], s[2]});
    const size_t per = samples[order[first]].image.data.size();
    for (size_t i = 0; i < count; ++i) {
        const auto& img = samples[order[first + i]].image;
        if (img.data.size() != per) throw ShapeError("batch: inconsistent image extents");
        std::copy(img.data.begin(), img.data.end(), batch.data.begin() + static_cast<long>(i * per));
    }
    return batch;
}

double global_grad_norm(const ParamStore& params) {
    double acc = 0;
    for (size_t i = 0; i < params.size(); ++i)
        for (float g : params.at(i).value.grad) acc += static_cast<double>(g) * g;
    return std::sqrt(acc);
}

void scale_grads(ParamStore& params, double factor) {
    for (size_t i = 0; i < params.size(); ++i)
        for (auto& g : params.at(i).value.grad) g = static_cast<float>(g * factor);
}

}  // namespace

EvalPass evaluate(const Model& model, const std::vector<data::Sample>& samples, int batch_size) {
    EvalPass out;
    if (samples.empty()) return out;
    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    double total_loss = 0;
    std::int64_t correct = 0;
    Rng unused(0);
    for (size_t first = 0; first < samples.size(); first += static_cast<size_t>(batch_size)) {
        const size_t count = std::min(static_cast<size_t>(batch_size), samples.size() - first);
        auto batch = make_batch(samples, order, first, count);
        auto fwd = model.forward(nullptr, batch, Mode::eval, unused);
        std::vector<int> labels(count);
        for (size_t i = 0; i < count; ++i) labels[i] = samples[first + i].label;
        total_loss += cross_entropy<float>(nullptr, fwd.logits, labels).data[0] * count;
        for (size_t i = 0; i < count; ++i) {
            int best = 0;
            for (int k = 1; k < fwd.probs.shape[1]; ++k)
                if (fwd.probs.at(static_cast<int>(i), k) > fwd.probs.at(static_cast<int>(i), best))
                    best = k;
            if (best == labels[i]) ++correct;
        }
    }
    out.loss = total_loss / static_cast<double>(samples.size());
    out.accuracy = static_cast<double>(correct) / static_cast<double>(samples.size());
    return out;
}

InferenceResult infer(const Model& model, const std::vector<data::Sample>& samples, int batch_size,
                      int threads) {
    InferenceResult out;
    const int N = static_cast<int>(samples.size());
    if (N == 0) return out;
    const int K = model.cfg.num_classes;
    const int F = model.cfg.fused_channels();
    out.probs = Tensor(Shape{N, K});
    out.penultimate = Tensor(Shape{N, F});
    out.predictions.assign(static_cast<size_t>(N), 0);

    std::vector<size_t> order(samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;

    auto run_range = [&](size_t lo, size_t hi) {
        Rng unused(0);
        for (size_t first = lo; first < hi; first += static_cast<size_t>(batch_size)) {
            const size_t count = std::min(static_cast<size_t>(batch_size), hi - first);
            auto batch = make_batch(samples, order, first, count);
            auto fwd = model.forward(nullptr, batch, Mode::eval, unused);
            for (size_t i = 0; i < count; ++i) {
                const auto row = static_cast<int>(first + i);
                int best = 0;
                for (int k = 0; k < K; ++k) {
                    out.probs.at(row, k) = fwd.probs.at(static_cast<int>(i), k);
                    if (fwd.probs.at(static_cast<int>(i), k) > fwd.probs.at(static_cast<int>(i), best))
                        best = k;
                }
                for (int f = 0; f < F; ++f)
                    out.penultimate.at(row, f) = fwd.penultimate.at(static_cast<int>(i), f);
                out.predictions[static_cast<size_t>(row)] = best;
            }
        }
    };

    threads = std::max(1, threads);
    if (threads == 1 || N < 2 * batch_size) {
        run_range(0, samples.size());
    } else {
        // contiguous chunks; identical to serial because samples are independent
        std::vector<std::thread> pool;
        const size_t chunk = (samples.size() + static_cast<size_t>(threads) - 1) /
                             static_cast<size_t>(threads);
        for (int t = 0; t < threads; ++t) {
            const size_t lo = static_cast<size_t>(t) * chunk;
            const size_t hi = std::min(samples.size(), lo + chunk);
            if (lo < hi) pool.emplace_back(run_range, lo, hi);
        }
        for (auto& th : pool) th.join();
    }
    return out;
}

History fit(Model& model, const data::DatasetSplit& split, const TrainConfig& cfg,
            const FitOptions& opts, TrainState* state) {
    cfg.validate();
    TrainState local;
    TrainState& st = state ? *state : local;
    if (!st.adam.initialized()) st.adam.init(model.params());

    const Rng master(cfg.seed);
    const auto& train_set = split.train;
    if (train_set.empty() && cfg.epochs > st.next_epoch)
        throw DatasetError("fit: empty training split");

    if (!opts.checkpoint_dir.empty() && st.next_epoch == 0)
        save_checkpoint(model, cfg, &st, opts.checkpoint_dir + "/last");

    for (int epoch = st.next_epoch; epoch < cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, cfg);

        std::vector<size_t> order(train_set.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = master.key(0x73687566, static_cast<std::uint64_t>(epoch));
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.below(i)]);

        double train_loss = 0;
        size_t batch_index = 0;
        for (size_t first = 0; first < order.size();
             first += static_cast<size_t>(cfg.batch_size), ++batch_index) {
            const size_t count = std::min(static_cast<size_t>(cfg.batch_size), order.size() - first);

            // augmentation keyed by (seed, epoch, dataset index): independent
            // of batch order, so resumed runs reproduce the same stream
            std::vector<data::Sample> staged(count);
            std::vector<int> labels(count);
            std::vector<size_t> ids(count);
            for (size_t i = 0; i < count; ++i) {
                const size_t idx = order[first + i];
                Rng aug_rng = master.key(0x617567, static_cast<std::uint64_t>(epoch), idx);
                staged[i] = cfg.augment ? data::augment(train_set[idx], aug_rng) : train_set[idx];
                labels[i] = train_set[idx].label;
                ids[i] = i;
            }

            try {
                TapeF tape;
                model.params().bind(tape);
                auto batch = make_batch(staged, ids, 0, count);
                Rng drop_rng = master.key(0x64726f70, static_cast<std::uint64_t>(epoch),
                                          static_cast<std::uint64_t>(batch_index));
                auto fwd = model.forward(&tape, batch, Mode::train, drop_rng);
                auto loss = cross_entropy<float>(&tape, fwd.logits, labels);
                tape.backward(loss.node);
                model.params().collect_grads(tape);
                model.params().unbind();
                train_loss += static_cast<double>(loss.data[0]) * count;

                if (cfg.clip_norm > 0) {
                    const double norm = global_grad_norm(model.params());
                    if (norm > cfg.clip_norm) scale_grads(model.params(), cfg.clip_norm / norm);
                }
                adam_step(model.params(), st.adam, lr, cfg.weight_decay);
            } catch (const NumericError& e) {
                model.params().unbind();
                throw NumericError("fit aborted at epoch " + std::to_string(epoch) + ", batch " +
                                   std::to_string(batch_index) + ": " + e.what());
            }
        }

        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = lr;
        stats.train_loss = train_loss / static_cast<double>(train_set.size());
        auto val = evaluate(model, split.val, cfg.batch_size);
        stats.val_loss = val.loss;
        stats.val_acc = val.accuracy;
        st.history.push_back(stats);
        st.next_epoch = epoch + 1;

        const bool is_best = stats.val_acc > st.best_val_acc;
        if (is_best) st.best_val_acc = stats.val_acc;
        if (!opts.checkpoint_dir.empty()) {
            save_checkpoint(model, cfg, &st, opts.checkpoint_dir + "/last");
            if (is_best) save_checkpoint(model, cfg, &st, opts.checkpoint_dir + "/best");
        }
        if (opts.on_epoch) opts.on_epoch(stats);
    }
    return st.history;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr int kFormatVersion = 1;

nlohmann::json stats_to_json(const History& h) {
    auto arr = nlohmann::json::array();
    for (const auto& e : h)
        arr.push_back({{"epoch", e.epoch},
                       {"lr", e.lr},
                       {"train_loss", e.train_loss},
                       {"val_loss", e.val_loss},
                       {"val_acc", e.val_acc}});
    return arr;
}

History stats_from_json(const nlohmann::json& arr) {
    History h;
    for (const auto& e : arr) {
        EpochStats s;
        e.at("epoch").get_to(s.epoch);
        e.at("lr").get_to(s.lr);
        e.at("train_loss").get_to(s.train_loss);
        e.at("val_loss").get_to(s.val_loss);
        e.at("val_acc").get_to(s.val_acc);
        h.push_back(s);
    }
    return h;
}

nlohmann::json load_manifest(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) throw CheckpointError("missing manifest.json in " + dir);
    nlohmann::json j;
    in >> j;
    if (!j.contains("format_version") || j["format_version"].get<int>() != kFormatVersion)
        throw CheckpointError("unsupported checkpoint format in " + dir);
    return j;
}

}  // namespace

void save_checkpoint(const Model& model, const TrainConfig& cfg, const TrainState* state,
                     const std::string& dir) {
    fs::create_directories(dir);
    nlohmann::json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["model_config"] = model.cfg;
    manifest["train_config"] = cfg;
    manifest["epoch"] = state ? state->next_epoch : 0;
    manifest["best_val_acc"] = state ? state->best_val_acc : -1.0;
    manifest["rng_state"] = cfg.seed;
    if (state) {
        manifest["adam_t"] = state->adam.t;
        manifest["history"] = stats_to_json(state->history);
    }

    std::ofstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw CheckpointError("cannot write " + dir + "/params.bin");
    std::int64_t offset = 0;
    auto append = [&](const std::string& name, const Shape& shape, const std::vector<float>& values,
                      nlohmann::json& index) {
        const auto bytes = static_cast<std::int64_t>(values.size() * sizeof(float));
        std::vector<int> dims(shape.d.begin(), shape.d.begin() + shape.rank);
        index.push_back({{"name", name}, {"shape", dims}, {"offset", offset}, {"bytes", bytes}});
        blob.write(reinterpret_cast<const char*>(values.data()),
                   static_cast<std::streamsize>(bytes));
        offset += bytes;
    };

    auto& params_index = manifest["params"] = nlohmann::json::array();
    const auto& store = model.params();
    for (size_t i = 0; i < store.size(); ++i)
        append(store.at(i).name, store.at(i).value.shape, store.at(i).value.data, params_index);

    if (state && state->adam.initialized()) {
        auto& opt_index = manifest["opt"] = nlohmann::json::array();
        for (size_t i = 0; i < store.size(); ++i) {
            append("opt.m." + store.at(i).name, store.at(i).value.shape, state->adam.m[i], opt_index);
            append("opt.v." + store.at(i).name, store.at(i).value.shape, state->adam.v[i], opt_index);
        }
    }
    manifest["blob_bytes"] = offset;
    blob.close();

    std::ofstream out(dir + "/manifest.json");
    if (!out) throw CheckpointError("cannot write " + dir + "/manifest.json");
    out << manifest.dump(2) << "\n";
}

ModelConfig checkpoint_model_config(const std::string& dir) {
    return load_manifest(dir)["model_config"].get<ModelConfig>();
}

TrainConfig checkpoint_train_config(const std::string& dir) {
    return load_manifest(dir)["train_config"].get<TrainConfig>();
}

namespace {

std::vector<float> read_blob_entry(std::ifstream& blob, std::int64_t offset, std::int64_t bytes,
                                   const std::string& name) {
    if (bytes % static_cast<std::int64_t>(sizeof(float)) != 0)
        throw CheckpointError("entry " + name + " has a non-float32 byte length");
    std::vector<float> values(static_cast<size_t>(bytes / sizeof(float)));
    blob.seekg(offset);
    blob.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(bytes));
    if (!blob) throw CheckpointError("blob truncated while reading " + name);
    return values;
}

Shape shape_from_dims(const std::vector<int>& dims) {
    Shape s;
    s.rank = static_cast<int>(dims.size());
    for (size_t i = 0; i < dims.size(); ++i) s.d[i] = dims[i];
    return s;
}

}  // namespace

void load_checkpoint(const std::string& dir, Model& model, TrainState* state) {
    auto manifest = load_manifest(dir);
    const auto ckpt_cfg = manifest["model_config"].get<ModelConfig>();
    nlohmann::json want, have;
    to_json(want, ckpt_cfg);
    to_json(have, model.cfg);
    if (want != have)
        throw CheckpointError("checkpoint model config does not match the constructed model");

    std::ifstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw CheckpointError("missing params.bin in " + dir);
    blob.seekg(0, std::ios::end);
    const auto actual_bytes = static_cast<std::int64_t>(blob.tellg());
    if (manifest.contains("blob_bytes") && manifest["blob_bytes"].get<std::int64_t>() != actual_bytes)
        throw CheckpointError("params.bin length " + std::to_string(actual_bytes) +
                              " does not match manifest " +
                              std::to_string(manifest["blob_bytes"].get<std::int64_t>()));

    auto& store = model.params();
    std::vector<bool> seen(store.size(), false);
    for (const auto& entry : manifest.at("params")) {
        const auto name = entry.at("name").get<std::string>();
        auto* p = store.find(name);
        if (!p) throw CheckpointError("checkpoint entry '" + name + "' has no model parameter");
        const auto shape = shape_from_dims(entry.at("shape").get<std::vector<int>>());
        if (shape != p->value.shape)
            throw CheckpointError("checkpoint entry '" + name + "' shape " + shape.str() +
                                  " != model " + p->value.shape.str());
        auto values = read_blob_entry(blob, entry.at("offset").get<std::int64_t>(),
                                      entry.at("bytes").get<std::int64_t>(), name);
        if (values.size() != p->value.data.size())
            throw CheckpointError("checkpoint entry '" + name + "' length mismatch");
        p->value.data = std::move(values);
        for (size_t i = 0; i < store.size(); ++i)
            if (&store.at(i) == p) seen[i] = true;
    }
    for (size_t i = 0; i < store.size(); ++i)
        if (!seen[i])
            throw CheckpointError("model parameter '" + store.at(i).name +
                                  "' missing from checkpoint");

    if (state) {
        state->next_epoch = manifest.value("epoch", 0);
        state->best_val_acc = manifest.value("best_val_acc", -1.0);
        state->history = manifest.contains("history") ? stats_from_json(manifest["history"])
                                                      : History{};
        state->adam = AdamState{};
        if (manifest.contains("opt")) {
            state->adam.init(store);
            state->adam.t = manifest.value("adam_t", std::int64_t{0});
            for (const auto& entry : manifest["opt"]) {
                const auto name = entry.at("name").get<std::string>();
                const bool is_m = name.rfind("opt.m.", 0) == 0;
                const bool is_v = name.rfind("opt.v.", 0) == 0;
                if (!is_m && !is_v)
                    throw CheckpointError("unrecognized optimizer entry '" + name + "'");
                const auto pname = name.substr(6);
                auto* p = store.find(pname);
                if (!p) throw CheckpointError("optimizer entry '" + name + "' has no parameter");
                size_t pi = 0;
                for (size_t i = 0; i < store.size(); ++i)
                    if (&store.at(i) == p) pi = i;
                auto values = read_blob_entry(blob, entry.at("offset").get<std::int64_t>(),
                                              entry.at("bytes").get<std::int64_t>(), name);
                (is_m ? state->adam.m : state->adam.v)[pi] = std::move(values);
            }
        }
    }
}

ImportReport import_weights(Model& model, const std::string& dir) {
    auto manifest = load_manifest(dir);
    std::ifstream blob(dir + "/params.bin", std::ios::binary);
    if (!blob) throw CheckpointError("missing params.bin in " + dir);

    ImportReport report;
    auto& store = model.params();
    std::vector<bool> seen(store.size(), false);
    for (const auto& entry : manifest.at("params")) {
        const auto name = entry.at("name").get<std::string>();
        auto* p = store.find(name);
        if (!p) {
            report.extra.push_back(name);
            continue;
        }
        const auto shape = shape_from_dims(entry.at("shape").get<std::vector<int>>());
        if (shape != p->value.shape) {
            report.mismatched.push_back(name + " " + shape.str() + " vs " + p->value.shape.str());
            continue;
        }
        p->value.data = read_blob_entry(blob, entry.at("offset").get<std::int64_t>(),
                                        entry.at("bytes").get<std::int64_t>(), name);
        report.matched.push_back(name);
        for (size_t i = 0; i < store.size(); ++i)
            if (&store.at(i) == p) seen[i] = true;
    }
    for (size_t i = 0; i < store.size(); ++i)
        if (!seen[i]) report.missing.push_back(store.at(i).name);
    return report;
}

void write_history_csv(const History& history, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw ConfigError("cannot write " + path);
    out << "epoch,lr,train_loss,val_loss,val_acc\n";
    char line[256];
    for (const auto& e : history) {
        std::snprintf(line, sizeof(line), "%d,%.9g,%.9g,%.9g,%.9g\n", e.epoch, e.lr, e.train_loss,
                      e.val_loss, e.val_acc);
        out << line;
    }
}

}  // namespace fme::train
