#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "fme/backbone.hpp"
#include "fme/data.hpp"

namespace fme::train {

struct TrainConfig {
    double lr0 = 1e-3;
    double decay_factor = 0.85;
    int decay_every = 20;
    double weight_decay = 0.04;
    int batch_size = 16;
    int epochs = 0;
    std::uint64_t seed = 0;
    double dropout = 0.3;
    double clip_norm = 5.0;  // global-norm gradient clip; 0 disables
    bool augment = true;
    // dataset split fractions, recorded in checkpoints so eval reproduces
    // the same membership
    double f_train = 0.7, f_val = 0.1, f_test = 0.2;

    void validate() const {
        if (lr0 <= 0) throw ConfigError("train: lr0 must be positive");
        if (decay_factor <= 0 || decay_factor > 1)
            throw ConfigError("train: decay_factor must be in (0,1]");
        if (decay_every < 1) throw ConfigError("train: decay_every must be >= 1");
        if (weight_decay < 0) throw ConfigError("train: weight_decay must be >= 0");
        if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
        if (epochs < 0) throw ConfigError("train: epochs must be >= 0");
        if (dropout < 0 || dropout >= 1) throw ConfigError("train: dropout must be in [0,1)");
        if (clip_norm < 0) throw ConfigError("train: clip_norm must be >= 0");
        if (f_train <= 0 || f_val <= 0 || f_test <= 0 ||
            std::abs(f_train + f_val + f_test - 1.0) > 1e-9)
            throw ConfigError("train: split fractions must be positive and sum to 1");
    }
};

// Step schedule: lr0 * decay_factor^floor(epoch / decay_every).
double lr_at(int epoch, const TrainConfig& cfg);

// Adam moments, one slot per parameter in registry order.
struct AdamState {
    std::vector<std::vector<float>> m, v;
    std::int64_t t = 0;

    void init(const ParamStore& params);
    bool initialized() const { return !m.empty(); }
};

// One Adam update over every trainable parameter (beta1 0.9, beta2 0.999,
// eps 1e-8, bias correction). Weight decay is decoupled and touches only
// parameters flagged as decayable (conv/linear weights).
void adam_step(ParamStore& params, AdamState& state, double lr, double weight_decay);

struct EpochStats {
    int epoch = 0;
    double lr = 0;
    double train_loss = 0;
    double val_loss = 0;
    double val_acc = 0;
};
using History = std::vector<EpochStats>;

struct TrainState {
    AdamState adam;
    int next_epoch = 0;
    double best_val_acc = -1.0;
    History history;
};

struct FitOptions {
    std::string checkpoint_dir;  // when set: <dir>/last and <dir>/best are maintained
    std::function<void(const EpochStats&)> on_epoch;
};

// Full training loop: per epoch -- seeded shuffle, batching, per-sample
// augmentation keyed by (seed, epoch, sample index), forward/backward/Adam,
// then a full validation pass in eval mode. Resumable via `state`.
History fit(Model& model, const data::DatasetSplit& split, const TrainConfig& cfg,
            const FitOptions& opts = {}, TrainState* state = nullptr);

struct EvalPass {
    double loss = 0;
    double accuracy = 0;
};
EvalPass evaluate(const Model& model, const std::vector<data::Sample>& samples, int batch_size);

// Batched eval-mode inference. `threads` > 1 splits samples across worker
// threads; per-sample outputs are independent, so results are identical to
// the serial run.
struct InferenceResult {
    Tensor probs;        // (N, classes)
    Tensor penultimate;  // (N, fused channels)
    std::vector<int> predictions;
};
InferenceResult infer(const Model& model, const std::vector<data::Sample>& samples, int batch_size,
                      int threads = 1);

// Checkpoint directory: manifest.json plus params.bin (little-endian float32
// arrays at the offsets named by the manifest index). Optimizer moments ride
// in the same blob under "opt" entries so training resumes bit-exactly.
void save_checkpoint(const Model& model, const TrainConfig& cfg, const TrainState* state,
                     const std::string& dir);
void load_checkpoint(const std::string& dir, Model& model, TrainState* state);
ModelConfig checkpoint_model_config(const std::string& dir);
TrainConfig checkpoint_train_config(const std::string& dir);

// Weight-import hook: copies checkpoint entries into the model by parameter
// path. Unmatched or shape-mismatched paths are reported, never silently
// skipped.
struct ImportReport {
    std::vector<std::string> matched;
    std::vector<std::string> missing;     // model parameters absent from the checkpoint
    std::vector<std::string> extra;       // checkpoint entries with no model counterpart
    std::vector<std::string> mismatched;  // name matched but shape differs; skipped
};
ImportReport import_weights(Model& model, const std::string& dir);

// `epoch,lr,train_loss,val_loss,val_acc` rows.
void write_history_csv(const History& history, const std::string& path);

}  // namespace fme::train
