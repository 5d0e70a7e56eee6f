#pragma once

#include <json.hpp>

#include "fme/backbone.hpp"
#include "fme/train.hpp"

// JSON (de)serialization for the two config records. Field names mirror the
// struct members so config files and checkpoint manifests stay diffable.

namespace fme {

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"input_channels", c.input_channels},
                       {"input_size", c.input_size},
                       {"stage_dims", c.stage_dims},
                       {"stage_depths", c.stage_depths},
                       {"stage_heads", c.stage_heads},
                       {"irffn_ratio", c.irffn_ratio},
                       {"kv_stride", c.kv_stride},
                       {"residual_dims", c.residual_dims},
                       {"num_classes", c.num_classes},
                       {"dropout", c.dropout},
                       {"attention_bias", c.attention_bias},
                       {"window", c.window}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
    j.at("input_channels").get_to(c.input_channels);
    j.at("input_size").get_to(c.input_size);
    j.at("stage_dims").get_to(c.stage_dims);
    j.at("stage_depths").get_to(c.stage_depths);
    j.at("stage_heads").get_to(c.stage_heads);
    j.at("irffn_ratio").get_to(c.irffn_ratio);
    j.at("kv_stride").get_to(c.kv_stride);
    j.at("residual_dims").get_to(c.residual_dims);
    j.at("num_classes").get_to(c.num_classes);
    j.at("dropout").get_to(c.dropout);
    if (j.contains("attention_bias")) j.at("attention_bias").get_to(c.attention_bias);
    if (j.contains("window")) j.at("window").get_to(c.window);
}

namespace train {

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = nlohmann::json{{"lr0", c.lr0},
                       {"decay_factor", c.decay_factor},
                       {"decay_every", c.decay_every},
                       {"weight_decay", c.weight_decay},
                       {"batch_size", c.batch_size},
                       {"epochs", c.epochs},
                       {"seed", c.seed},
                       {"dropout", c.dropout},
                       {"clip_norm", c.clip_norm},
                       {"augment", c.augment},
                       {"fractions", std::array<double, 3>{c.f_train, c.f_val, c.f_test}}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
    j.at("lr0").get_to(c.lr0);
    j.at("decay_factor").get_to(c.decay_factor);
    j.at("decay_every").get_to(c.decay_every);
    j.at("weight_decay").get_to(c.weight_decay);
    j.at("batch_size").get_to(c.batch_size);
    j.at("epochs").get_to(c.epochs);
    j.at("seed").get_to(c.seed);
    j.at("dropout").get_to(c.dropout);
    if (j.contains("clip_norm")) j.at("clip_norm").get_to(c.clip_norm);
    if (j.contains("augment")) j.at("augment").get_to(c.augment);
    if (j.contains("fractions")) {
        auto f = j.at("fractions").get<std::array<double, 3>>();
        c.f_train = f[0];
        c.f_val = f[1];
        c.f_test = f[2];
    }
}

}  // namespace train
}  // namespace fme
