#pragma once

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "fme/rng.hpp"
#include "fme/tape.hpp"
#include "fme/tensor.hpp"

namespace fme {

enum class Init { zeros, ones, he_normal };

// A named trainable tensor. `decay` marks conv/linear weights, the only
// parameter class the optimizer applies weight decay to.
template <typename T>
struct ParameterT {
    std::string name;
    TensorT<T> value;
    bool trainable = true;
    bool decay = false;
};

using Parameter = ParameterT<float>;
using ParameterD = ParameterT<double>;

// Registry of model parameters. Creation order is the canonical order used
// for checkpoints and optimizer state, so runs are reproducible.
template <typename T>
class ParamStoreT {
  public:
    // init_scale multiplies the He standard deviation; sublayer output
    // projections use a small factor so residual streams start near
    // identity and deep stacks keep unit-scale activations.
    ParameterT<T>* create(const std::string& name, const Shape& shape, Init init, Rng& rng,
                          bool decay = false, double init_scale = 1.0) {
        validate_name(name);
        if (index_.count(name)) throw ConfigError("parameter name not unique: " + name);
        auto p = std::make_unique<ParameterT<T>>();
        p->name = name;
        p->value = TensorT<T>(shape);
        p->decay = decay;
        switch (init) {
            case Init::zeros:
                break;
            case Init::ones:
                std::fill(p->value.data.begin(), p->value.data.end(), T(1));
                break;
            case Init::he_normal: {
                // fan-in = per-output receptive field size
                std::int64_t fan_in = 1;
                for (int i = 1; i < shape.rank; ++i) fan_in *= shape.d[i];
                const double sd = init_scale * std::sqrt(2.0 / static_cast<double>(fan_in));
                for (auto& v : p->value.data) v = static_cast<T>(rng.normal() * sd);
                break;
            }
        }
        index_[name] = params_.size();
        params_.push_back(std::move(p));
        return params_.back().get();
    }

    ParameterT<T>* find(const std::string& name) {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }
    const ParameterT<T>* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].get();
    }

    size_t size() const { return params_.size(); }
    ParameterT<T>& at(size_t i) { return *params_[i]; }
    const ParameterT<T>& at(size_t i) const { return *params_[i]; }

    std::int64_t total_scalars() const {
        std::int64_t n = 0;
        for (const auto& p : params_) n += p->value.numel();
        return n;
    }

    // Registers every trainable parameter as a leaf of the tape.
    void bind(Tape<T>& tape) {
        for (auto& p : params_)
            p->value.node = p->trainable ? tape.watch(p->value, "param") : -1;
    }

    void unbind() {
        for (auto& p : params_) p->value.node = -1;
    }

    // Copies gradients out of the tape into each parameter's grad slot.
    // Parameters unreachable from the loss get zeros.
    void collect_grads(Tape<T>& tape) {
        for (auto& p : params_) {
            p->value.ensure_grad();
            if (p->value.node >= 0) {
                auto g = tape.grad(p->value.node);
                std::copy(g.begin(), g.end(), p->value.grad.begin());
            } else {
                p->value.zero_grad();
            }
        }
    }

  private:
    static void validate_name(const std::string& name) {
        if (name.empty() || name.front() == '.' || name.back() == '.' ||
            name.find("..") != std::string::npos)
            throw ConfigError("parameter path has empty segment: '" + name + "'");
    }

    std::vector<std::unique_ptr<ParameterT<T>>> params_;
    std::unordered_map<std::string, size_t> index_;
};

using ParamStore = ParamStoreT<float>;
using ParamStoreD = ParamStoreT<double>;

}  // namespace fme
