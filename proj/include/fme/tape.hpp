#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fme/tensor.hpp"

namespace fme {

// Reverse-mode tape. Node ids are assigned in recording order, so ids are
// already a topological order of the computation graph: backward walks them
// once, in reverse. A tape is single-writer; see the concurrency notes in
// the README.
template <typename T>
class Tape {
  public:
    struct Node {
        const char* op;
        Shape shape;
        std::vector<int> inputs;
        // Pulls this node's gradient into its inputs' gradient buffers.
        std::function<void(Tape&, const std::vector<T>&)> pull;
    };

    // Registers a leaf (parameter or watched input). Leaves have no pull.
    int leaf(const Shape& shape, const char* op = "leaf") {
        nodes_.push_back(Node{op, shape, {}, nullptr});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Convenience: mark a tensor as a watched leaf of this tape.
    int watch(TensorT<T>& t, const char* op = "leaf") {
        t.node = leaf(t.shape, op);
        return t.node;
    }

    int record(const char* op, const Shape& shape, std::vector<int> inputs,
               std::function<void(Tape&, const std::vector<T>&)> pull) {
        nodes_.push_back(Node{op, shape, std::move(inputs), std::move(pull)});
        return static_cast<int>(nodes_.size()) - 1;
    }

    // Accumulate into a node's gradient buffer (allocated on first touch).
    void accumulate(int id, const T* g, std::int64_t n) {
        auto& slot = grads_[static_cast<size_t>(id)];
        if (slot.empty()) slot.assign(static_cast<size_t>(nodes_[id].shape.numel()), T(0));
        for (std::int64_t i = 0; i < n; ++i) slot[static_cast<size_t>(i)] += g[i];
    }

    std::vector<T>& grad_buffer(int id) {
        auto& slot = grads_[static_cast<size_t>(id)];
        if (slot.empty()) slot.assign(static_cast<size_t>(nodes_[id].shape.numel()), T(0));
        return slot;
    }

    // Gradient of the last backward() with respect to node `id`. Untouched
    // (unreachable) nodes report zeros.
    std::vector<T> grad(int id) const {
        const auto& slot = grads_[static_cast<size_t>(id)];
        if (slot.empty()) return std::vector<T>(static_cast<size_t>(nodes_[id].shape.numel()), T(0));
        return slot;
    }

    bool touched(int id) const { return !grads_[static_cast<size_t>(id)].empty(); }

    // Seeds d(loss)/d(loss) = 1 and replays the tape in reverse topological
    // order, visiting each node at most once.
    void backward(int loss_node) {
        if (loss_node < 0 || loss_node >= static_cast<int>(nodes_.size()))
            throw ContractError("backward: invalid loss node");
        if (nodes_[loss_node].shape.numel() != 1)
            throw ContractError("backward: loss node is not scalar, shape " +
                                nodes_[loss_node].shape.str());
        grads_.assign(nodes_.size(), {});
        grads_[static_cast<size_t>(loss_node)] = {T(1)};
        for (int id = loss_node; id >= 0; --id) {
            const Node& n = nodes_[static_cast<size_t>(id)];
            if (!n.pull) continue;
            const auto& g = grads_[static_cast<size_t>(id)];
            if (g.empty()) continue;  // not reachable from the loss
            n.pull(*this, g);
        }
    }

    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // Shapes of every recorded op with the given name, in recording order.
    // Used by tests to assert compute bounds (e.g. attention score extents).
    std::vector<Shape> shapes_of(const std::string& op) const {
        std::vector<Shape> out;
        for (const auto& n : nodes_)
            if (op == n.op) out.push_back(n.shape);
        return out;
    }

  private:
    std::vector<Node> nodes_;
    std::vector<std::vector<T>> grads_;
};

using TapeF = Tape<float>;
using TapeD = Tape<double>;

}  // namespace fme
