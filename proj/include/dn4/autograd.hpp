#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "dn4/tensor.hpp"

namespace dn4 {

template <class T>
struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    std::vector<std::shared_ptr<Node>> inputs;
    // Reads this node's grad and accumulates into the grads of `inputs`.
    std::function<void(Node&)> backward;

    BasicTensor<T>& grad_buffer() {
        if (grad.empty()) grad = BasicTensor<T>(value.shape());
        return grad;
    }

    void accumulate(std::span<const T> delta) {
        auto g = grad_buffer().data();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
    }
};

/// Handle to a value that may participate in a gradient tape.
template <class T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Var leaf(BasicTensor<T> value, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(BasicTensor<T> value) { return leaf(std::move(value), false); }

    bool valid() const noexcept { return node_ != nullptr; }
    const BasicTensor<T>& value() const { return node_->value; }
    BasicTensor<T>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_->requires_grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    const BasicTensor<T>& grad() const { return node_->grad; }
    BasicTensor<T>& grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad = BasicTensor<T>(); }

    const std::shared_ptr<Node<T>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations. Nodes are appended in
/// creation order, which is a topological order of the computation.
/// A non-recording tape evaluates forward only.
template <class T>
class Tape {
public:
    using BackwardFn = std::function<void(Node<T>&)>;

    explicit Tape(bool recording = true) : recording_(recording) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    bool needs_grad(std::initializer_list<const Var<T>*> inputs) const {
        if (!recording_) return false;
        for (auto* v : inputs) {
            if (v->requires_grad()) return true;
        }
        return false;
    }

    /// Creates the output node for an op. The backward rule is only stored
    /// when the tape records and some input requires a gradient.
    Var<T> record(BasicTensor<T> value, std::vector<Var<T>> inputs, BackwardFn backward) {
        bool any = false;
        if (recording_) {
            for (const auto& v : inputs) any = any || v.requires_grad();
        }
        auto n = std::make_shared<Node<T>>();
        n->value = std::move(value);
        if (!any) return Var<T>(std::move(n));
        n->requires_grad = true;
        n->is_leaf = false;
        n->inputs.reserve(inputs.size());
        for (auto& v : inputs) n->inputs.push_back(v.node());
        n->backward = std::move(backward);
        nodes_.push_back(n);
        return Var<T>(std::move(n));
    }

    /// Reverse traversal from a scalar loss. Leaf gradients accumulate across
    /// calls; intermediate gradients are reset on every call.
    void backward(const Var<T>& loss) {
        if (shape_size(loss.shape()) != 1) {
            throw ContractError("backward requires a scalar loss, got shape " + shape_string(loss.shape()));
        }
        if (!loss.requires_grad()) {
            throw ContractError("backward on a loss that does not depend on any parameter");
        }
        if (nodes_.empty()) throw ContractError("backward on an empty tape");
        for (auto& n : nodes_) n->grad = BasicTensor<T>();
        const auto& root = loss.node();
        if (root->is_leaf) {
            root->grad_buffer()[0] += T{1};
            return;
        }
        root->grad_buffer()[0] = T{1};
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            Node<T>& n = **it;
            if (n.grad.empty() || !n.backward) continue;
            n.backward(n);
        }
    }

    void clear() { nodes_.clear(); }

private:
    bool recording_;
    std::vector<std::shared_ptr<Node<T>>> nodes_;
};

}  // namespace dn4
