#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gcg/errors.hpp"
#include "gcg/tensor.hpp"

namespace gcg::ad {

template <typename S>
class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
template <typename S>
struct Var {
    Tape<S>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<S>& value() const { return tape->value(id); }
    const Extents& extents() const { return value().extents(); }
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
    std::size_t size() const { return value().size(); }
};

/// Taped computation record for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. Leaves created through
/// `parameter()` remember a parameter slot so gradients can be harvested into
/// a ParamStore after the sweep.
template <typename S>
class Tape {
public:
    // Receives the tape and the index of the node being differentiated. The
    // node's own gradient is available through grad(self).
    using BackwardFn = std::function<void(Tape&, std::size_t)>;

    struct Node {
        const char* op = "";
        std::vector<std::size_t> inputs;
        Tensor<S> value;
        Tensor<S> grad;
        bool requires_grad = false;
        BackwardFn backward;
    };

    Tape() { nodes_.reserve(256); }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var<S> constant(Tensor<S> value) { return push_leaf("constant", std::move(value), false); }

    Var<S> variable(Tensor<S> value) { return push_leaf("variable", std::move(value), true); }

    Var<S> parameter(Tensor<S> value, std::size_t slot) {
        Var<S> v = push_leaf("parameter", std::move(value), true);
        bindings_.emplace_back(v.id, slot);
        return v;
    }

    Var<S> push(const char* op, std::vector<std::size_t> inputs, Tensor<S> value, BackwardFn backward) {
        if (!value.all_finite()) throw NumericError(std::string("non-finite result in op '") + op + "'");
        bool needs = false;
        for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
        Node node;
        node.op = op;
        node.inputs = std::move(inputs);
        node.value = std::move(value);
        node.requires_grad = needs;
        if (needs) node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
        return Var<S>{this, nodes_.size() - 1};
    }

    const Tensor<S>& value(std::size_t id) const { return nodes_[id].value; }
    const Node& node(std::size_t id) const { return nodes_[id]; }
    std::size_t size() const noexcept { return nodes_.size(); }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer of a node, allocated as zeros on first use.
    Tensor<S>& grad(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad = Tensor<S>(n.value.extents(), S{0});
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    /// Reverse sweep seeded with d(loss)/d(loss) = seed_scale.
    void backward(Var<S> loss, S seed_scale = S{1}) {
        if (!loss.value().is_scalar()) {
            throw ContractError("backward requires a scalar loss, got extents " + format_extents(loss.extents()));
        }
        Tensor<S> seed(loss.extents(), seed_scale);
        backward_from(loss, seed);
    }

    /// Reverse sweep from an arbitrary node with an explicit upstream gradient.
    void backward_from(Var<S> out, const Tensor<S>& upstream) {
        if (upstream.extents() != out.extents()) {
            throw ShapeError("upstream gradient extents " + format_extents(upstream.extents()) +
                             " do not match node extents " + format_extents(out.extents()));
        }
        Tensor<S>& g = grad(out.id);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += upstream[i];
        for (std::size_t id = out.id + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
            if (!fault_op_.empty() && fault_op_ == n.op) {
                for (S& x : n.grad.storage()) x *= fault_factor_;
            }
            n.backward(*this, id);
        }
    }

    void clear_grads() {
        for (Node& n : nodes_) n.grad = Tensor<S>();
    }

    const std::vector<std::pair<std::size_t, std::size_t>>& bindings() const noexcept { return bindings_; }

    /// Scales the gradient flowing out of every node tagged `op`; used to
    /// verify that the gradient-check suite detects a broken rule.
    void inject_fault(std::string op, S factor) {
        fault_op_ = std::move(op);
        fault_factor_ = factor;
    }

private:
    Var<S> push_leaf(const char* op, Tensor<S> value, bool requires_grad) {
        Node node;
        node.op = op;
        node.value = std::move(value);
        node.requires_grad = requires_grad;
        nodes_.push_back(std::move(node));
        return Var<S>{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    std::vector<std::pair<std::size_t, std::size_t>> bindings_;
    std::string fault_op_;
    S fault_factor_ = S{1};
};

} // namespace gcg::ad
