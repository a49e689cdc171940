#pragma once

#include <cassert>
#include <deque>
#include <functional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "s3tu/tensor.hpp"

namespace s3tu {

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape& tape() const {
        assert(tape_ != nullptr);
        return *tape_;
    }
    std::size_t id() const noexcept { return id_; }
    bool valid() const noexcept { return tape_ != nullptr; }

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t dim(std::size_t axis) const { return value().dim(axis); }
    bool requires_grad() const;

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Reverse-mode record of one forward pass. Nodes are appended in execution order, so
/// every node's inputs precede it. One tape per step; never shared across threads.
class Tape {
public:
    /// Receives the gradient of the loss w.r.t. this node's output and accumulates
    /// contributions into the node's inputs via Tape::accumulate.
    using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(value), requires_grad, nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var constant(Tensor value) { return leaf(std::move(value), false); }

    /// Records an op output. The backward rule is kept only if some input needs a gradient.
    Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    Var record(Tensor value, const std::vector<Var>& inputs, BackwardFn backward) {
        bool needs = false;
        for (const auto& in : inputs) needs = needs || in.requires_grad();
        nodes_.push_back(Node{std::move(value), needs, needs ? std::move(backward) : nullptr});
        return Var(this, nodes_.size() - 1);
    }

    /// A new leaf holding the same value with no gradient connection.
    Var detach(const Var& v) { return constant(v.value()); }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    void accumulate(std::size_t id, const Tensor& g) {
        if (!nodes_[id].requires_grad) return;
        ensure_grads();
        auto& dst = grads_[id];
        if (dst.empty()) {
            dst = g;
            return;
        }
        add_into(dst, g, id);
    }

    void accumulate(std::size_t id, Tensor&& g) {
        if (!nodes_[id].requires_grad) return;
        ensure_grads();
        auto& dst = grads_[id];
        if (dst.empty()) {
            dst = std::move(g);
            return;
        }
        add_into(dst, g, id);
    }

    /// Propagates d(loss)/d(node) for every node that requires a gradient.
    void backward(const Var& loss) {
        if (loss.value().numel() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
        grads_.assign(nodes_.size(), Tensor{});
        if (!nodes_[loss.id()].requires_grad) return;
        grads_[loss.id()] = Tensor(loss.shape(), 1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            if (grads_[i].empty() || !nodes_[i].backward) continue;
            nodes_[i].backward(*this, grads_[i]);
            // Interior gradients are no longer needed once propagated; leaves keep theirs.
            grads_[i] = Tensor{};
        }
    }

    bool has_grad(const Var& v) const { return v.id() < grads_.size() && !grads_[v.id()].empty(); }

    /// Gradient of the last backward() loss w.r.t. v; zeros if v did not influence the loss.
    Tensor grad(const Var& v) const {
        if (has_grad(v)) return grads_[v.id()];
        return Tensor::zeros(v.shape());
    }

private:
    struct Node {
        Tensor value;
        bool requires_grad;
        BackwardFn backward;
    };

    void ensure_grads() {
        if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    }

    void add_into(Tensor& dst, const Tensor& g, std::size_t id) const {
        if (dst.shape() != g.shape())
            throw ShapeError("gradient shape " + to_string(g.shape()) + " does not match node " +
                             std::to_string(id) + " shape " + to_string(dst.shape()));
        auto d = dst.data();
        auto s = g.data();
        for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    }

    std::deque<Node> nodes_;  // deque: values stay put while the tape grows
    std::vector<Tensor> grads_;
};

inline const Tensor& Var::value() const { return tape().value(id_); }
inline bool Var::requires_grad() const { return tape().requires_grad(id_); }

}  // namespace s3tu
