#pragma once

#include "aegan/tensor.hpp"

#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace aegan::nn {

template <typename Scalar>
struct Node {
    Tensor<Scalar> value;
    Tensor<Scalar> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    /// Pushes this node's grad into its parents' grads.
    std::function<void(Node&)> backward;

    Tensor<Scalar>& grad_buffer() {
        if (grad.empty()) grad = Tensor<Scalar>::zeros_like(value);
        return grad;
    }
};

/// Shared handle to a graph node. Copies alias the same node.
template <typename Scalar>
class Var {
public:
    Var() = default;
    explicit Var(Tensor<Scalar> value, bool requires_grad = false) : node_(std::make_shared<Node<Scalar>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }
    explicit Var(std::shared_ptr<Node<Scalar>> node) : node_(std::move(node)) {}

    explicit operator bool() const noexcept { return static_cast<bool>(node_); }

    const Tensor<Scalar>& value() const { return node_->value; }
    /// Direct write access, for parameter updates and tests.
    Tensor<Scalar>& mutable_value() { return node_->value; }
    const Tensor<Scalar>& grad() const { return node_->grad; }
    Tensor<Scalar>& grad_buffer() { return node_->grad_buffer(); }
    bool has_grad() const { return !node_->grad.empty(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    void zero_grad() { node_->grad = Tensor<Scalar>(); }

    /// Same value, cut from the graph.
    Var detach() const { return Var(node_->value, false); }

    const std::shared_ptr<Node<Scalar>>& node() const noexcept { return node_; }

private:
    std::shared_ptr<Node<Scalar>> node_;
};

/// Whether new ops record a backward graph (thread-local).
bool grad_enabled() noexcept;
void set_grad_enabled(bool on) noexcept;

class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled()) { set_grad_enabled(false); }
    ~NoGradGuard() { set_grad_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Result node for an op. The backward closure is kept only when grad mode
/// is on and some parent requires grad.
template <typename Scalar, typename Backward>
Var<Scalar> make_result(Tensor<Scalar> value, std::vector<Var<Scalar>> parents, Backward&& backward) {
    bool needs = false;
    if (grad_enabled())
        for (const auto& p : parents) needs = needs || p.requires_grad();
    Var<Scalar> out(std::move(value), needs);
    if (needs) {
        auto& node = *out.node();
        node.parents.reserve(parents.size());
        for (auto& p : parents) node.parents.push_back(p.node());
        node.backward = std::forward<Backward>(backward);
    }
    return out;
}

/// Reverse-mode sweep from a one-element `loss`; grads accumulate in leaves.
template <typename Scalar>
void backward(const Var<Scalar>& loss);

} // namespace aegan::nn
