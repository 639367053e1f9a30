#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "tpseg/tensor.hpp"

namespace tpseg {

template <typename Scalar>
struct Node {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of `inputs`.
  std::function<void(Node&)> backward;

  Tensor<Scalar>& grad_buffer() {
    if (!has_grad) {
      grad = Tensor<Scalar>::zeros(value.shape());
      has_grad = true;
    }
    return grad;
  }
};

/// Handle to a value in the autograd graph. Copies share the node.
template <typename Scalar>
class Var {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}
  explicit Var(Tensor<Scalar> value, bool requires_grad = false)
      : node_(std::make_shared<Node<Scalar>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var parameter(Tensor<Scalar> value) { return Var(std::move(value), true); }
  static Var constant(Tensor<Scalar> value) { return Var(std::move(value), false); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const NodePtr& node() const noexcept { return node_; }

  const Tensor<Scalar>& value() const { return node_->value; }
  /// Leaves only; mutating an interior node does not re-run its consumers.
  Tensor<Scalar>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  Index size() const { return node_->value.size(); }
  Scalar item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && node_->has_grad; }

  /// Accumulated gradient; zeros when backward never reached this node.
  Tensor<Scalar> grad() const {
    if (node_->has_grad) return node_->grad;
    return Tensor<Scalar>::zeros(node_->value.shape());
  }

  void zero_grad() {
    node_->grad = Tensor<Scalar>();
    node_->has_grad = false;
  }

  Var detached() const { return Var(node_->value, false); }

 private:
  NodePtr node_;
};

/// Records operations in creation order for one backward replay. Constructing
/// a tape makes it the active tape of the calling thread until destruction.
template <typename Scalar>
class GradTape {
 public:
  using NodePtr = std::shared_ptr<Node<Scalar>>;

  GradTape() : previous_(active_) { active_ = this; }
  ~GradTape() { active_ = previous_; }
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active() noexcept { return active_; }

  void record(NodePtr node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. A tape can be
  /// replayed once.
  void backward(const Var<Scalar>& loss);

 private:
  friend class NoGradScope;
  std::vector<NodePtr> nodes_;
  GradTape* previous_;
  bool consumed_ = false;
  static thread_local GradTape* active_;
};

template <typename Scalar>
thread_local GradTape<Scalar>* GradTape<Scalar>::active_ = nullptr;

/// Disables recording for both precisions while alive.
class NoGradScope {
 public:
  NoGradScope() : f_(GradTape<float>::active_), d_(GradTape<double>::active_) {
    GradTape<float>::active_ = nullptr;
    GradTape<double>::active_ = nullptr;
  }
  ~NoGradScope() {
    GradTape<float>::active_ = f_;
    GradTape<double>::active_ = d_;
  }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  GradTape<float>* f_;
  GradTape<double>* d_;
};

template <typename Scalar>
void GradTape<Scalar>::backward(const Var<Scalar>& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (consumed_) throw Error("gradient tape already replayed");
  consumed_ = true;
  if (!loss.requires_grad()) return;
  loss.node()->grad_buffer()[0] += Scalar(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    Node<Scalar>& node = **it;
    if (node.has_grad && node.backward) node.backward(node);
  }
}

/// Backward on the calling thread's active tape.
template <typename Scalar>
void backward(const Var<Scalar>& loss) {
  auto* tape = GradTape<Scalar>::active();
  if (tape == nullptr) throw Error("backward called without an active gradient tape");
  tape->backward(loss);
}

/// Builds an op result. When a tape is active and any input requires grad the
/// node is recorded with `backward_fn`; otherwise it is a plain value.
template <typename Scalar, typename Fn>
Var<Scalar> make_op(Tensor<Scalar> value, std::vector<std::shared_ptr<Node<Scalar>>> inputs,
                    Fn&& backward_fn) {
  auto node = std::make_shared<Node<Scalar>>();
  node->value = std::move(value);
  auto* tape = GradTape<Scalar>::active();
  bool needs = false;
  if (tape != nullptr) {
    for (const auto& in : inputs) needs = needs || (in && in->requires_grad);
  }
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::forward<Fn>(backward_fn);
    tape->record(node);
  }
  return Var<Scalar>(std::move(node));
}

}  // namespace tpseg
