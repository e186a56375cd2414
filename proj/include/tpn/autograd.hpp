#pragma once

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a graph node. Ops create a node whose parents are
// the operands when any operand requires a gradient and grad mode is enabled.
// backward() on a scalar Var walks the graph in reverse topological order and
// accumulates into every reachable leaf's grad buffer; intermediate grads are
// released as soon as they have been propagated.

#include <functional>
#include <memory>
#include <vector>

#include "tpn/kernels.hpp"
#include "tpn/tensor.hpp"

namespace tpn {

template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.numel() > 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) { node_->requires_grad = flag; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer, allocated (zero) on first access.
  Tensor<T>& grad() { return node_->grad_buffer(); }
  const Tensor<T>& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }

  /// Seeds d(this)/d(this) = 1; requires a single-element value.
  void backward();

  /// Same value, no history.
  Var detach() const { return Var(node_->value, false); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled();

/// Disables graph construction on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Every conv2d executed through the autograd ops is reported to the active
/// observer (if any). Used by FLOP oracles and describe output.
struct ConvRecord {
  Shape input;
  Shape weight;
  Shape output;
  ConvGeometry geometry;
};

class ConvObserver {
 public:
  virtual ~ConvObserver() = default;
  virtual void on_conv(const ConvRecord& record) = 0;
};

class ConvObserverScope {
 public:
  explicit ConvObserverScope(ConvObserver* observer);
  ~ConvObserverScope();
  ConvObserverScope(const ConvObserverScope&) = delete;
  ConvObserverScope& operator=(const ConvObserverScope&) = delete;

 private:
  ConvObserver* previous_;
};

namespace ops {

/// `bias` may be an undefined Var.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geometry);

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, double eps = 1e-5);

template <typename T>
Var<T> relu(const Var<T>& x);

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w);

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);

template <typename T>
Var<T> scale(const Var<T>& x, double factor);

/// Fast normalized fusion: sum_i relu(w_i) / (sum_j relu(w_j) + eps) * x_i.
/// `weights` has shape (1, k, 1, 1) for k inputs.
template <typename T>
Var<T> weighted_fusion(const std::vector<Var<T>>& inputs, const Var<T>& weights, double eps = 1e-4);

/// Scalar sum of all elements.
template <typename T>
Var<T> sum(const Var<T>& x);

/// Scalar sum of x * coeffs (coeffs is a constant).
template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& coeffs);

/// Sigmoid focal loss summed over elements where mask != 0. targets in {0, 1}.
template <typename T>
Var<T> sigmoid_focal_loss(const Var<T>& logits, const Tensor<T>& targets, const Tensor<T>& mask, double alpha,
                          double gamma);

/// Smooth-L1 summed over elements where mask != 0; beta == 0 is plain L1.
template <typename T>
Var<T> smooth_l1_loss(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, double beta);

}  // namespace ops

extern template class Var<float>;
extern template class Var<double>;

}  // namespace tpn
