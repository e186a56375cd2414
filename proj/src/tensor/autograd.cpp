#include "tpn/autograd.hpp"

#include <cmath>
#include <unordered_set>

namespace tpn {

namespace {
thread_local bool t_grad_enabled = true;
thread_local ConvObserver* t_conv_observer = nullptr;

template <typename T>
bool needs_graph(std::initializer_list<const Var<T>*> operands) {
  if (!t_grad_enabled) return false;
  for (const Var<T>* v : operands) {
    if (v != nullptr && v->defined() && v->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<std::shared_ptr<Node<T>>> parents,
                   std::function<void(Node<T>&)> backward_fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->parents = std::move(parents);
  node->backward_fn = std::move(backward_fn);
  return Var<T>(std::move(node));
}

template <typename T>
Var<T> constant_result(Tensor<T> value) {
  return Var<T>(std::move(value), false);
}

template <typename T>
bool wants(const std::shared_ptr<Node<T>>& node) {
  return node != nullptr && node->requires_grad;
}
}  // namespace

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

ConvObserverScope::ConvObserverScope(ConvObserver* observer) : previous_(t_conv_observer) {
  t_conv_observer = observer;
}
ConvObserverScope::~ConvObserverScope() { t_conv_observer = previous_; }

template <typename T>
Var<T>::Var(Tensor<T> value, bool requires_grad) : node_(std::make_shared<Node<T>>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

template <typename T>
void Var<T>::backward() {
  if (node_->value.numel() != 1) throw ShapeError("backward: root must be a scalar, got " + shape().str());
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<T>* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  node_->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    node->grad = Tensor<T>();
  }
}

namespace ops {

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, const ConvGeometry& geometry) {
  Tensor<T> out = kernels::conv2d_forward(x.value(), weight.value(), bias.defined() ? &bias.value() : nullptr, geometry);
  if (t_conv_observer != nullptr) {
    t_conv_observer->on_conv({x.shape(), weight.shape(), out.shape(), geometry});
  }
  if (!needs_graph<T>({&x, &weight, &bias})) return constant_result(std::move(out));
  std::vector<std::shared_ptr<Node<T>>> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return make_result<T>(std::move(out), std::move(parents), [geometry](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pw = self.parents[1];
    Tensor<T>* gb = nullptr;
    if (self.parents.size() > 2 && wants(self.parents[2])) gb = &self.parents[2]->grad_buffer();
    kernels::conv2d_backward(px->value, pw->value, self.grad, geometry, wants(px) ? &px->grad_buffer() : nullptr,
                             wants(pw) ? &pw->grad_buffer() : nullptr, gb);
  });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, int groups, double eps) {
  auto stats = std::make_shared<GroupNormStats<T>>();
  Tensor<T> out = kernels::group_norm_forward(x.value(), gamma.value(), beta.value(), groups, eps, stats.get());
  if (!needs_graph<T>({&x, &gamma, &beta})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node(), gamma.node(), beta.node()}, [groups, stats](Node<T>& self) {
    auto& px = self.parents[0];
    auto& pg = self.parents[1];
    auto& pb = self.parents[2];
    kernels::group_norm_backward(px->value, pg->value, *stats, groups, self.grad,
                                 wants(px) ? &px->grad_buffer() : nullptr, wants(pg) ? &pg->grad_buffer() : nullptr,
                                 wants(pb) ? &pb->grad_buffer() : nullptr);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = kernels::relu_forward(x.value());
  if (!needs_graph<T>({&x})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    auto& px = self.parents[0];
    kernels::relu_backward(px->value, self.grad, &px->grad_buffer());
  });
}

template <typename T>
Var<T> bilinear_resize(const Var<T>& x, std::int64_t out_h, std::int64_t out_w) {
  Tensor<T> out = kernels::resize_forward(x.value(), out_h, out_w);
  if (!needs_graph<T>({&x})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    auto& px = self.parents[0];
    kernels::resize_backward(self.grad, &px->grad_buffer());
  });
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!(a.shape() == b.shape())) throw ShapeError("add: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  Tensor<T> out = a.value();
  out.add_(b.value());
  if (!needs_graph<T>({&a, &b})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (wants(p)) p->grad_buffer().add_(self.grad);
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& x, double factor) {
  Tensor<T> out = x.value();
  out.scale_(static_cast<T>(factor));
  if (!needs_graph<T>({&x})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node()}, [factor](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += static_cast<T>(factor) * self.grad[i];
  });
}

template <typename T>
Var<T> weighted_fusion(const std::vector<Var<T>>& inputs, const Var<T>& weights, double eps) {
  const auto k = static_cast<std::int64_t>(inputs.size());
  if (k == 0) throw ShapeError("weighted_fusion: no inputs");
  if (weights.value().numel() != k) throw ShapeError("weighted_fusion: weight count does not match input count");
  const Shape s = inputs.front().shape();
  for (const auto& in : inputs) {
    if (!(in.shape() == s)) throw ShapeError("weighted_fusion: input shape mismatch");
  }
  const Tensor<T>& w = weights.value();
  double denom = eps;
  for (std::int64_t i = 0; i < k; ++i) denom += std::max(0.0, static_cast<double>(w[i]));
  Tensor<T> out(s);
  for (std::int64_t i = 0; i < k; ++i) {
    const T coeff = static_cast<T>(std::max(0.0, static_cast<double>(w[i])) / denom);
    const Tensor<T>& src = inputs[static_cast<std::size_t>(i)].value();
    for (std::int64_t j = 0; j < out.numel(); ++j) out[j] += coeff * src[j];
  }

  bool any = needs_graph<T>({&weights});
  for (const auto& in : inputs) any = any || needs_graph<T>({&in});
  if (!any) return constant_result(std::move(out));

  std::vector<std::shared_ptr<Node<T>>> parents{weights.node()};
  for (const auto& in : inputs) parents.push_back(in.node());
  return make_result<T>(std::move(out), std::move(parents), [k, denom](Node<T>& self) {
    auto& pw = self.parents[0];
    const Tensor<T>& w = pw->value;
    for (std::int64_t i = 0; i < k; ++i) {
      auto& px = self.parents[static_cast<std::size_t>(i + 1)];
      const double wi = w[i];
      const T coeff = static_cast<T>(std::max(0.0, wi) / denom);
      if (wants(px)) {
        Tensor<T>& g = px->grad_buffer();
        for (std::int64_t j = 0; j < g.numel(); ++j) g[j] += coeff * self.grad[j];
      }
      if (wants(pw) && wi > 0.0) {
        // d out / d w_i = (x_i - out) / denom
        double acc = 0;
        for (std::int64_t j = 0; j < self.value.numel(); ++j) {
          acc += static_cast<double>(self.grad[j]) * (static_cast<double>(px->value[j]) - self.value[j]);
        }
        pw->grad_buffer()[i] += static_cast<T>(acc / denom);
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  double acc = 0;
  for (std::int64_t i = 0; i < x.value().numel(); ++i) acc += x.value()[i];
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(acc));
  if (!needs_graph<T>({&x})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node()}, [](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    const T seed = self.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed;
  });
}

template <typename T>
Var<T> weighted_sum(const Var<T>& x, const Tensor<T>& coeffs) {
  if (!(x.shape() == coeffs.shape())) throw ShapeError("weighted_sum: shape mismatch");
  double acc = 0;
  for (std::int64_t i = 0; i < coeffs.numel(); ++i) acc += static_cast<double>(x.value()[i]) * coeffs[i];
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(acc));
  if (!needs_graph<T>({&x})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {x.node()}, [coeffs](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    const T seed = self.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed * coeffs[i];
  });
}

namespace {
struct FocalTerm {
  double loss;
  double grad;
};

// Focal loss for one logit z with binary target t.
FocalTerm focal_term(double z, double t, double alpha, double gamma) {
  const double p = 1.0 / (1.0 + std::exp(-z));
  const double ce = std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
  const double p_t = p * t + (1.0 - p) * (1.0 - t);
  const double alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t);
  const double one_minus = 1.0 - p_t;
  const double mod = std::pow(one_minus, gamma);
  const double dpt_dz = (2.0 * t - 1.0) * p * (1.0 - p);
  const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(one_minus, gamma - 1.0) * dpt_dz;
  return {alpha_t * mod * ce, alpha_t * (dmod * ce + mod * (p - t))};
}
}  // namespace

template <typename T>
Var<T> sigmoid_focal_loss(const Var<T>& logits, const Tensor<T>& targets, const Tensor<T>& mask, double alpha,
                          double gamma) {
  if (!(logits.shape() == targets.shape()) || !(logits.shape() == mask.shape())) {
    throw ShapeError("sigmoid_focal_loss: shape mismatch");
  }
  const std::int64_t count = logits.value().numel();
  auto grads = std::make_shared<std::vector<T>>(static_cast<std::size_t>(count), T(0));
  double acc = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    if (mask[i] == T(0)) continue;
    const FocalTerm term = focal_term(logits.value()[i], targets[i], alpha, gamma);
    acc += term.loss;
    (*grads)[static_cast<std::size_t>(i)] = static_cast<T>(term.grad);
  }
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(acc));
  if (!needs_graph<T>({&logits})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {logits.node()}, [grads](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    const T seed = self.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed * (*grads)[static_cast<std::size_t>(i)];
  });
}

template <typename T>
Var<T> smooth_l1_loss(const Var<T>& pred, const Tensor<T>& target, const Tensor<T>& mask, double beta) {
  if (!(pred.shape() == target.shape()) || !(pred.shape() == mask.shape())) {
    throw ShapeError("smooth_l1_loss: shape mismatch");
  }
  const std::int64_t count = pred.value().numel();
  auto grads = std::make_shared<std::vector<T>>(static_cast<std::size_t>(count), T(0));
  double acc = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    if (mask[i] == T(0)) continue;
    const double d = static_cast<double>(pred.value()[i]) - target[i];
    const double a = std::abs(d);
    double g = 0;
    if (beta > 0.0 && a < beta) {
      acc += 0.5 * d * d / beta;
      g = d / beta;
    } else {
      acc += a - 0.5 * beta;
      g = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
    }
    (*grads)[static_cast<std::size_t>(i)] = static_cast<T>(g);
  }
  Tensor<T> out({1, 1, 1, 1}, static_cast<T>(acc));
  if (!needs_graph<T>({&pred})) return constant_result(std::move(out));
  return make_result<T>(std::move(out), {pred.node()}, [grads](Node<T>& self) {
    Tensor<T>& g = self.parents[0]->grad_buffer();
    const T seed = self.grad[0];
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += seed * (*grads)[static_cast<std::size_t>(i)];
  });
}

#define TPN_INSTANTIATE_OPS(T)                                                                                     \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, const ConvGeometry&);                        \
  template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, int, double);                            \
  template Var<T> relu(const Var<T>&);                                                                             \
  template Var<T> bilinear_resize(const Var<T>&, std::int64_t, std::int64_t);                                      \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                               \
  template Var<T> scale(const Var<T>&, double);                                                                    \
  template Var<T> weighted_fusion(const std::vector<Var<T>>&, const Var<T>&, double);                              \
  template Var<T> sum(const Var<T>&);                                                                              \
  template Var<T> weighted_sum(const Var<T>&, const Tensor<T>&);                                                   \
  template Var<T> sigmoid_focal_loss(const Var<T>&, const Tensor<T>&, const Tensor<T>&, double, double);           \
  template Var<T> smooth_l1_loss(const Var<T>&, const Tensor<T>&, const Tensor<T>&, double);

TPN_INSTANTIATE_OPS(float)
TPN_INSTANTIATE_OPS(double)
#undef TPN_INSTANTIATE_OPS

}  // namespace ops

template class Var<float>;
template class Var<double>;

}  // namespace tpn
