#pragma once

// Production kernels: OpenMP over batch/channel/group, conv lowered to GEMM.
// Backward kernels accumulate (+=) into the gradient buffers they are given;
// pass nullptr to skip a gradient.
//
// Reduction order is fixed: per-sample partials are reduced in ascending batch
// index, so output does not depend on the worker count.

#include <cstdint>
#include <type_traits>
#include <vector>

#include "tpn/tensor.hpp"

namespace tpn {

struct ConvGeometry {
  int stride = 1;
  int padding = 0;
  int groups = 1;
};

/// floor((in + 2*padding - k) / stride) + 1; throws ShapeError if not positive.
std::int64_t conv_out_size(std::int64_t in, std::int64_t k, int stride, int padding);

/// Checks x/weight/bias compatibility and returns the output shape.
Shape conv_out_shape(const Shape& x, const Shape& weight, const ConvGeometry& g);

/// Per (sample, group) statistics saved by the forward pass.
template <typename T>
struct GroupNormStats {
  std::vector<T> mean;
  std::vector<T> rstd;
};

/// Half-pixel source coordinate table for one axis.
struct ResizeAxis {
  std::vector<std::int64_t> lo;
  std::vector<std::int64_t> hi;
  std::vector<double> frac;
};
ResizeAxis resize_axis(std::int64_t in, std::int64_t out);

// Optional-tensor pointers that do not take part in template deduction, so a
// bare nullptr can be passed.
template <typename T>
using MaybeConst = std::type_identity_t<const Tensor<T>*>;
template <typename T>
using MaybeGrad = std::type_identity_t<Tensor<T>*>;

namespace kernels {

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, MaybeConst<T> bias,
                         const ConvGeometry& g);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     const ConvGeometry& g, MaybeGrad<T> grad_x, MaybeGrad<T> grad_w, MaybeGrad<T> grad_b);

template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             int groups, double eps, std::type_identity_t<GroupNormStats<T>*> stats);
template <typename T>
void group_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, const GroupNormStats<T>& stats,
                         int groups, const Tensor<T>& grad_out, MaybeGrad<T> grad_x,
                         MaybeGrad<T> grad_gamma, MaybeGrad<T> grad_beta);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);
template <typename T>
void relu_backward(const Tensor<T>& x, const Tensor<T>& grad_out, MaybeGrad<T> grad_x);

template <typename T>
Tensor<T> resize_forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);
template <typename T>
void resize_backward(const Tensor<T>& grad_out, MaybeGrad<T> grad_x);

}  // namespace kernels

namespace ref {

// Serial loop-nest reference kernels. Slow, obvious, and used as test oracles
// and as the baseline in bench/kernel_bench.

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& weight, MaybeConst<T> bias,
                         const ConvGeometry& g);
template <typename T>
void conv2d_backward(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& grad_out,
                     const ConvGeometry& g, MaybeGrad<T> grad_x, MaybeGrad<T> grad_w, MaybeGrad<T> grad_b);

template <typename T>
Tensor<T> group_norm_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                             int groups, double eps);
template <typename T>
void group_norm_backward(const Tensor<T>& x, const Tensor<T>& gamma, int groups, double eps,
                         const Tensor<T>& grad_out, MaybeGrad<T> grad_x, MaybeGrad<T> grad_gamma,
                         MaybeGrad<T> grad_beta);

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x);

template <typename T>
Tensor<T> resize_forward(const Tensor<T>& x, std::int64_t out_h, std::int64_t out_w);
template <typename T>
void resize_backward(const Tensor<T>& grad_out, MaybeGrad<T> grad_x);

}  // namespace ref
}  // namespace tpn
