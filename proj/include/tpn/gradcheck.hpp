#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "tpn/autograd.hpp"

namespace tpn {

struct GradCheckOptions {
  double step = 1e-5;
  /// Probes per input tensor; <= 0 checks every element.
  int max_probes = -1;
  std::uint64_t seed = 0;
  /// Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-6;
};

struct GradCheckResult {
  double max_rel_error = 0;
  std::int64_t probes = 0;
  /// "input <i> element <j>: analytic <a> numeric <n>" for the worst probe.
  std::string worst;
};

using ScalarFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of a scalar function against central finite
/// differences. Inputs are switched to requires_grad and their grads are reset.
GradCheckResult grad_check(const ScalarFn& f, std::vector<Var<double>> inputs, const GradCheckOptions& opts = {});

}  // namespace tpn
