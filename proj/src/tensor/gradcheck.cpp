#include "tpn/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tpn/random.hpp"

namespace tpn {

GradCheckResult grad_check(const ScalarFn& f, std::vector<Var<double>> inputs, const GradCheckOptions& opts) {
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }
  Var<double> out = f(inputs);
  out.backward();

  std::vector<Tensor<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& in : inputs) analytic.push_back(in.has_grad() ? in.grad() : Tensor<double>(in.shape()));

  GradCheckResult result;
  Rng rng(opts.seed);
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    Tensor<double>& value = inputs[i].mutable_value();
    const std::int64_t count = value.numel();
    std::vector<std::int64_t> probes(static_cast<std::size_t>(count));
    std::iota(probes.begin(), probes.end(), 0);
    if (opts.max_probes > 0 && count > opts.max_probes) {
      // Partial Fisher-Yates: the first max_probes entries are a uniform sample.
      for (int p = 0; p < opts.max_probes; ++p) {
        const auto j = rng.uniform_int(p, count - 1);
        std::swap(probes[static_cast<std::size_t>(p)], probes[static_cast<std::size_t>(j)]);
      }
      probes.resize(static_cast<std::size_t>(opts.max_probes));
    }
    for (const std::int64_t j : probes) {
      const double saved = value[j];
      value[j] = saved + opts.step;
      const double plus = f(inputs).value()[0];
      value[j] = saved - opts.step;
      const double minus = f(inputs).value()[0];
      value[j] = saved;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double a = analytic[i][j];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), opts.floor});
      ++result.probes;
      if (err > result.max_rel_error || result.worst.empty()) {
        result.max_rel_error = std::max(result.max_rel_error, err);
        std::ostringstream os;
        os << "input " << i << " element " << j << ": analytic " << a << " numeric " << numeric;
        result.worst = os.str();
      }
    }
  }
  return result;
}

}  // namespace tpn
