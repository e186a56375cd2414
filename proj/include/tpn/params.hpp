#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "tpn/autograd.hpp"
#include "tpn/random.hpp"

namespace tpn {

/// A named trainable tensor. Frozen parameters still receive gradients but the
/// optimizer leaves them untouched.
template <typename T>
struct Parameter {
  std::string name;
  Var<T> var;
  bool frozen = false;
};

/// Owns every parameter of a model in construction order and hands out
/// initialized leaves. Initialization draws from one seeded stream, so the same
/// seed and construction order give bit-identical parameters.
template <typename T>
class ParamRegistry {
 public:
  explicit ParamRegistry(std::uint64_t seed = 0) : rng_(seed) {}

  /// Fan-in scaled uniform: U(-sqrt(6/fan_in), sqrt(6/fan_in)).
  Var<T> kaiming(const std::string& name, Shape shape, std::int64_t fan_in);
  Var<T> constant(const std::string& name, Shape shape, T value);

  std::vector<Parameter<T>>& params() { return params_; }
  const std::vector<Parameter<T>>& params() const { return params_; }
  std::int64_t count() const;

  /// Marks every parameter whose name starts with `prefix` as frozen.
  void freeze_prefix(std::string_view prefix, bool frozen = true);
  void zero_grad();

  const Parameter<T>* find(std::string_view name) const;

 private:
  Var<T> add(const std::string& name, Tensor<T> value);

  std::vector<Parameter<T>> params_;
  std::set<std::string, std::less<>> names_;
  Rng rng_;
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

extern template class ParamRegistry<float>;
extern template class ParamRegistry<double>;

}  // namespace tpn
