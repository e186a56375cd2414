#include "tpn/params.hpp"

#include <cmath>

namespace tpn {

template <typename T>
Var<T> ParamRegistry<T>::add(const std::string& name, Tensor<T> value) {
  if (!names_.insert(name).second) throw std::invalid_argument("duplicate parameter name: " + name);
  Var<T> var(std::move(value), true);
  params_.push_back({name, var, false});
  return var;
}

template <typename T>
Var<T> ParamRegistry<T>::kaiming(const std::string& name, Shape shape, std::int64_t fan_in) {
  Tensor<T> value(shape);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : value) v = static_cast<T>(rng_.uniform(-bound, bound));
  return add(name, std::move(value));
}

template <typename T>
Var<T> ParamRegistry<T>::constant(const std::string& name, Shape shape, T value) {
  return add(name, Tensor<T>(shape, value));
}

template <typename T>
std::int64_t ParamRegistry<T>::count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.var.value().numel();
  return total;
}

template <typename T>
void ParamRegistry<T>::freeze_prefix(std::string_view prefix, bool frozen) {
  for (auto& p : params_) {
    if (std::string_view(p.name).substr(0, prefix.size()) == prefix) p.frozen = frozen;
  }
}

template <typename T>
void ParamRegistry<T>::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

template <typename T>
const Parameter<T>* ParamRegistry<T>::find(std::string_view name) const {
  for (const auto& p : params_) {
    if (p.name == name) return &p;
  }
  return nullptr;
}

template class ParamRegistry<float>;
template class ParamRegistry<double>;

}  // namespace tpn
