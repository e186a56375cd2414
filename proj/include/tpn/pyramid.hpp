#pragma once

#include <vector>

#include "tpn/autograd.hpp"

namespace tpn {

/// Maps P_min..P_max, level l at index l - min_level. Level l is 2^l times
/// smaller than the image per spatial dimension (ceil rounding via the conv rule).
template <typename T>
struct FeaturePyramid {
  int min_level = 3;
  std::vector<Var<T>> maps;

  int max_level() const { return min_level + static_cast<int>(maps.size()) - 1; }
  int levels() const { return static_cast<int>(maps.size()); }
  Var<T>& at(int level) { return maps.at(static_cast<std::size_t>(level - min_level)); }
  const Var<T>& at(int level) const { return maps.at(static_cast<std::size_t>(level - min_level)); }
};

}  // namespace tpn
