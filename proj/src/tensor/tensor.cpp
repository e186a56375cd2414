#include "tpn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "tpn/parallel.hpp"

extern "C" void openblas_set_num_threads(int);

namespace tpn {

std::string Shape::str() const {
  std::ostringstream os;
  os << "(" << n << ", " << c << ", " << h << ", " << w << ")";
  return os.str();
}

namespace {
std::atomic<std::int64_t> g_current{0};
std::atomic<std::int64_t> g_peak{0};
int g_threads = 1;
}  // namespace

std::int64_t MemoryStats::current() { return g_current.load(); }
std::int64_t MemoryStats::peak() { return g_peak.load(); }
void MemoryStats::reset_peak() { g_peak.store(g_current.load()); }
void MemoryStats::add(std::int64_t bytes) {
  const auto now = g_current.fetch_add(bytes) + bytes;
  auto prev = g_peak.load();
  while (now > prev && !g_peak.compare_exchange_weak(prev, now)) {
  }
}
void MemoryStats::sub(std::int64_t bytes) { g_current.fetch_sub(bytes); }

void set_num_threads(int n) {
  g_threads = std::max(1, n);
#ifdef _OPENMP
  omp_set_num_threads(g_threads);
#endif
  openblas_set_num_threads(1);
}

int num_threads() { return g_threads; }

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : shape_(shape) {
  if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw ShapeError("negative tensor dimension " + shape.str());
  }
  data_.assign(static_cast<std::size_t>(shape.numel()), fill);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : shape_(shape) {
  if (static_cast<std::int64_t>(values.size()) != shape.numel()) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + shape.str());
  }
  data_.assign(values.begin(), values.end());
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
void Tensor<T>::add_(const Tensor& other) {
  if (!(shape_ == other.shape_)) {
    throw ShapeError("add_: shape mismatch " + shape_.str() + " vs " + other.shape_.str());
  }
  const T* src = other.data();
  T* dst = data_.data();
  const std::int64_t count = numel();
  for (std::int64_t i = 0; i < count; ++i) dst[i] += src[i];
}

template <typename T>
void Tensor<T>::scale_(T factor) {
  for (auto& v : data_) v *= factor;
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool bit_equal(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) return false;
  return std::memcmp(a.data(), b.data(), static_cast<std::size_t>(a.numel()) * sizeof(T)) == 0;
}

template <typename T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("max_abs_diff: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  }
  T worst = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

template class Tensor<float>;
template class Tensor<double>;
template bool bit_equal(const Tensor<float>&, const Tensor<float>&);
template bool bit_equal(const Tensor<double>&, const Tensor<double>&);
template float max_abs_diff(const Tensor<float>&, const Tensor<float>&);
template double max_abs_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace tpn
