// Serial reference kernels against the OpenMP/BLAS kernels on core-sized shapes.
// Run with OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include "tpn/kernels.hpp"
#include "tpn/random.hpp"

namespace {

using tpn::ConvGeometry;
using tpn::Shape;
using tpn::Tensor;

Tensor<float> noise(const Shape& s, std::uint64_t seed) {
  tpn::Rng rng(seed);
  Tensor<float> t(s);
  for (float& v : t) v = static_cast<float>(rng.normal());
  return t;
}

// args: channels, spatial side, kernel, stride
template <bool Ref>
void BM_Conv2dForward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto side = state.range(1);
  const auto k = state.range(2);
  const ConvGeometry g{static_cast<int>(state.range(3)), static_cast<int>(k / 2), 1};
  const auto x = noise({2, c, side, side}, 1);
  const auto w = noise({c, c, k, k}, 2);
  const auto b = noise({1, c, 1, 1}, 3);
  for (auto _ : state) {
    auto y = Ref ? tpn::ref::conv2d_forward(x, w, &b, g) : tpn::kernels::conv2d_forward(x, w, &b, g);
    benchmark::DoNotOptimize(y.data());
  }
  const auto out = tpn::conv_out_size(side, k, g.stride, g.padding);
  state.counters["FLOP/s"] = benchmark::Counter(static_cast<double>(2 * 2 * c * c * k * k * out * out),
                                                 benchmark::Counter::kIsIterationInvariantRate, benchmark::Counter::kIs1000);
}

template <bool Ref>
void BM_Conv2dBackward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto side = state.range(1);
  const auto k = state.range(2);
  const ConvGeometry g{static_cast<int>(state.range(3)), static_cast<int>(k / 2), 1};
  const auto x = noise({2, c, side, side}, 1);
  const auto w = noise({c, c, k, k}, 2);
  const auto gy = noise(tpn::conv_out_shape(x.shape(), w.shape(), g), 3);
  Tensor<float> gx(x.shape()), gw(w.shape()), gb({1, c, 1, 1});
  for (auto _ : state) {
    if (Ref) {
      tpn::ref::conv2d_backward(x, w, gy, g, &gx, &gw, &gb);
    } else {
      tpn::kernels::conv2d_backward(x, w, gy, g, &gx, &gw, &gb);
    }
    benchmark::DoNotOptimize(gx.data());
  }
}

template <bool Ref>
void BM_GroupNormForward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto side = state.range(1);
  const auto x = noise({2, c, side, side}, 4);
  const Tensor<float> gamma({1, c, 1, 1}, 1.0f), beta({1, c, 1, 1}, 0.0f);
  for (auto _ : state) {
    auto y = Ref ? tpn::ref::group_norm_forward(x, gamma, beta, 8, 1e-5)
                 : tpn::kernels::group_norm_forward(x, gamma, beta, 8, 1e-5, nullptr);
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Ref>
void BM_ResizeForward(benchmark::State& state) {
  const auto c = state.range(0);
  const auto side = state.range(1);
  const auto x = noise({2, c, side, side}, 5);
  for (auto _ : state) {
    auto y = Ref ? tpn::ref::resize_forward(x, 2 * side, 2 * side) : tpn::kernels::resize_forward(x, 2 * side, 2 * side);
    benchmark::DoNotOptimize(y.data());
  }
}

void conv_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 32, 1, 1})->Args({64, 32, 3, 1})->Args({64, 32, 3, 2})->Args({128, 16, 3, 1});
  b->ArgNames({"C", "side", "k", "stride"})->Unit(benchmark::kMillisecond);
}

void map_shapes(benchmark::internal::Benchmark* b) {
  b->Args({64, 32})->Args({256, 16})->ArgNames({"C", "side"})->Unit(benchmark::kMicrosecond);
}

BENCHMARK(BM_Conv2dForward<true>)->Name("ref/conv2d_forward")->Apply(conv_shapes);
BENCHMARK(BM_Conv2dForward<false>)->Name("omp/conv2d_forward")->Apply(conv_shapes);
BENCHMARK(BM_Conv2dBackward<true>)->Name("ref/conv2d_backward")->Apply(conv_shapes);
BENCHMARK(BM_Conv2dBackward<false>)->Name("omp/conv2d_backward")->Apply(conv_shapes);
BENCHMARK(BM_GroupNormForward<true>)->Name("ref/group_norm_forward")->Apply(map_shapes);
BENCHMARK(BM_GroupNormForward<false>)->Name("omp/group_norm_forward")->Apply(map_shapes);
BENCHMARK(BM_ResizeForward<true>)->Name("ref/resize_forward")->Apply(map_shapes);
BENCHMARK(BM_ResizeForward<false>)->Name("omp/resize_forward")->Apply(map_shapes);

}  // namespace

BENCHMARK_MAIN();
