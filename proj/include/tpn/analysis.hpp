#pragma once

// Cost models: parameter tables, convolution FLOP counts, wall-clock latency
// and the (L, B) sweep.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include "tpn/model.hpp"
#include "tpn/train.hpp"

namespace tpn {

// ---------------------------------------------------------------- parameters

struct ModuleCount {
  std::string module;  // backbone, stem, core, head
  std::int64_t count = 0;
  std::int64_t trainable = 0;
};

struct ParamTable {
  std::vector<ModuleCount> rows;
  std::int64_t total = 0;
  std::int64_t trainable = 0;

  std::int64_t of(const std::string& module) const;
};

/// Closed forms, no allocation. Frozen parameters are part of `count`.
ParamTable count_params(const ModelSpec& spec);

/// Builds the model and sums its registered tensors by name prefix.
ParamTable enumerate_params(const ModelSpec& spec);

/// module,count with a final "total" row.
void write_params_csv(std::ostream& os, const ParamTable& table);

// ---------------------------------------------------------------- FLOPs

struct ConvCost {
  std::string module;
  std::string name;
  int in_c = 0;
  int out_c = 0;
  int kernel = 1;
  int stride = 1;
  int groups = 1;
  std::int64_t out_h = 0;
  std::int64_t out_w = 0;

  std::int64_t macs() const {
    return static_cast<std::int64_t>(out_c) * (in_c / groups) * kernel * kernel * out_h * out_w;
  }
};

/// (h, w) of P3..P7.
using PyramidSizes = std::vector<std::pair<std::int64_t, std::int64_t>>;

/// Level sizes produced by the model's backbone and stem for an h x w image.
PyramidSizes pyramid_sizes(const ModelSpec& spec, std::int64_t h, std::int64_t w);

std::vector<ConvCost> backbone_convs(BackboneKind kind, std::int64_t h, std::int64_t w);
std::vector<ConvCost> stem_convs(const ModelSpec& spec, std::int64_t h, std::int64_t w);
/// Every conv the core executes on a pyramid of the given level sizes.
std::vector<ConvCost> core_convs(const CoreSpec& spec, const PyramidSizes& sizes);
std::vector<ConvCost> head_convs(const HeadSpec& spec, const PyramidSizes& sizes);

/// Backbone, stem, core and head convs for one h x w image, in execution order
/// within each module.
std::vector<ConvCost> conv_inventory(const ModelSpec& spec, std::int64_t h, std::int64_t w);

inline std::int64_t flops_of(const std::vector<ConvCost>& convs) {
  std::int64_t macs = 0;
  for (const auto& c : convs) macs += c.macs();
  return 2 * macs;
}

struct FlopReport {
  std::vector<std::pair<std::string, std::int64_t>> modules;
  std::int64_t total = 0;

  std::int64_t of(const std::string& module) const;
};

/// 2 * MACs over every convolution for one image. Norms, activations, resizes
/// and additions are not counted. Throws std::invalid_argument unless h and w
/// are positive multiples of 32.
FlopReport count_flops(const ModelSpec& spec, std::int64_t h, std::int64_t w);

/// module,flops with a final "total" row.
void write_flops_csv(std::ostream& os, const FlopReport& report);

// ---------------------------------------------------------------- latency

enum class BenchMode { Train, Infer };
BenchMode parse_bench_mode(const std::string& name);
std::string to_string(BenchMode mode);

struct LatencyConfig {
  int batch = 1;
  int size = 64;
  int iters = 5;
  int warmup = 3;
  BenchMode mode = BenchMode::Infer;
  std::uint64_t seed = 0;
};

struct LatencyResult {
  double fps = 0;       // images per second at the median iteration time
  double median_s = 0;  // per iteration (whole batch)
  double min_s = 0;
  double max_s = 0;
  /// (max - min) / median over the timed iterations.
  double spread = 0;
  std::int64_t peak_bytes = 0;
  int threads = 1;
};

/// Infer: one forward pass without graph. Train: forward, loss, backward and an
/// AdamW step on synthetic scenes. The model's parameters change in train mode.
template <typename T>
LatencyResult latency_bench(Model<T>& model, const LatencyConfig& cfg);

/// mode,batch,size,threads,iters,fps,median_s,spread,peak_bytes
void write_latency_csv(std::ostream& os, const LatencyConfig& cfg, const LatencyResult& r);

// ---------------------------------------------------------------- sweep

struct SweepConfig {
  std::vector<std::pair<int, int>> grid;  // (L, B)
  ModelSpec base;                         // core kind and sizes; L and B are overwritten
  int images = 8;
  int size = 64;
  TrainConfig train;
  int bench_iters = 3;
  std::uint64_t seed = 0;

  /// {"model": {...}, "grid": [[L, B], ...], "images": 8, "size": 64,
  ///  "bench_iters": 3, "train": {...}}. Throws ConfigError.
  static SweepConfig from_json(const nlohmann::json& j);
};

struct SweepRow {
  int layers = 0;
  int bottlenecks = 0;
  std::int64_t params = 0;
  double gflops = 0;
  double tfps = 0;
  double ifps = 0;
  /// AP50 on the training scenes after the run.
  double metric = 0;
  double final_loss = 0;
};

/// One toy training run per grid point, all from the same seed.
std::vector<SweepRow> sweep(const SweepConfig& cfg, const std::function<void(const SweepRow&)>& progress = {});

/// L,B,params,gflops,tfps,ifps,metric
void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows);

}  // namespace tpn
