#include "tpn/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ostream>
#include <set>

#include "tpn/parallel.hpp"

namespace tpn {

// ---------------------------------------------------------------- parameters

namespace {

const char* const kModules[] = {"backbone", "stem", "core", "head"};

std::int64_t lookup(const std::vector<std::pair<std::string, std::int64_t>>& rows, const std::string& key) {
  for (const auto& [k, v] : rows) {
    if (k == key) return v;
  }
  throw std::out_of_range("no module '" + key + "'");
}

}  // namespace

std::int64_t ParamTable::of(const std::string& module) const {
  for (const auto& r : rows) {
    if (r.module == module) return r.count;
  }
  throw std::out_of_range("no module '" + module + "'");
}

ParamTable count_params(const ModelSpec& spec) {
  spec.validate();
  const BackboneSpec bb = make_backbone_spec(spec.backbone);
  const BackboneCount b = count_backbone_params(bb);
  ParamTable t;
  t.rows.push_back({"backbone", b.total, b.total - b.frozen});
  const std::int64_t stem = PyramidStem<float>::param_count(bb.out_channels(), spec.core.sizes.feature_size);
  t.rows.push_back({"stem", stem, stem});
  const std::int64_t core = core_param_count(spec.core);
  t.rows.push_back({"core", core, core});
  const std::int64_t head = head_param_count(spec.head);
  t.rows.push_back({"head", head, head});
  for (const auto& r : t.rows) {
    t.total += r.count;
    t.trainable += r.trainable;
  }
  return t;
}

ParamTable enumerate_params(const ModelSpec& spec) {
  const Model<float> model(spec, 0);
  ParamTable t;
  for (const char* m : kModules) t.rows.push_back({m, 0, 0});
  for (const auto& p : model.registry.params()) {
    const std::string module = p.name.substr(0, p.name.find('.'));
    auto it = std::find_if(t.rows.begin(), t.rows.end(), [&](const ModuleCount& r) { return r.module == module; });
    if (it == t.rows.end()) throw std::logic_error("parameter outside the known modules: " + p.name);
    const std::int64_t n = p.var.value().numel();
    it->count += n;
    if (!p.frozen) it->trainable += n;
    t.total += n;
    if (!p.frozen) t.trainable += n;
  }
  return t;
}

void write_params_csv(std::ostream& os, const ParamTable& table) {
  os << "module,count\n";
  for (const auto& r : table.rows) os << r.module << "," << r.count << "\n";
  os << "total," << table.total << "\n";
}

// ---------------------------------------------------------------- FLOPs

namespace {

std::int64_t down2(std::int64_t n) { return conv_out_size(n, 3, 2, 1); }

ConvCost make_conv(const std::string& module, const std::string& name, int in_c, int out_c, int kernel, int stride,
                   std::int64_t out_h, std::int64_t out_w, int groups = 1) {
  return {module, name, in_c, out_c, kernel, stride, groups, out_h, out_w};
}

std::vector<ConvCost> tiny_convs(std::int64_t h, std::int64_t w) {
  using TB = TinyBackbone<float>;
  std::vector<ConvCost> out;
  h = down2(h);
  w = down2(w);
  out.push_back(make_conv("backbone", "backbone.stem", 3, TB::kStemChannels, 3, 2, h, w));
  h = down2(h);
  w = down2(w);
  out.push_back(make_conv("backbone", "backbone.down", TB::kStemChannels, TB::kStageChannels[0], 3, 2, h, w));
  int in_c = TB::kStageChannels[0];
  for (int s = 0; s < 3; ++s) {
    const int c = TB::kStageChannels[static_cast<std::size_t>(s)];
    for (int b = 0; b < 2; ++b) {
      const std::string p = "backbone.stage" + std::to_string(s + 1) + ".block" + std::to_string(b);
      const int stride = b == 0 ? 2 : 1;
      if (stride == 2) {
        h = down2(h);
        w = down2(w);
        out.push_back(make_conv("backbone", p + ".shortcut", in_c, c, 1, 2, h, w));
      }
      out.push_back(make_conv("backbone", p + ".a", b == 0 ? in_c : c, c, 3, stride, h, w));
      out.push_back(make_conv("backbone", p + ".b", c, c, 3, 1, h, w));
    }
    in_c = c;
  }
  return out;
}

/// (h, w) of C3..C5.
std::array<std::pair<std::int64_t, std::int64_t>, 3> backbone_outputs(BackboneKind kind, std::int64_t h,
                                                                      std::int64_t w) {
  std::array<std::pair<std::int64_t, std::int64_t>, 3> c{};
  if (kind == BackboneKind::Tiny) {
    for (int i = 0; i < 3; ++i) {
      h = down2(h);
      w = down2(w);
    }
    for (auto& s : c) {
      s = {h, w};
      h = down2(h);
      w = down2(w);
    }
    return c;
  }
  for (const auto& conv : resnet_convs(make_backbone_spec(kind), h, w)) {
    if (conv.stage >= 2) c[static_cast<std::size_t>(conv.stage - 2)] = {conv.out_h, conv.out_w};
  }
  return c;
}

}  // namespace

PyramidSizes pyramid_sizes(const ModelSpec& spec, std::int64_t h, std::int64_t w) {
  const auto c = backbone_outputs(spec.backbone, h, w);
  PyramidSizes p(c.begin(), c.end());
  p.push_back({down2(c[2].first), down2(c[2].second)});
  p.push_back({down2(p[3].first), down2(p[3].second)});
  return p;
}

std::vector<ConvCost> backbone_convs(BackboneKind kind, std::int64_t h, std::int64_t w) {
  if (kind == BackboneKind::Tiny) return tiny_convs(h, w);
  std::vector<ConvCost> out;
  for (const auto& c : resnet_convs(make_backbone_spec(kind), h, w)) {
    out.push_back(make_conv("backbone", "backbone." + c.name, c.in_c, c.out_c, c.kernel, c.stride, c.out_h, c.out_w));
  }
  return out;
}

std::vector<ConvCost> stem_convs(const ModelSpec& spec, std::int64_t h, std::int64_t w) {
  const auto in = make_backbone_spec(spec.backbone).out_channels();
  const int f = spec.core.sizes.feature_size;
  const PyramidSizes p = pyramid_sizes(spec, h, w);
  std::vector<ConvCost> out;
  for (int i = 0; i < 3; ++i) {
    out.push_back(make_conv("stem", "stem.lateral" + std::to_string(i + 3), in[static_cast<std::size_t>(i)], f, 1, 1,
                            p[static_cast<std::size_t>(i)].first, p[static_cast<std::size_t>(i)].second));
  }
  out.push_back(make_conv("stem", "stem.p6", in[2], f, 3, 2, p[3].first, p[3].second));
  out.push_back(make_conv("stem", "stem.p7", f, f, 3, 2, p[4].first, p[4].second));
  return out;
}

std::vector<ConvCost> core_convs(const CoreSpec& spec, const PyramidSizes& sizes) {
  spec.validate();
  if (static_cast<int>(sizes.size()) != spec.levels()) throw ShapeError("core_convs: level count mismatch");
  const CoreGraph g = build_core(spec);
  const int f = spec.sizes.feature_size;
  const int hid = spec.sizes.hidden_size;
  auto at = [&](int level) { return sizes[static_cast<std::size_t>(level - spec.min_level)]; };
  std::vector<ConvCost> out;
  for (const Stage& stage : g.stages) {
    for (const Step& step : stage.steps) {
      const std::string name = "core." + g.blocks[static_cast<std::size_t>(step.block)].name;
      const auto [th, tw] = at(step.target);
      switch (step.kind) {
        case StepKind::TopDown: {
          const auto [sh, sw] = at(step.sources[0]);
          out.push_back(make_conv("core", name + ".projection", f, f, 1, 1, sh, sw));
          break;
        }
        case StepKind::BottomUp: {
          const auto [sh, sw] = at(step.sources[0]);
          out.push_back(make_conv("core", name + ".reduce", f, hid, 1, 1, sh, sw));
          out.push_back(make_conv("core", name + ".middle", hid, hid, 3, 2, th, tw));
          out.push_back(make_conv("core", name + ".expand", hid, f, 1, 1, th, tw));
          break;
        }
        case StepKind::SelfProcess:
          out.push_back(make_conv("core", name + ".reduce", f, hid, 1, 1, th, tw));
          out.push_back(make_conv("core", name + ".middle", hid, hid, 3, 1, th, tw));
          out.push_back(make_conv("core", name + ".expand", hid, f, 1, 1, th, tw));
          break;
        case StepKind::BifpnTopDown:
        case StepKind::BifpnBottomUp:
          out.push_back(make_conv("core", name + ".depthwise", f, f, 3, 1, th, tw, f));
          out.push_back(make_conv("core", name + ".pointwise", f, f, 1, 1, th, tw));
          break;
      }
    }
  }
  return out;
}

std::vector<ConvCost> head_convs(const HeadSpec& spec, const PyramidSizes& sizes) {
  spec.validate();
  std::vector<ConvCost> out;
  const int f = spec.feature_size;
  for (std::size_t l = 0; l < sizes.size(); ++l) {
    const auto [h, w] = sizes[l];
    for (const auto& [net, out_c] : {std::pair{"cls", spec.anchors * spec.num_classes}, std::pair{"box", spec.anchors * 4}}) {
      const std::string base = std::string("head.") + net;
      for (int i = 0; i < spec.hidden_layers; ++i) {
        out.push_back(make_conv("head", base + ".hidden" + std::to_string(i), f, f, 3, 1, h, w));
      }
      out.push_back(make_conv("head", base + ".final", f, out_c, spec.final_kernel, 1, h, w));
    }
  }
  return out;
}

std::vector<ConvCost> conv_inventory(const ModelSpec& spec, std::int64_t h, std::int64_t w) {
  spec.validate();
  const PyramidSizes p = pyramid_sizes(spec, h, w);
  std::vector<ConvCost> all = backbone_convs(spec.backbone, h, w);
  for (auto part : {stem_convs(spec, h, w), core_convs(spec.core, p), head_convs(spec.head, p)}) {
    all.insert(all.end(), part.begin(), part.end());
  }
  return all;
}

std::int64_t FlopReport::of(const std::string& module) const { return lookup(modules, module); }

FlopReport count_flops(const ModelSpec& spec, std::int64_t h, std::int64_t w) {
  if (h <= 0 || w <= 0 || h % 32 != 0 || w % 32 != 0) {
    throw std::invalid_argument("count_flops: image size must be a positive multiple of 32");
  }
  FlopReport r;
  for (const char* m : kModules) r.modules.push_back({m, 0});
  for (const auto& c : conv_inventory(spec, h, w)) {
    for (auto& [name, flops] : r.modules) {
      if (name == c.module) flops += 2 * c.macs();
    }
  }
  for (const auto& [name, flops] : r.modules) r.total += flops;
  return r;
}

void write_flops_csv(std::ostream& os, const FlopReport& report) {
  os << "module,flops\n";
  for (const auto& [name, flops] : report.modules) os << name << "," << flops << "\n";
  os << "total," << report.total << "\n";
}

// ---------------------------------------------------------------- latency

BenchMode parse_bench_mode(const std::string& name) {
  if (name == "train") return BenchMode::Train;
  if (name == "infer") return BenchMode::Infer;
  throw ConfigError("bench mode must be 'train' or 'infer', got '" + name + "'");
}

std::string to_string(BenchMode mode) { return mode == BenchMode::Train ? "train" : "infer"; }

template <typename T>
LatencyResult latency_bench(Model<T>& model, const LatencyConfig& cfg) {
  if (cfg.batch < 1 || cfg.iters < 1) throw ConfigError("bench: batch and iters must be >= 1");
  if (cfg.warmup < 3) throw ConfigError("bench: at least 3 warmup iterations are required");
  const auto scenes = gen_dataset(cfg.seed, cfg.batch, cfg.size);
  std::vector<int> idx(static_cast<std::size_t>(cfg.batch));
  for (int i = 0; i < cfg.batch; ++i) idx[static_cast<std::size_t>(i)] = i;
  const Var<T> images(batch_images<T>(scenes, idx));
  const GroundTruth gt = batch_ground_truth(scenes, idx);
  AdamW<T> opt(model.registry);
  const TrainConfig tc;

  auto iteration = [&] {
    if (cfg.mode == BenchMode::Infer) {
      NoGradGuard guard;
      const auto out = model(images);
      (void)out;
    } else {
      model.registry.zero_grad();
      auto loss = detection_loss(model(images), gt, model.spec.head.num_classes);
      loss.total.backward();
      opt.step(tc.lr_backbone, tc.lr_rest, tc.weight_decay);
    }
  };

  for (int i = 0; i < cfg.warmup; ++i) iteration();
  MemoryStats::reset_peak();
  std::vector<double> times;
  for (int i = 0; i < cfg.iters; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    iteration();
    times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  }
  LatencyResult r;
  r.peak_bytes = MemoryStats::peak();
  std::vector<double> sorted = times;
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  r.median_s = n % 2 ? sorted[n / 2] : 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]);
  r.min_s = sorted.front();
  r.max_s = sorted.back();
  r.spread = (r.max_s - r.min_s) / r.median_s;
  r.fps = cfg.batch / r.median_s;
  r.threads = num_threads();
  return r;
}

void write_latency_csv(std::ostream& os, const LatencyConfig& cfg, const LatencyResult& r) {
  char buf[256];
  os << "mode,batch,size,threads,iters,fps,median_s,spread,peak_bytes\n";
  std::snprintf(buf, sizeof buf, "%s,%d,%d,%d,%d,%.4f,%.6f,%.4f,%lld\n", to_string(cfg.mode).c_str(), cfg.batch,
                cfg.size, r.threads, cfg.iters, r.fps, r.median_s, r.spread, static_cast<long long>(r.peak_bytes));
  os << buf;
}

// ---------------------------------------------------------------- sweep

SweepConfig SweepConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("sweep: expected a JSON object");
  static const std::set<std::string> keys{"model", "grid", "images", "size", "bench_iters", "train", "seed"};
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("sweep: unknown key '" + k + "'");
  }
  if (!j.contains("model")) throw ConfigError("sweep: missing 'model'");
  SweepConfig c;
  c.base = ModelSpec::from_json(j.at("model"));
  try {
    if (j.contains("grid")) {
      for (const auto& cell : j.at("grid")) c.grid.push_back({cell.at(0).get<int>(), cell.at(1).get<int>()});
    } else {
      for (int l = 1; l <= 3; ++l)
        for (int b = 1; b <= 3; ++b) c.grid.push_back({l, b});
    }
    c.images = j.value("images", c.images);
    c.size = j.value("size", c.size);
    c.bench_iters = j.value("bench_iters", c.bench_iters);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("sweep: bad value: ") + e.what());
  }
  c.train = j.contains("train") ? TrainConfig::from_json(j.at("train")) : TrainConfig{};
  if (c.grid.empty()) throw ConfigError("sweep: empty grid");
  if (c.images < 1 || c.bench_iters < 1) throw ConfigError("sweep: images and bench_iters must be >= 1");
  return c;
}

std::vector<SweepRow> sweep(const SweepConfig& cfg, const std::function<void(const SweepRow&)>& progress) {
  const auto data = gen_dataset(cfg.seed, cfg.images, cfg.size);
  std::vector<SweepRow> rows;
  for (const auto& [L, B] : cfg.grid) {
    ModelSpec spec = cfg.base;
    spec.core.layers = L;
    spec.core.bottlenecks = B;
    spec.validate();
    SweepRow row;
    row.layers = L;
    row.bottlenecks = B;
    row.params = count_params(spec).total;
    row.gflops = static_cast<double>(count_flops(spec, cfg.size, cfg.size).total) * 1e-9;

    Model<float> model(spec, cfg.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    std::vector<double> step_times;
    auto last = std::chrono::steady_clock::now();
    const auto result = train_loop(model, data, tc, [&](const StepLog&) {
      const auto now = std::chrono::steady_clock::now();
      step_times.push_back(std::chrono::duration<double>(now - last).count());
      last = now;
    });
    if (!step_times.empty()) {
      std::sort(step_times.begin(), step_times.end());
      row.tfps = std::min<double>(tc.batch_size, cfg.images) / step_times[step_times.size() / 2];
    }
    row.final_loss = result.final_loss();
    row.metric = evaluate(model, data).ap.ap50;

    LatencyConfig lc;
    lc.size = cfg.size;
    lc.iters = cfg.bench_iters;
    lc.seed = cfg.seed;
    row.ifps = latency_bench(model, lc).fps;
    if (progress) progress(row);
    rows.push_back(row);
  }
  return rows;
}

void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  char buf[256];
  os << "L,B,params,gflops,tfps,ifps,metric\n";
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%d,%lld,%.6f,%.4f,%.4f,%.6f\n", r.layers, r.bottlenecks,
                  static_cast<long long>(r.params), r.gflops, r.tfps, r.ifps, r.metric);
    os << buf;
  }
}

template LatencyResult latency_bench<float>(Model<float>&, const LatencyConfig&);
template LatencyResult latency_bench<double>(Model<double>&, const LatencyConfig&);

}  // namespace tpn
