#include "tpn/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "tpn/serialize.hpp"

namespace tpn {

using nlohmann::json;

// ---------------------------------------------------------------- dataset

namespace {

struct Placed {
  Box box;
  int cls;
  std::array<float, 3> color;
};

bool inside(int cls, const Box& b, double px, double py) {
  switch (cls) {
    case kRectangle:
      return px >= b.x1 && px < b.x2 && py >= b.y1 && py < b.y2;
    case kEllipse: {
      const double u = (px - 0.5 * (b.x1 + b.x2)) / (0.5 * b.width());
      const double v = (py - 0.5 * (b.y1 + b.y2)) / (0.5 * b.height());
      return u * u + v * v <= 1.0;
    }
    default: {
      // Apex at the top center, base along the bottom edge.
      const double ax = 0.5 * (b.x1 + b.x2);
      if (py < b.y1 || py > b.y2) return false;
      const double half = 0.5 * b.width() * (py - b.y1) / b.height();
      return px >= ax - half && px <= ax + half;
    }
  }
}

SyntheticScene make_scene(std::uint64_t seed, int size, const DatasetConfig& cfg) {
  Rng rng(seed);
  SyntheticScene scene;
  scene.image = Tensor<float>({1, 3, size, size});
  std::array<float, 3> background{};
  for (auto& c : background) c = static_cast<float>(rng.uniform(0.0, 0.35));

  const int count = static_cast<int>(rng.uniform_int(cfg.min_objects, cfg.max_objects));
  const double max_side = std::max(cfg.min_side, cfg.max_side_fraction * size);
  std::vector<Placed> placed;
  for (int k = 0; k < count; ++k) {
    const int cls = static_cast<int>(rng.uniform_int(0, kNumShapeClasses - 1));
    std::array<float, 3> color{};
    for (auto& c : color) c = static_cast<float>(rng.uniform(0.55, 1.0));
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double w = std::round(rng.uniform(cfg.min_side, max_side));
      const double h = std::round(rng.uniform(cfg.min_side, max_side));
      const double x = std::round(rng.uniform(0.0, size - w));
      const double y = std::round(rng.uniform(0.0, size - h));
      const Box box{x, y, x + w, y + h};
      const bool clear = std::all_of(placed.begin(), placed.end(),
                                     [&](const Placed& p) { return iou(p.box, box) <= cfg.max_overlap; });
      if (clear) {
        placed.push_back({box, cls, color});
        break;
      }
    }
  }

  const std::int64_t plane = static_cast<std::int64_t>(size) * size;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      std::array<float, 3> px = background;
      // Later objects are painted over earlier ones.
      for (const auto& p : placed) {
        if (inside(p.cls, p.box, x + 0.5, y + 0.5)) px = p.color;
      }
      for (int c = 0; c < 3; ++c) scene.image[c * plane + y * size + x] = px[static_cast<std::size_t>(c)];
    }
  }
  for (const auto& p : placed) scene.objects.push_back({p.box, p.cls});
  return scene;
}

}  // namespace

std::vector<SyntheticScene> gen_dataset(std::uint64_t seed, int n_images, int size, const DatasetConfig& cfg) {
  if (size <= 0 || size % 32 != 0) throw std::invalid_argument("gen_dataset: size must be a positive multiple of 32");
  if (n_images < 0) throw std::invalid_argument("gen_dataset: negative image count");
  if (cfg.min_objects < 0 || cfg.max_objects < cfg.min_objects || cfg.min_side < 4 ||
      cfg.min_side > cfg.max_side_fraction * size) {
    throw std::invalid_argument("gen_dataset: inconsistent dataset config");
  }
  std::vector<SyntheticScene> scenes(static_cast<std::size_t>(n_images));
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n_images; ++i) {
    const std::uint64_t s = seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(i + 1));
    scenes[static_cast<std::size_t>(i)] = make_scene(s, size, cfg);
  }
  return scenes;
}

template <typename T>
Tensor<T> batch_images(const std::vector<SyntheticScene>& scenes, const std::vector<int>& indices) {
  if (indices.empty()) throw std::invalid_argument("batch_images: empty batch");
  const Shape s = scenes.at(static_cast<std::size_t>(indices[0])).image.shape();
  Tensor<T> out({static_cast<std::int64_t>(indices.size()), s.c, s.h, s.w});
  const std::int64_t per = s.c * s.h * s.w;
  for (std::size_t b = 0; b < indices.size(); ++b) {
    const auto& img = scenes.at(static_cast<std::size_t>(indices[b])).image;
    if (!(img.shape() == s)) throw ShapeError("batch_images: scenes differ in size");
    for (std::int64_t i = 0; i < per; ++i) out[static_cast<std::int64_t>(b) * per + i] = static_cast<T>(img[i]);
  }
  return out;
}

GroundTruth batch_ground_truth(const std::vector<SyntheticScene>& scenes, const std::vector<int>& indices) {
  GroundTruth gt;
  for (int i : indices) gt.push_back(scenes.at(static_cast<std::size_t>(i)).objects);
  return gt;
}

// ---------------------------------------------------------------- optimizer

template <typename T>
void adamw_step(Tensor<T>& p, const Tensor<T>& grad, AdamState<T>& s, double lr, double wd, const AdamConfig& cfg) {
  if (!(p.shape() == grad.shape())) throw ShapeError("adamw_step: parameter and gradient shapes differ");
  if (s.m.empty()) {
    s.m = Tensor<T>(p.shape());
    s.v = Tensor<T>(p.shape());
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  const std::int64_t n = p.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const double g = grad[i];
    const double m = cfg.beta1 * s.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * s.v[i] + (1.0 - cfg.beta2) * g * g;
    s.m[i] = static_cast<T>(m);
    s.v[i] = static_cast<T>(v);
    double x = p[i];
    x -= lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    x -= lr * wd * x;
    p[i] = static_cast<T>(x);
  }
}

bool is_backbone_param(const std::string& name) { return name.rfind("backbone.", 0) == 0; }

template <typename T>
AdamW<T>::AdamW(ParamRegistry<T>& registry, AdamConfig cfg)
    : registry_(&registry), cfg_(cfg), states_(registry.params().size()) {}

template <typename T>
void AdamW<T>::step(double lr_backbone, double lr_rest, double weight_decay) {
  auto& params = registry_->params();
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (p.frozen || !p.var.has_grad()) continue;
    const double lr = is_backbone_param(p.name) ? lr_backbone : lr_rest;
    adamw_step(p.var.mutable_value(), std::as_const(p.var).grad(), states_[i], lr, weight_decay, cfg_);
  }
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (!(lr_backbone >= 0) || !(lr_rest >= 0) || !(weight_decay >= 0)) {
    throw ConfigError("train: learning rates and weight decay must be non-negative");
  }
  if (!(drop_factor > 0)) throw ConfigError("train: drop_factor must be positive");
  for (std::size_t i = 0; i < drop_epochs.size(); ++i) {
    if (drop_epochs[i] < 0 || drop_epochs[i] >= epochs) throw ConfigError("train: drop epoch out of range");
    if (i > 0 && drop_epochs[i] <= drop_epochs[i - 1]) {
      throw ConfigError("train: drop epochs must be strictly increasing");
    }
  }
}

std::vector<int> TrainConfig::scaled_drops(int epochs) {
  std::vector<int> drops;
  for (int d : {27 * epochs / 36, 33 * epochs / 36}) {
    if (d > 0 && d < epochs && (drops.empty() || d > drops.back())) drops.push_back(d);
  }
  return drops;
}

TrainConfig TrainConfig::from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("train: expected a JSON object");
  static const std::set<std::string> keys{"epochs",       "lr_backbone", "lr_rest",         "weight_decay",
                                          "drop_epochs",  "drop_factor", "batch_size",      "seed",
                                          "max_steps",    "loss",        "freeze_backbone"};
  for (const auto& [k, v] : j.items()) {
    if (!keys.count(k)) throw ConfigError("train: unknown key '" + k + "'");
  }
  TrainConfig c;
  try {
    c.epochs = j.value("epochs", c.epochs);
    c.lr_backbone = j.value("lr_backbone", c.lr_backbone);
    c.lr_rest = j.value("lr_rest", c.lr_rest);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.drop_epochs = j.contains("drop_epochs") ? j.at("drop_epochs").get<std::vector<int>>() : scaled_drops(c.epochs);
    c.drop_factor = j.value("drop_factor", c.drop_factor);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
    if (j.contains("loss")) {
      const json& l = j.at("loss");
      for (const auto& [k, v] : l.items()) {
        if (k != "alpha" && k != "gamma" && k != "beta") throw ConfigError("train.loss: unknown key '" + k + "'");
      }
      c.loss.alpha = l.value("alpha", c.loss.alpha);
      c.loss.gamma = l.value("gamma", c.loss.gamma);
      c.loss.beta = l.value("beta", c.loss.beta);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("train: bad value: ") + e.what());
  }
  c.validate();
  return c;
}

json TrainConfig::to_json() const {
  return json{{"epochs", epochs},
              {"lr_backbone", lr_backbone},
              {"lr_rest", lr_rest},
              {"weight_decay", weight_decay},
              {"drop_epochs", drop_epochs},
              {"drop_factor", drop_factor},
              {"batch_size", batch_size},
              {"seed", seed},
              {"max_steps", max_steps},
              {"freeze_backbone", freeze_backbone},
              {"loss", {{"alpha", loss.alpha}, {"gamma", loss.gamma}, {"beta", loss.beta}}}};
}

std::pair<double, double> lr_at(const TrainConfig& cfg, int epoch) {
  double factor = 1.0;
  for (int d : cfg.drop_epochs) {
    if (d <= epoch) factor *= cfg.drop_factor;
  }
  return {cfg.lr_backbone * factor, cfg.lr_rest * factor};
}

// ---------------------------------------------------------------- loop

template <typename T>
TrainResult train_loop(Model<T>& model, const std::vector<SyntheticScene>& data, const TrainConfig& cfg,
                       const std::function<void(const StepLog&)>& on_step) {
  cfg.validate();
  if (data.empty()) throw ConfigError("train: empty dataset");
  if (model.spec.head.num_classes < kNumShapeClasses) {
    throw ConfigError("train: the head needs at least " + std::to_string(kNumShapeClasses) + " classes");
  }
  if (cfg.freeze_backbone) model.registry.freeze_prefix("backbone");
  AdamW<T> opt(model.registry);
  Rng rng(cfg.seed);
  TrainResult result;
  std::vector<int> order(data.size());
  int step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) {
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
    }
    const auto [lr_bb, lr_rest] = lr_at(cfg, epoch);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      if (cfg.max_steps > 0 && step >= cfg.max_steps) return result;
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(stop));
      model.registry.zero_grad();
      const Var<T> images(batch_images<T>(data, idx));
      const auto out = model(images);
      auto loss = detection_loss(out, batch_ground_truth(data, idx), model.spec.head.num_classes,
                                       AnchorConfig{}, cfg.loss);
      if (!std::isfinite(loss.total_value)) {
        std::ostringstream msg;
        msg << "train: non-finite loss at step " << step << " (epoch " << epoch << "); per-level cls/box:";
        for (std::size_t l = 0; l < loss.cls.size(); ++l) msg << " P" << loss.min_level + static_cast<int>(l) << " "
                                                               << loss.cls[l] << "/" << loss.box[l];
        throw NumericError(msg.str());
      }
      loss.total.backward();
      opt.step(lr_bb, lr_rest, cfg.weight_decay);
      StepLog log{step, epoch, loss.cls, loss.box, loss.total_value};
      result.min_level = loss.min_level;
      if (on_step) on_step(log);
      result.steps.push_back(std::move(log));
      ++step;
    }
  }
  return result;
}

void write_loss_csv(std::ostream& os, const TrainResult& result) {
  char buf[160];
  os << "step,level,cls,box,total\n";
  for (const auto& s : result.steps) {
    double cls = 0;
    double box = 0;
    for (std::size_t l = 0; l < s.cls.size(); ++l) {
      std::snprintf(buf, sizeof buf, "%d,%d,%.9g,%.9g,%.9g\n", s.step, result.min_level + static_cast<int>(l),
                    s.cls[l], s.box[l], s.cls[l] + s.box[l]);
      os << buf;
      cls += s.cls[l];
      box += s.box[l];
    }
    std::snprintf(buf, sizeof buf, "%d,all,%.9g,%.9g,%.9g\n", s.step, cls, box, s.total);
    os << buf;
  }
}

// ---------------------------------------------------------------- evaluation

template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<SyntheticScene>& data, const DecodeConfig& decode,
                    int batch_size) {
  if (batch_size < 1) throw ConfigError("eval: batch_size must be >= 1");
  NoGradGuard guard;
  EvalResult r;
  GroundTruth gt;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch_size)) {
    std::vector<int> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + static_cast<std::size_t>(batch_size)); ++i) {
      idx.push_back(static_cast<int>(i));
    }
    const auto out = model(Var<T>(batch_images<T>(data, idx)));
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const Shape& s = data[static_cast<std::size_t>(idx[b])].image.shape();
      auto dets = decode_detections(out, static_cast<int>(b), model.spec.head.num_classes, s.h, s.w, AnchorConfig{},
                                    decode);
      for (auto& d : dets) {
        d.image = idx[b];
        r.detections.push_back(d);
      }
      gt.push_back(data[static_cast<std::size_t>(idx[b])].objects);
    }
  }
  r.ap = evaluate_ap(r.detections, gt, model.spec.head.num_classes);
  return r;
}

// ---------------------------------------------------------------- checkpoints

namespace fs = std::filesystem;

template <typename T>
void save_checkpoint(const std::string& dir, const Model<T>& model) {
  fs::create_directories(dir);
  {
    std::ofstream spec(fs::path(dir) / "model.json");
    spec << model.spec.to_json().dump(2) << "\n";
  }
  std::ofstream bin(fs::path(dir) / "params.tpn", std::ios::binary);
  if (!bin) throw ConfigError("checkpoint: cannot write to '" + dir + "'");
  json entries = json::array();
  std::int64_t offset = 0;
  for (const auto& p : model.registry.params()) {
    const Shape& s = p.var.shape();
    entries.push_back({{"name", p.name}, {"offset", offset}, {"shape", {s.n, s.c, s.h, s.w}}, {"frozen", p.frozen}});
    write_tensor(bin, p.var.value());
    offset += encoded_size(p.var.value());
  }
  std::ofstream manifest(fs::path(dir) / "manifest.json");
  manifest << json{{"format", "TPN1"},
                   {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                   {"file", "params.tpn"},
                   {"tensors", entries}}
                  .dump(2)
           << "\n";
}

template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& dir) {
  const ModelSpec spec = load_model_spec((fs::path(dir) / "model.json").string());
  auto model = std::make_unique<Model<T>>(spec, 0);
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw ConfigError("checkpoint: missing manifest in '" + dir + "'");
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: bad manifest: ") + e.what());
  }
  std::ifstream bin(fs::path(dir) / "params.tpn", std::ios::binary);
  if (!bin) throw ConfigError("checkpoint: missing params.tpn in '" + dir + "'");
  auto& params = model->registry.params();
  const auto& entries = manifest.at("tensors");
  if (entries.size() != params.size()) throw FormatError("checkpoint: tensor count differs from the model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != params[i].name) {
      throw FormatError("checkpoint: expected tensor '" + params[i].name + "', found '" +
                        e.at("name").get<std::string>() + "'");
    }
    bin.seekg(e.at("offset").get<std::int64_t>());
    Tensor<T> t = read_tensor<T>(bin);
    if (!(t.shape() == params[i].var.shape())) throw FormatError("checkpoint: shape mismatch for " + params[i].name);
    params[i].var.mutable_value() = std::move(t);
    params[i].frozen = e.value("frozen", false);
  }
  return model;
}

#define TPN_INSTANTIATE(T)                                                                                        \
  template Tensor<T> batch_images<T>(const std::vector<SyntheticScene>&, const std::vector<int>&);                \
  template void adamw_step<T>(Tensor<T>&, const Tensor<T>&, AdamState<T>&, double, double, const AdamConfig&);    \
  template class AdamW<T>;                                                                                        \
  template TrainResult train_loop<T>(Model<T>&, const std::vector<SyntheticScene>&, const TrainConfig&,           \
                                     const std::function<void(const StepLog&)>&);                                 \
  template EvalResult evaluate<T>(const Model<T>&, const std::vector<SyntheticScene>&, const DecodeConfig&, int); \
  template void save_checkpoint<T>(const std::string&, const Model<T>&);                                          \
  template std::unique_ptr<Model<T>> load_checkpoint<T>(const std::string&);

TPN_INSTANTIATE(float)
TPN_INSTANTIATE(double)

}  // namespace tpn
