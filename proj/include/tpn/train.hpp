#pragma once

// Desk-scale training: a synthetic shapes detection dataset, AdamW with two
// learning-rate groups and a step schedule, the training loop, checkpoints and
// evaluation.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "tpn/detection.hpp"
#include "tpn/model.hpp"

namespace tpn {

// ---------------------------------------------------------------- dataset

enum ShapeClass : int { kRectangle = 0, kEllipse = 1, kTriangle = 2 };
inline constexpr int kNumShapeClasses = 3;

struct SyntheticScene {
  Tensor<float> image;  // (1, 3, size, size), values in [0, 1]
  std::vector<Annotation> objects;
};

struct DatasetConfig {
  int min_objects = 1;
  int max_objects = 6;
  double min_side = 12;
  /// Largest side as a fraction of the image size.
  double max_side_fraction = 0.5;
  /// Placement retries until the new box overlaps every earlier one by at most this IoU.
  double max_overlap = 0.3;
};

/// Deterministic in (seed, index): scene i depends only on the seed and i.
/// Throws std::invalid_argument unless size is a positive multiple of 32.
std::vector<SyntheticScene> gen_dataset(std::uint64_t seed, int n_images, int size, const DatasetConfig& cfg = {});

/// Stacks the chosen scenes into one (n, 3, size, size) batch.
template <typename T>
Tensor<T> batch_images(const std::vector<SyntheticScene>& scenes, const std::vector<int>& indices);
GroundTruth batch_ground_truth(const std::vector<SyntheticScene>& scenes, const std::vector<int>& indices);

// ---------------------------------------------------------------- optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  Tensor<T> m;
  Tensor<T> v;
  std::int64_t step = 0;
};

/// One AdamW update of p in place: bias-corrected Adam step, then p -= lr * wd * p.
template <typename T>
void adamw_step(Tensor<T>& p, const Tensor<T>& grad, AdamState<T>& state, double lr, double wd,
                const AdamConfig& cfg = {});

/// Parameters under "backbone." form the backbone learning-rate group.
bool is_backbone_param(const std::string& name);

template <typename T>
class AdamW {
 public:
  explicit AdamW(ParamRegistry<T>& registry, AdamConfig cfg = {});

  /// Skips frozen parameters and parameters without a gradient.
  void step(double lr_backbone, double lr_rest, double weight_decay);

 private:
  ParamRegistry<T>* registry_;
  AdamConfig cfg_;
  std::vector<AdamState<T>> states_;
};

// ---------------------------------------------------------------- loop

struct TrainConfig {
  int epochs = 12;
  double lr_backbone = 1e-5;
  double lr_rest = 1e-4;
  double weight_decay = 1e-4;
  std::vector<int> drop_epochs;
  double drop_factor = 0.1;
  int batch_size = 2;
  std::uint64_t seed = 0;
  bool freeze_backbone = false;
  /// Stops after this many optimizer steps when positive.
  int max_steps = -1;
  LossConfig loss;

  /// Throws ConfigError.
  void validate() const;

  /// Drops at 27/36 and 33/36 of the run, rounded down.
  static std::vector<int> scaled_drops(int epochs);

  static TrainConfig from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

/// (backbone lr, rest lr) for a 0-based epoch: base * factor^(drops <= epoch).
std::pair<double, double> lr_at(const TrainConfig& cfg, int epoch);

struct StepLog {
  int step = 0;
  int epoch = 0;
  std::vector<double> cls;  // per level, normalized
  std::vector<double> box;
  double total = 0;
};

struct TrainResult {
  int min_level = 3;
  std::vector<StepLog> steps;

  double initial_loss() const { return steps.empty() ? 0.0 : steps.front().total; }
  double final_loss() const { return steps.empty() ? 0.0 : steps.back().total; }
};

/// Throws NumericError on a non-finite loss and ConfigError when the head has
/// fewer classes than the dataset.
template <typename T>
TrainResult train_loop(Model<T>& model, const std::vector<SyntheticScene>& data, const TrainConfig& cfg,
                       const std::function<void(const StepLog&)>& on_step = {});

/// step,level,cls,box,total with one row per level (total = cls + box of that
/// level) followed by a level "all" row carrying the summed loss.
void write_loss_csv(std::ostream& os, const TrainResult& result);

// ---------------------------------------------------------------- evaluation

struct EvalResult {
  APResult ap;
  std::vector<Detection> detections;
};

template <typename T>
EvalResult evaluate(const Model<T>& model, const std::vector<SyntheticScene>& data, const DecodeConfig& decode = {},
                    int batch_size = 2);

// ---------------------------------------------------------------- checkpoints

/// Writes dir/model.json, dir/params.tpn (concatenated TPN1 tensors in
/// registry order) and dir/manifest.json listing name, byte offset, shape and
/// frozen flag of every tensor.
template <typename T>
void save_checkpoint(const std::string& dir, const Model<T>& model);

/// Rebuilds the model from dir/model.json and loads every tensor named in the
/// manifest. Throws ConfigError or FormatError on mismatch.
template <typename T>
std::unique_ptr<Model<T>> load_checkpoint(const std::string& dir);

}  // namespace tpn
