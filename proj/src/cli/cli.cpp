#include "tpn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>

#include "tpn/analysis.hpp"
#include "tpn/parallel.hpp"
#include "tpn/serialize.hpp"
#include "tpn/train.hpp"

namespace tpn {

namespace fs = std::filesystem;

std::vector<Table1Row> table1_rows() {
  auto make = [](BackboneKind bb, CoreKind kind, int L, int B, int C, int final_kernel) {
    ModelSpec s;
    s.backbone = bb;
    s.core.kind = kind;
    s.core.layers = L;
    s.core.bottlenecks = B;
    s.head.hidden_layers = C;
    s.head.final_kernel = final_kernel;
    return s;
  };
  using BK = BackboneKind;
  using CK = CoreKind;
  // The R101 + FPN baseline uses the stock RetinaNet head with 3x3 final layers.
  return {
      {"R50 TPN B=7 L=1 C=1", make(BK::ResNet50, CK::TPN, 1, 7, 1, 1), 36.3},
      {"R50 TPN B=3 L=2 C=1", make(BK::ResNet50, CK::TPN, 2, 3, 1, 1), 36.2},
      {"R50 TPN B=2 L=3 C=1", make(BK::ResNet50, CK::TPN, 3, 2, 1, 1), 36.7},
      {"R50 TPN B=1 L=5 C=1", make(BK::ResNet50, CK::TPN, 5, 1, 1, 1), 37.1},
      {"R50 BiFPN L=7 C=1", make(BK::ResNet50, CK::BiFPN, 7, 1, 1, 1), 34.7},
      {"R50 bFPN B=14 C=1", make(BK::ResNet50, CK::bFPN, 1, 14, 1, 1), 36.1},
      {"R50 hFPN B=14 C=1", make(BK::ResNet50, CK::hFPN, 1, 14, 1, 1), 36.1},
      {"R101 FPN L=1 C=4", make(BK::ResNet101, CK::FPN, 1, 1, 4, 3), 55.1},
      {"R101 TPN B=2 L=1 C=1", make(BK::ResNet101, CK::TPN, 1, 2, 1, 1), 51.7},
  };
}

namespace {

struct Globals {
  std::string model_file;
  std::uint64_t seed = 0;
  int threads = 0;
  std::string out_dir = ".";
  std::string precision = "f32";
};

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

std::string shape_text(const Shape& s) {
  return std::to_string(s.n) + "x" + std::to_string(s.c) + "x" + std::to_string(s.h) + "x" + std::to_string(s.w);
}

std::ofstream open_output(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  std::ofstream f(fs::path(g.out_dir) / name);
  if (!f) throw ConfigError("cannot write '" + (fs::path(g.out_dir) / name).string() + "'");
  return f;
}

ModelSpec require_model(const Globals& g) {
  if (g.model_file.empty()) throw ConfigError("--model is required for this command");
  return load_model_spec(g.model_file);
}

void write_metrics_csv(std::ostream& os, const APResult& ap) {
  os << "ap,ap50,ap75\n" << fmt("%.6f", ap.ap) << "," << fmt("%.6f", ap.ap50) << "," << fmt("%.6f", ap.ap75) << "\n";
}

// ---------------------------------------------------------------- commands

int cmd_describe(const Globals& g, std::ostream& out) {
  const ModelSpec spec = require_model(g);
  ParamRegistry<float> reg(g.seed);
  const Core<float> core(reg, "core", build_core(spec.core));
  const CoreGraph& graph = core.graph();
  auto csv = open_output(g, "describe.csv");
  csv << "stage,layer,stage_kind,step,target,sources,block,parameters\n";
  out << "core " << to_string(spec.core.kind) << " L=" << spec.core.layers << " B=" << spec.core.bottlenecks
      << " levels P" << spec.core.min_level << "..P" << spec.core.max_level << ", " << graph.step_count()
      << " steps\n";
  for (std::size_t si = 0; si < graph.stages.size(); ++si) {
    const Stage& stage = graph.stages[si];
    out << "stage " << si << " " << to_string(stage.kind) << " (layer " << stage.layer << ")\n";
    for (const Step& step : stage.steps) {
      const std::string block = graph.blocks[static_cast<std::size_t>(step.block)].name;
      std::string sources;
      for (int s : step.sources) sources += (sources.empty() ? "P" : " P") + std::to_string(s);
      std::string params;
      const std::string prefix = "core." + block + ".";
      for (const auto& p : reg.params()) {
        if (p.name.rfind(prefix, 0) != 0) continue;
        params += (params.empty() ? "" : " ") + p.name.substr(prefix.size()) + ":" + shape_text(p.var.shape());
      }
      out << "  " << to_string(step.kind) << " P" << step.target << " <- " << sources << "  [" << block << "] "
          << params << "\n";
      csv << si << "," << stage.layer << "," << to_string(stage.kind) << "," << to_string(step.kind) << ","
          << step.target << "," << sources << "," << block << "," << params << "\n";
    }
  }
  return kExitOk;
}

int cmd_params(const Globals& g, std::ostream& out) {
  const ModelSpec spec = require_model(g);
  const ParamTable t = count_params(spec);
  for (const auto& r : t.rows) {
    out << r.module << std::string(10 - std::min<std::size_t>(9, r.module.size()), ' ') << r.count << "  (trainable "
        << r.trainable << ")\n";
  }
  out << "total     " << t.total << "  (trainable " << t.trainable << ")\n";
  auto csv = open_output(g, "params.csv");
  write_params_csv(csv, t);
  return kExitOk;
}

int cmd_flops(const Globals& g, std::ostream& out, int h, int w) {
  const ModelSpec spec = require_model(g);
  const FlopReport r = count_flops(spec, h, w);
  for (const auto& [m, f] : r.modules) out << m << "  " << fmt("%.3f", static_cast<double>(f) * 1e-9) << " GFLOPs\n";
  out << "total  " << fmt("%.3f", static_cast<double>(r.total) * 1e-9) << " GFLOPs at " << h << "x" << w << "\n";
  auto csv = open_output(g, "flops.csv");
  write_flops_csv(csv, r);
  return kExitOk;
}

template <typename T>
int cmd_bench(const Globals& g, std::ostream& out, LatencyConfig cfg) {
  Model<T> model(require_model(g), g.seed);
  if (!model.runnable()) throw ConfigError("bench needs a runnable (tiny) backbone");
  cfg.seed = g.seed;
  const LatencyResult r = latency_bench(model, cfg);
  out << to_string(cfg.mode) << ": " << fmt("%.3f", r.fps) << " images/s (median " << fmt("%.4f", r.median_s)
      << " s per batch of " << cfg.batch << ", spread " << fmt("%.1f", 100 * r.spread) << "%, " << r.threads
      << " threads, peak " << r.peak_bytes << " bytes)\n";
  auto csv = open_output(g, "bench.csv");
  write_latency_csv(csv, cfg, r);
  return kExitOk;
}

template <typename T>
int cmd_train(const Globals& g, std::ostream& out, const std::string& config_file, int images, int size) {
  const ModelSpec spec = require_model(g);
  TrainConfig cfg;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw ConfigError("cannot open train config '" + config_file + "'");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("train config is not valid JSON: " + std::string(e.what()));
    }
    cfg = TrainConfig::from_json(j);
  } else {
    cfg.drop_epochs = TrainConfig::scaled_drops(cfg.epochs);
  }
  cfg.seed = g.seed;
  Model<T> model(spec, g.seed);
  if (!model.runnable()) throw ConfigError("train needs a runnable (tiny) backbone");
  const auto data = gen_dataset(g.seed, images, size);
  const TrainResult r = train_loop(model, data, cfg);
  {
    auto csv = open_output(g, "loss.csv");
    write_loss_csv(csv, r);
  }
  save_checkpoint((fs::path(g.out_dir) / "checkpoint").string(), model);
  const EvalResult e = evaluate(model, data);
  {
    auto csv = open_output(g, "detections.csv");
    write_detections_csv(csv, e.detections);
    auto m = open_output(g, "metrics.csv");
    write_metrics_csv(m, e.ap);
  }
  out << r.steps.size() << " steps, loss " << fmt("%.4f", r.initial_loss()) << " -> " << fmt("%.4f", r.final_loss())
      << ", AP " << fmt("%.3f", e.ap.ap) << " AP50 " << fmt("%.3f", e.ap.ap50) << " on the training scenes\n";
  return kExitOk;
}

template <typename T>
int cmd_eval(const Globals& g, std::ostream& out, const std::string& checkpoint, int images, int size) {
  if (!fs::is_directory(checkpoint)) throw ConfigError("no checkpoint directory '" + checkpoint + "'");
  const auto model = load_checkpoint<T>(checkpoint);
  const auto data = gen_dataset(g.seed, images, size);
  const EvalResult e = evaluate(*model, data);
  auto csv = open_output(g, "detections.csv");
  write_detections_csv(csv, e.detections);
  auto m = open_output(g, "metrics.csv");
  write_metrics_csv(m, e.ap);
  out << e.detections.size() << " detections, AP " << fmt("%.3f", e.ap.ap) << " AP50 " << fmt("%.3f", e.ap.ap50)
      << " AP75 " << fmt("%.3f", e.ap.ap75) << "\n";
  return kExitOk;
}

int cmd_sweep(const Globals& g, std::ostream& out, const std::string& grid_file) {
  std::ifstream in(grid_file);
  if (!in) throw ConfigError("cannot open grid file '" + grid_file + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("grid file is not valid JSON: " + std::string(e.what()));
  }
  SweepConfig cfg = SweepConfig::from_json(j);
  cfg.seed = g.seed;
  const auto rows = sweep(cfg, [&](const SweepRow& r) {
    out << "L=" << r.layers << " B=" << r.bottlenecks << " params " << r.params << " GFLOPs "
        << fmt("%.4f", r.gflops) << " tFPS " << fmt("%.2f", r.tfps) << " iFPS " << fmt("%.2f", r.ifps) << " AP50 "
        << fmt("%.3f", r.metric) << "\n";
  });
  auto csv = open_output(g, "sweep.csv");
  write_sweep_csv(csv, rows);
  return kExitOk;
}

int cmd_table1(const Globals& g, std::ostream& out) {
  auto csv = open_output(g, "table1.csv");
  csv << "config,reference_m,computed_m,deviation_pct,trainable_m,trainable_deviation_pct,within_2pct\n";
  out << "| Configuration | Reference (M) | Computed (M) | Deviation | Trainable only (M) | Deviation |\n"
      << "|---|---|---|---|---|---|\n";
  for (const auto& row : table1_rows()) {
    const ParamTable t = count_params(row.spec);
    const double m = static_cast<double>(t.total) * 1e-6;
    const double tm = static_cast<double>(t.trainable) * 1e-6;
    const double dev = 100.0 * (m - row.reference_millions) / row.reference_millions;
    const double tdev = 100.0 * (tm - row.reference_millions) / row.reference_millions;
    const bool ok = std::abs(dev) <= 2.0;
    csv << row.label << "," << fmt("%.1f", row.reference_millions) << "," << fmt("%.3f", m) << "," << fmt("%+.2f", dev)
        << "," << fmt("%.3f", tm) << "," << fmt("%+.2f", tdev) << "," << (ok ? "yes" : "no") << "\n";
    out << "| " << row.label << " | " << fmt("%.1f", row.reference_millions) << " | " << fmt("%.2f", m) << " | "
        << fmt("%+.2f%%", dev) << " | " << fmt("%.2f", tm) << " | " << fmt("%+.2f%%", tdev) << " |\n";
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Feature pyramid cores: counting, benchmarking and toy training", "tpn"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--model", g.model_file, "Model description (JSON)");
  app.add_option("--seed", g.seed, "Seed for initialization and data");
  app.add_option("--threads", g.threads, "Worker threads (0 = OpenMP default)")->check(CLI::NonNegativeNumber);
  app.add_option("--out", g.out_dir, "Output directory for CSV files");
  app.add_option("--precision", g.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));

  auto* describe = app.add_subcommand("describe", "List the core's schedule with parameter shapes");
  auto* params = app.add_subcommand("params", "Parameter table");
  int flop_h = 800;
  int flop_w = 0;
  auto* flops = app.add_subcommand("flops", "Convolution FLOPs for one image");
  flops->add_option("--size", flop_h, "Image height (and width unless --width)");
  flops->add_option("--width", flop_w, "Image width");

  LatencyConfig lc;
  std::string mode = "infer";
  auto* bench = app.add_subcommand("bench", "Latency / FPS measurement");
  bench->add_option("--mode", mode, "train or infer")->check(CLI::IsMember({"train", "infer"}));
  bench->add_option("--batch", lc.batch, "Images per iteration")->check(CLI::PositiveNumber);
  bench->add_option("--size", lc.size, "Image side");
  bench->add_option("--iters", lc.iters, "Timed iterations")->check(CLI::PositiveNumber);
  bench->add_option("--warmup", lc.warmup, "Warmup iterations (>= 3)");

  std::string train_config;
  int images = 8;
  int size = 64;
  auto* train = app.add_subcommand("train", "Toy training on synthetic scenes");
  train->add_option("--config", train_config, "Training config (JSON)");
  train->add_option("--images", images, "Number of synthetic scenes")->check(CLI::PositiveNumber);
  train->add_option("--size", size, "Scene side (multiple of 32)");

  std::string checkpoint;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on synthetic scenes");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint directory")->required();
  eval->add_option("--images", images, "Number of synthetic scenes")->check(CLI::PositiveNumber);
  eval->add_option("--size", size, "Scene side (multiple of 32)");

  std::string grid_file;
  auto* sweep_cmd = app.add_subcommand("sweep", "Toy (L, B) sweep");
  sweep_cmd->add_option("--grid", grid_file, "Sweep description (JSON)")->required();

  auto* table1 = app.add_subcommand("table1", "Parameter reproduction report");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (g.threads > 0) set_num_threads(g.threads);
    const bool f64 = g.precision == "f64";
    if (describe->parsed()) return cmd_describe(g, out);
    if (params->parsed()) return cmd_params(g, out);
    if (flops->parsed()) return cmd_flops(g, out, flop_h, flop_w > 0 ? flop_w : flop_h);
    if (bench->parsed()) {
      lc.mode = parse_bench_mode(mode);
      return f64 ? cmd_bench<double>(g, out, lc) : cmd_bench<float>(g, out, lc);
    }
    if (train->parsed()) {
      return f64 ? cmd_train<double>(g, out, train_config, images, size)
                 : cmd_train<float>(g, out, train_config, images, size);
    }
    if (eval->parsed()) {
      return f64 ? cmd_eval<double>(g, out, checkpoint, images, size) : cmd_eval<float>(g, out, checkpoint, images, size);
    }
    if (sweep_cmd->parsed()) return cmd_sweep(g, out, grid_file);
    if (table1->parsed()) return cmd_table1(g, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const FormatError& e) {
    err << "format error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
  return kExitUsage;
}

}  // namespace tpn
