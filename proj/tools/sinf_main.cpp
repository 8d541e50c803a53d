#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fmt/format.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "sinf/checkpoint.hpp"
#include "sinf/eval.hpp"
#include "sinf/imageio.hpp"
#include "sinf/pipeline.hpp"
#include "sinf/service.hpp"
#include "sinf/synth.hpp"
#include "sinf/trainer.hpp"

namespace fs = std::filesystem;
using namespace sinet;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Options {
  std::optional<std::string> config;
  std::vector<std::string> overrides;
  std::string out = "run";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> model;
  std::optional<std::string> scenes;
  std::optional<std::string> bind;
  std::optional<std::string> resume;
  std::optional<std::string> scene;
  std::optional<std::string> annotations;
  std::string split = "test";
  std::string kind = "side_fraction";
  bool no_side = false;
};

// Files and directories created by the current command; removed if it fails.
class Outputs {
 public:
  void write(const fs::path& path, const std::string& bytes) {
    track(path);
    io::write_file(path, bytes);
  }
  void track(const fs::path& path) {
    if (!fs::exists(path)) created_.push_back(path);
  }
  void commit() { created_.clear(); }
  void rollback() {
    for (auto it = created_.rbegin(); it != created_.rend(); ++it) {
      std::error_code ec;
      fs::remove_all(*it, ec);
    }
    created_.clear();
  }

 private:
  std::vector<fs::path> created_;
};

pipeline::PipelineConfig resolve(const Options& o) {
  std::vector<std::string> overrides = o.overrides;
  if (o.seed) {
    for (const char* key : {"data.seed", "model.seed", "train.seed", "eval.seed"}) {
      overrides.push_back(fmt::format("{}={}", key, *o.seed));
    }
  }
  if (o.bind) overrides.push_back(fmt::format("serve.bind=\"{}\"", *o.bind));
  if (o.no_side) overrides.push_back("data.use_side=false");
  return pipeline::load_config(o.config ? std::optional<fs::path>(*o.config) : std::nullopt, overrides);
}

void write_manifest(Outputs& out, const fs::path& dir, const std::string& command, const pipeline::PipelineConfig& c) {
  const nlohmann::json cfg = pipeline::to_json(c);
  const nlohmann::json manifest = {{"command", command},
                                   {"version", pipeline::kVersion},
                                   {"checkpoint_format", ckpt::kFormatVersion},
                                   {"wire_version", service::kWireVersion},
                                   {"config_hash", fmt::format("{:016x}", pipeline::config_hash(c))},
                                   {"seed", c.data.seed},
                                   {"compiler", fmt::format("gcc {}.{}.{}", __GNUC__, __GNUC_MINOR__, __GNUC_PATCHLEVEL__)}};
  out.write(dir / fmt::format("config_{}.json", command), cfg.dump(2) + "\n");
  out.write(dir / fmt::format("manifest_{}.json", command), manifest.dump(2) + "\n");
}

fs::path scenes_dir(const Options& o) { return o.scenes ? fs::path(*o.scenes) : fs::path(o.out) / "scenes"; }
fs::path model_path(const Options& o) { return o.model ? fs::path(*o.model) : fs::path(o.out) / "model.sinf"; }

net::Model load_model_or_fail(const fs::path& path) {
  if (!fs::exists(path)) throw UsageError(fmt::format("checkpoint not found: {}", path.string()));
  return ckpt::load_model(path);
}

void check_model_matches(const net::Model& m, const pipeline::PipelineConfig& c) {
  if (m.config().num_classes != c.data.num_classes) {
    throw UsageError(fmt::format("model predicts {} classes but data.num_classes is {}", m.config().num_classes,
                                 c.data.num_classes));
  }
}

int cmd_gen(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  const fs::path dir = scenes_dir(o);
  if (fs::exists(dir) && !fs::is_empty(dir)) throw UsageError(fmt::format("{} already exists and is not empty", dir.string()));
  fs::create_directories(o.out);
  out.track(dir);
  const auto bench = pipeline::generate_benchmark(c.data);
  pipeline::write_benchmark(dir, bench);
  write_manifest(out, o.out, "gen", c);
  spdlog::info("wrote {} train / {} val / {} test scenes to {}", bench.train.size(), bench.val.size(), bench.test.size(),
               dir.string());
  return 0;
}

int cmd_train(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  const fs::path dir = scenes_dir(o);
  const auto train_scenes = pipeline::read_split(dir, "train");
  const auto val_scenes = pipeline::read_split(dir, "val");
  const auto data = pipeline::make_dataset(train_scenes, val_scenes, c.data, c.train.seed);
  spdlog::info("training on {} patches from {} scenes, validating on {} scenes", data.train.size(), train_scenes.size(),
               val_scenes.size());
  fs::create_directories(o.out);
  const fs::path model_file = model_path(o);
  train::FitOptions fo;
  fo.checkpoint = fs::path(o.out) / "checkpoint.sinf";
  fo.history = fs::path(o.out) / "history.jsonl";
  if (o.resume) fo.resume = fs::path(*o.resume);
  if (!o.resume) {
    out.track(*fo.checkpoint);
    out.track(*fo.history);
  }
  fo.on_epoch = [](const train::EpochRecord& r) {
    spdlog::info("epoch {:3d} loss {:.4f} ce {:.4f} rate {:.4f} lr {:.2e} val_miou {:.4f} val_gate {:.3f}", r.epoch, r.loss,
                 r.cross_entropy, r.rate_loss, r.lr, r.val_miou, r.val_gate_rate);
  };
  train::FitResult fr;
  net::Model model = pipeline::train_model(c, data, fo, &fr);
  out.track(model_file);
  ckpt::save_model(model, model_file);
  write_manifest(out, o.out, "train", c);
  spdlog::info("best epoch {} ({} {:.4f}){}; model written to {}", fr.best_epoch, c.train.early_stop_metric,
               fr.best_metric, fr.early_stopped ? ", stopped early" : "", model_file.string());
  return 0;
}

int cmd_eval(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  net::Model model = load_model_or_fail(model_path(o));
  check_model_matches(model, c);
  const auto scenes = pipeline::eval_scenes(pipeline::read_split(scenes_dir(o), o.split), c.data.use_side);
  const auto summary = eval::evaluate(model, scenes, c.eval.patch, c.eval.stride, c.eval.exclude);
  const fs::path dir = fs::path(o.out) / (c.data.use_side ? "eval" : "eval_no_side");
  out.track(dir);
  std::string jsonl;
  for (const auto& s : summary.scenes) {
    out.write(dir / "labels" / (s.id + ".png"), io::encode_label_raster(s.result.labels));
    out.write(dir / "softmax" / (s.id + ".bin"), eval::encode_feature_map(s.result.mean_softmax));
    nlohmann::json rec = s.metrics.to_json();
    rec["scene"] = s.id;
    rec["gate_rate"] = s.result.gate_rate;
    jsonl += rec.dump() + "\n";
  }
  nlohmann::json total = summary.total.to_json();
  total["scene"] = "total";
  total["gate_rate"] = summary.gate_rate;
  jsonl += total.dump() + "\n";
  out.write(dir / "metrics.jsonl", jsonl);
  out.write(dir / "metrics.txt",
            fmt::format("split = {}\nscenes = {}\nside_info = {}\ngate_rate = {:.6f}\n", o.split, scenes.size(),
                        c.data.use_side, summary.gate_rate) +
                summary.total.to_text());
  write_manifest(out, o.out, "eval", c);
  fmt::print("{}", summary.total.to_text());
  return 0;
}

int cmd_infer(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  if (!o.scene) throw UsageError("infer needs --scene <bundle dir>");
  net::Model model = load_model_or_fail(model_path(o));
  check_model_matches(model, c);
  const auto bundle = synth::read_scene_bundle(*o.scene);
  side::AnnotationSet ann = bundle.annotations;
  if (o.annotations) {
    ann = side::read_annotations(*o.annotations, bundle.scene.height(), bundle.scene.width(), model.config().raw_channels);
  }
  if (!c.data.use_side) ann = ann.like();
  const int patch = std::min({c.eval.patch, bundle.scene.height(), bundle.scene.width()});
  const auto grid = eval::TileGrid::make(bundle.scene.height(), bundle.scene.width(), patch, c.eval.stride);
  const auto r = eval::sliding_infer(bundle.scene.image, ann, model, grid);
  out.write(fs::path(o.out) / "labels.png", io::encode_label_raster(r.labels));
  out.write(fs::path(o.out) / "mean_softmax.bin", eval::encode_feature_map(r.mean_softmax));
  const auto m = eval::compute_metrics(r.labels, bundle.scene.labels, model.config().num_classes, nn::LabelMap::kIgnore,
                                       c.eval.exclude);
  out.write(fs::path(o.out) / "metrics.txt", fmt::format("gate_rate = {:.6f}\n", r.gate_rate) + m.to_text());
  fmt::print("gate_rate = {:.6f}\n{}", r.gate_rate, m.to_text());
  return 0;
}

int cmd_ablate(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  const fs::path dir = scenes_dir(o);
  const auto test = pipeline::eval_scenes(pipeline::read_split(dir, o.split), true);
  eval::AblationTable table;
  if (o.kind == "side_fraction") {
    net::Model model = load_model_or_fail(model_path(o));
    check_model_matches(model, c);
    table = eval::ablate_side_fraction(model, test, c.eval.fractions, c.eval.seed, c.eval.patch, c.eval.stride);
  } else if (o.kind == "gate_rate" || o.kind == "embedding_dim") {
    const auto data =
        pipeline::make_dataset(pipeline::read_split(dir, "train"), pipeline::read_split(dir, "val"), c.data, c.train.seed);
    const bool gate = o.kind == "gate_rate";
    std::vector<double> values;
    if (gate) values = c.eval.gate_rates;
    else
      for (int d : c.eval.embedding_dims) values.push_back(d);
    table = eval::ablate_trained(
        o.kind, gate ? "target_rate" : "d", values,
        [&](double v) {
          pipeline::PipelineConfig cc = c;
          if (gate) cc.train.target_rate = v;
          else cc.model.d = static_cast<int>(v);
          cc.sync();
          spdlog::info("training {} = {}", o.kind, v);
          return pipeline::train_model(cc, data);
        },
        test, c.eval.patch, c.eval.stride);
  } else {
    throw UsageError(fmt::format("unknown ablation kind '{}' (side_fraction, gate_rate, embedding_dim)", o.kind));
  }
  out.write(fs::path(o.out) / fmt::format("ablation_{}.csv", o.kind), table.to_csv());
  write_manifest(out, o.out, "ablate", c);
  fmt::print("{}", table.to_csv());
  return 0;
}

int cmd_bench(const Options& o, Outputs& out) {
  const auto c = resolve(o);
  net::Model model = load_model_or_fail(model_path(o));
  check_model_matches(model, c);
  const auto scenes = pipeline::read_split(scenes_dir(o), o.split);
  if (scenes.empty()) throw UsageError("no scenes to benchmark on");
  const auto& s = scenes.front();
  const nn::Tensor raw = c.data.use_side ? side::rasterize(s.annotations) : nn::Tensor();
  const auto rows = eval::bench_inference(model, s.scene.image, raw, c.eval.bench_batches, c.eval.bench_patches,
                                          c.eval.bench_min_patches);
  out.write(fs::path(o.out) / "bench.csv", eval::bench_csv(rows));
  write_manifest(out, o.out, "bench", c);
  fmt::print("{}", eval::bench_csv(rows));
  return 0;
}

int cmd_serve(const Options& o, Outputs&) {
  const auto c = resolve(o);
  net::Model model = load_model_or_fail(model_path(o));
  auto scenes = service::load_scenes(scenes_dir(o));
  service::Service svc(std::move(model), std::move(scenes), c);
  svc.run(c.serve.bind);
  return 0;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("sinf");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  if (const char* level = std::getenv("SINF_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Side-information guided semantic segmentation"};
  app.require_subcommand(1);
  Options o;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--set", o.overrides, "Override a config value, e.g. train.epochs=5")->take_all();
    sub->add_option("--out", o.out, "Output directory")->capture_default_str();
    sub->add_option("--seed", o.seed, "Seed for data, model init, training and evaluation");
  };
  auto with_model = [&](CLI::App* sub) { sub->add_option("--model", o.model, "Model checkpoint (default <out>/model.sinf)"); };
  auto with_scenes = [&](CLI::App* sub) { sub->add_option("--scenes", o.scenes, "Scene root (default <out>/scenes)"); };

  auto* gen = app.add_subcommand("gen", "Generate synthetic scenes with simulated annotations");
  common(gen);
  with_scenes(gen);

  auto* train_cmd = app.add_subcommand("train", "Train a model on the train/val splits");
  common(train_cmd);
  with_model(train_cmd);
  with_scenes(train_cmd);
  train_cmd->add_option("--resume", o.resume, "Training checkpoint to continue from")->check(CLI::ExistingFile);
  train_cmd->add_flag("--no-side", o.no_side, "Train without side information");

  auto* eval_cmd = app.add_subcommand("eval", "Sliding-window evaluation of a split");
  common(eval_cmd);
  with_model(eval_cmd);
  with_scenes(eval_cmd);
  eval_cmd->add_option("--split", o.split, "Split to evaluate")->capture_default_str();
  eval_cmd->add_flag("--no-side", o.no_side, "Ignore annotations");

  auto* infer = app.add_subcommand("infer", "Segment one scene bundle");
  common(infer);
  with_model(infer);
  infer->add_option("--scene", o.scene, "Scene bundle directory")->required();
  infer->add_option("--annotations", o.annotations, "Annotation JSONL replacing the bundle's");
  infer->add_flag("--no-side", o.no_side, "Ignore annotations");

  auto* ablate = app.add_subcommand("ablate", "Ablation sweeps");
  common(ablate);
  with_model(ablate);
  with_scenes(ablate);
  ablate->add_option("--kind", o.kind, "side_fraction | gate_rate | embedding_dim")->capture_default_str();
  ablate->add_option("--split", o.split, "Split to evaluate")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "Inference timing");
  common(bench);
  with_model(bench);
  with_scenes(bench);
  bench->add_option("--split", o.split, "Split to take the scene from")->capture_default_str();

  auto* serve = app.add_subcommand("serve", "HTTP segmentation service");
  common(serve);
  with_model(serve);
  with_scenes(serve);
  serve->add_option("--bind", o.bind, "host:port (default from serve.bind)");

  CLI11_PARSE(app, argc, argv);

  Outputs out;
  try {
    int rc = 0;
    if (*gen) rc = cmd_gen(o, out);
    else if (*train_cmd) rc = cmd_train(o, out);
    else if (*eval_cmd) rc = cmd_eval(o, out);
    else if (*infer) rc = cmd_infer(o, out);
    else if (*ablate) rc = cmd_ablate(o, out);
    else if (*bench) rc = cmd_bench(o, out);
    else if (*serve) rc = cmd_serve(o, out);
    out.commit();
    return rc;
  } catch (const UsageError& e) {
    out.rollback();
    spdlog::error("{}", e.what());
    return 2;
  } catch (const ConfigError& e) {
    out.rollback();
    spdlog::error("configuration error: {}", e.what());
    return 2;
  } catch (const ckpt::CheckpointError& e) {
    out.rollback();
    spdlog::error("checkpoint error ({}): {}", ckpt::errc_name(e.code()), e.what());
    return 2;
  } catch (const std::exception& e) {
    out.rollback();
    spdlog::error("{}", e.what());
    return 1;
  }
}
