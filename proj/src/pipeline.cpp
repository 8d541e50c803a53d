#include "sinf/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

#include "sinf/checkpoint.hpp"
#include "sinf/imageio.hpp"
#include "sinf/seed.hpp"

namespace sinet::pipeline {

synth::PatchParams DataConfig::patch_params(std::uint64_t s) const {
  synth::PatchParams p;
  p.patch = patch;
  p.stride = stride;
  if (discard == "none") p.discard = synth::DiscardRule::kNone;
  else if (discard == "ignore_fraction") p.discard = synth::DiscardRule::kIgnoreFraction;
  else if (discard == "sparse_class") p.discard = synth::DiscardRule::kSparseClass;
  else throw ConfigError(fmt::format("data.discard: unknown rule '{}'", discard));
  p.ignore_threshold = ignore_threshold;
  p.normal_class = normal_class;
  p.flips = false;
  p.seed = s;
  return p;
}

void PipelineConfig::sync() {
  model.num_classes = data.num_classes;
  model.raw_channels = data.num_classes;
  model.target_rate = train.target_rate;
  model.diffusion_init = train.diffusion_scalar_init;
}

void PipelineConfig::validate() const {
  if (data.train_scenes < 1 || data.val_scenes < 1 || data.test_scenes < 0) {
    throw ConfigError("data: need at least one train and one validation scene");
  }
  if (data.side_kind != "strokes" && data.side_kind != "photos") {
    throw ConfigError(fmt::format("data.side_kind: '{}' is not strokes or photos", data.side_kind));
  }
  if (data.patch > std::min(data.height, data.width)) throw ConfigError("data.patch: larger than the scene");
  if (data.stride < 1) throw ConfigError("data.stride: must be >= 1");
  (void)data.patch_params(0);
  data.strokes.validate();
  if (!(data.photo_density > 0.0)) throw ConfigError("data.photo_density: must be > 0");
  if (eval.patch > std::min(data.height, data.width) || eval.stride < 1) {
    throw ConfigError("eval.patch/eval.stride: tile must fit the scene and stride be positive");
  }
  if (train.val_patch > std::min(data.height, data.width)) throw ConfigError("train.val_patch: larger than the scene");
  model.validate();
  train.validate();
}

namespace {

nlohmann::json data_json(const DataConfig& d) {
  return {{"height", d.height},
          {"width", d.width},
          {"num_classes", d.num_classes},
          {"train_scenes", d.train_scenes},
          {"val_scenes", d.val_scenes},
          {"test_scenes", d.test_scenes},
          {"seed", d.seed},
          {"side_kind", d.side_kind},
          {"strokes",
           {{"min_region_area", d.strokes.min_region_area},
            {"stroke_width", d.strokes.stroke_width},
            {"strokes_per_region", d.strokes.strokes_per_region},
            {"jitter", d.strokes.jitter}}},
          {"photo_density", d.photo_density},
          {"photo_noise", d.photo_noise},
          {"patch", d.patch},
          {"stride", d.stride},
          {"discard", d.discard},
          {"ignore_threshold", d.ignore_threshold},
          {"normal_class", d.normal_class},
          {"use_side", d.use_side}};
}

nlohmann::json eval_json(const EvalConfig& e) {
  return {{"patch", e.patch},
          {"stride", e.stride},
          {"exclude", e.exclude},
          {"fractions", e.fractions},
          {"gate_rates", e.gate_rates},
          {"embedding_dims", e.embedding_dims},
          {"seed", e.seed},
          {"bench_batches", e.bench_batches},
          {"bench_patches", e.bench_patches},
          {"bench_min_patches", e.bench_min_patches}};
}

nlohmann::json serve_json(const ServeConfig& s) {
  return {{"bind", s.bind}, {"max_body_bytes", s.max_body_bytes}, {"ui_dir", s.ui_dir}};
}

// Rejects keys of `j` missing from `defaults`, recursively, naming the dotted path.
void check_keys(const nlohmann::json& j, const nlohmann::json& defaults, const std::string& prefix) {
  if (!j.is_object()) throw ConfigError(fmt::format("{}: expected an object", prefix));
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError(fmt::format("unknown config key '{}'", path));
    if (defaults[key].is_object()) check_keys(value, defaults[key], path);
  }
}

template <typename T>
void take(const nlohmann::json& j, const char* key, T& out, const std::string& section) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(fmt::format("{}.{}: {}", section, key, e.what()));
  }
}

}  // namespace

nlohmann::json to_json(const PipelineConfig& c) {
  return {{"data", data_json(c.data)},
          {"model", net::to_json(c.model)},
          {"train", train::to_json(c.train)},
          {"eval", eval_json(c.eval)},
          {"serve", serve_json(c.serve)}};
}

PipelineConfig config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  check_keys(j, to_json(c), "");
  if (j.contains("data")) {
    const auto& d = j["data"];
    take(d, "height", c.data.height, "data");
    take(d, "width", c.data.width, "data");
    take(d, "num_classes", c.data.num_classes, "data");
    take(d, "train_scenes", c.data.train_scenes, "data");
    take(d, "val_scenes", c.data.val_scenes, "data");
    take(d, "test_scenes", c.data.test_scenes, "data");
    take(d, "seed", c.data.seed, "data");
    take(d, "side_kind", c.data.side_kind, "data");
    if (d.contains("strokes")) {
      const auto& s = d["strokes"];
      take(s, "min_region_area", c.data.strokes.min_region_area, "data.strokes");
      take(s, "stroke_width", c.data.strokes.stroke_width, "data.strokes");
      take(s, "strokes_per_region", c.data.strokes.strokes_per_region, "data.strokes");
      take(s, "jitter", c.data.strokes.jitter, "data.strokes");
    }
    take(d, "photo_density", c.data.photo_density, "data");
    take(d, "photo_noise", c.data.photo_noise, "data");
    take(d, "patch", c.data.patch, "data");
    take(d, "stride", c.data.stride, "data");
    take(d, "discard", c.data.discard, "data");
    take(d, "ignore_threshold", c.data.ignore_threshold, "data");
    take(d, "normal_class", c.data.normal_class, "data");
    take(d, "use_side", c.data.use_side, "data");
  }
  if (j.contains("model")) c.model = net::model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train::train_config_from_json(j["train"]);
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    take(e, "patch", c.eval.patch, "eval");
    take(e, "stride", c.eval.stride, "eval");
    take(e, "exclude", c.eval.exclude, "eval");
    take(e, "fractions", c.eval.fractions, "eval");
    take(e, "gate_rates", c.eval.gate_rates, "eval");
    take(e, "embedding_dims", c.eval.embedding_dims, "eval");
    take(e, "seed", c.eval.seed, "eval");
    take(e, "bench_batches", c.eval.bench_batches, "eval");
    take(e, "bench_patches", c.eval.bench_patches, "eval");
    take(e, "bench_min_patches", c.eval.bench_min_patches, "eval");
  }
  if (j.contains("serve")) {
    const auto& s = j["serve"];
    take(s, "bind", c.serve.bind, "serve");
    take(s, "max_body_bytes", c.serve.max_body_bytes, "serve");
    take(s, "ui_dir", c.serve.ui_dir, "serve");
  }
  c.sync();
  c.validate();
  return c;
}

void apply_override(nlohmann::json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError(fmt::format("override '{}' is not key=value", assignment));
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  nlohmann::json* node = &j;
  std::string walked;
  std::istringstream parts(path);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    walked += (i ? "." : "") + keys[i];
    if (!node->is_object() || !node->contains(keys[i])) {
      throw ConfigError(fmt::format("unknown config key '{}'", walked));
    }
    node = &(*node)[keys[i]];
  }
  nlohmann::json value = nlohmann::json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  *node = value;
}

PipelineConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides) {
  PipelineConfig defaults;
  defaults.sync();
  nlohmann::json j = to_json(defaults);
  if (path) {
    const std::string text = io::read_file(*path);
    nlohmann::json file = nlohmann::json::parse(text, nullptr, false);
    if (file.is_discarded()) throw ConfigError(fmt::format("{}: not valid JSON", path->string()));
    check_keys(file, j, "");
    j.merge_patch(file);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return config_from_json(j);
}

std::uint64_t config_hash(const PipelineConfig& c) { return ckpt::fnv1a(ckpt::canonical(to_json(c))); }

// ---- benchmark ---------------------------------------------------------------------

NamedScene generate_named(const DataConfig& c, int index, const std::string& id) {
  NamedScene n;
  n.id = id;
  n.scene = synth::generate_scene(c.height, c.width, c.num_classes, derive_seed(c.seed, static_cast<std::uint64_t>(index)));
  const std::uint64_t side_seed = derive_seed(c.seed ^ 0x5157E11FULL, static_cast<std::uint64_t>(index));
  if (c.side_kind == "photos") {
    n.annotations = synth::simulate_photos(n.scene, c.photo_density, c.photo_noise, side_seed);
  } else {
    n.annotations = synth::simulate_strokes(n.scene, c.strokes, side_seed);
  }
  return n;
}

Benchmark generate_benchmark(const DataConfig& c) {
  Benchmark b;
  int index = 0;
  for (int i = 0; i < c.train_scenes; ++i, ++index) b.train.push_back(generate_named(c, index, fmt::format("train_{:03d}", i)));
  for (int i = 0; i < c.val_scenes; ++i, ++index) b.val.push_back(generate_named(c, index, fmt::format("val_{:03d}", i)));
  for (int i = 0; i < c.test_scenes; ++i, ++index) b.test.push_back(generate_named(c, index, fmt::format("test_{:03d}", i)));
  return b;
}

void write_benchmark(const std::filesystem::path& scenes_dir, const Benchmark& b) {
  auto put = [&](const std::string& split, const std::vector<NamedScene>& scenes) {
    for (const auto& s : scenes) synth::write_scene_bundle(scenes_dir / split / s.id, s.scene, s.annotations);
  };
  put("train", b.train);
  put("val", b.val);
  put("test", b.test);
}

std::vector<NamedScene> read_split(const std::filesystem::path& scenes_dir, const std::string& split) {
  const auto dir = scenes_dir / split;
  if (!std::filesystem::is_directory(dir)) {
    throw ConfigError(fmt::format("scene split not found: {}", dir.string()));
  }
  std::vector<std::filesystem::path> dirs;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_directory()) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<NamedScene> out;
  for (const auto& d : dirs) {
    auto bundle = synth::read_scene_bundle(d);
    out.push_back({d.filename().string(), std::move(bundle.scene), std::move(bundle.annotations)});
  }
  return out;
}

train::Dataset make_dataset(const std::vector<NamedScene>& train, const std::vector<NamedScene>& val,
                            const DataConfig& c, std::uint64_t seed) {
  train::Dataset ds;
  for (std::size_t i = 0; i < train.size(); ++i) {
    const auto& s = train[i];
    const side::AnnotationSet ann = c.use_side ? s.annotations : side::AnnotationSet(s.annotations.height, s.annotations.width, 0);
    auto patches = synth::extract_patches(s.scene, ann, c.patch_params(derive_seed(seed, i)));
    for (auto& p : patches) {
      p.annotations = side::AnnotationSet();
      ds.train.push_back(std::move(p));
    }
  }
  ds.val = eval_scenes(val, c.use_side);
  return ds;
}

std::vector<eval::EvalScene> eval_scenes(const std::vector<NamedScene>& scenes, bool use_side) {
  std::vector<eval::EvalScene> out;
  for (const auto& s : scenes) {
    out.push_back({s.id, s.scene.image, s.scene.labels, use_side ? s.annotations : s.annotations.like()});
  }
  return out;
}

net::Model train_model(const PipelineConfig& c, const train::Dataset& data, const train::FitOptions& options,
                       train::FitResult* result) {
  net::Model model(c.model);
  train::FitResult r = train::fit(model, data, c.train, options);
  if (result) *result = std::move(r);
  return model;
}

}  // namespace sinet::pipeline
