#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/eval.hpp"
#include "sinf/model.hpp"
#include "sinf/synth.hpp"
#include "sinf/trainer.hpp"

namespace sinet::pipeline {

inline constexpr const char* kVersion = "0.1.0";

struct DataConfig {
  int height = 256;
  int width = 256;
  int num_classes = 4;
  int train_scenes = 8;
  int val_scenes = 2;
  int test_scenes = 2;
  std::uint64_t seed = 1;
  std::string side_kind = "strokes";  // strokes | photos
  synth::StrokeSimParams strokes;
  double photo_density = 2.0;
  double photo_noise = 2.0;
  int patch = 128;
  int stride = 64;
  std::string discard = "ignore_fraction";  // none | ignore_fraction | sparse_class
  double ignore_threshold = 0.6;
  int normal_class = 0;
  bool use_side = true;

  synth::PatchParams patch_params(std::uint64_t seed) const;
};

struct EvalConfig {
  int patch = 128;
  int stride = 64;
  std::vector<int> exclude;
  std::vector<double> fractions = eval::kSideFractions;
  std::vector<double> gate_rates = eval::kGateRates;
  std::vector<int> embedding_dims = {2, 4, 8, 16};
  std::uint64_t seed = 5;
  std::vector<int> bench_batches = {1, 64};
  std::vector<int> bench_patches = {40, 80, 160};
  int bench_min_patches = 50;
};

struct ServeConfig {
  std::string bind = "127.0.0.1:8080";
  std::size_t max_body_bytes = 4 << 20;
  std::string ui_dir;  // static files served under /ui when set
};

struct PipelineConfig {
  DataConfig data;
  net::ModelConfig model;
  train::TrainConfig train;
  EvalConfig eval;
  ServeConfig serve;

  /// Copies data-derived and duplicated fields into the model config:
  /// class counts, the raw side width, target rate and diffusion init.
  void sync();
  void validate() const;
};

nlohmann::json to_json(const PipelineConfig& c);
/// Missing keys keep defaults; unknown keys throw ConfigError naming the dotted path.
PipelineConfig config_from_json(const nlohmann::json& j);

/// Applies "a.b.c=value" to `j`. The value is parsed as JSON when possible,
/// otherwise taken as a string. Unknown paths throw ConfigError.
void apply_override(nlohmann::json& j, const std::string& assignment);

/// Defaults, then the optional JSON file, then overrides in order.
PipelineConfig load_config(const std::optional<std::filesystem::path>& path, const std::vector<std::string>& overrides);

std::uint64_t config_hash(const PipelineConfig& c);

// ---- benchmark data ----------------------------------------------------------------

struct NamedScene {
  std::string id;
  synth::SyntheticScene scene;
  side::AnnotationSet annotations;
};

struct Benchmark {
  std::vector<NamedScene> train;
  std::vector<NamedScene> val;
  std::vector<NamedScene> test;
};

/// Scene i (counting train, val, test in order) uses derive_seed(seed, i);
/// its annotations use an independent derived seed.
Benchmark generate_benchmark(const DataConfig& c);
NamedScene generate_named(const DataConfig& c, int index, const std::string& id);

void write_benchmark(const std::filesystem::path& scenes_dir, const Benchmark& b);
/// Reads every bundle in <scenes_dir>/<split>, sorted by directory name.
std::vector<NamedScene> read_split(const std::filesystem::path& scenes_dir, const std::string& split);

train::Dataset make_dataset(const std::vector<NamedScene>& train, const std::vector<NamedScene>& val,
                            const DataConfig& c, std::uint64_t seed);
std::vector<eval::EvalScene> eval_scenes(const std::vector<NamedScene>& scenes, bool use_side);

/// End-to-end helper used by the CLI and tests: trains a fresh model.
net::Model train_model(const PipelineConfig& c, const train::Dataset& data, const train::FitOptions& options = {},
                       train::FitResult* result = nullptr);

}  // namespace sinet::pipeline
