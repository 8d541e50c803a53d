#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/annotation.hpp"
#include "sinf/model.hpp"
#include "sinf/tensor.hpp"

namespace sinet::eval {

using side::AnnotationSet;
using side::PixelCoord;

struct TileGrid {
  int patch = 0;
  int stride = 0;
  std::vector<PixelCoord> origins;  // raster order, last row/col clamped to the border

  /// Throws ConfigError when the patch exceeds the scene or sizes are not positive.
  static TileGrid make(int h, int w, int patch, int stride);
};

struct SegmentationResult {
  nn::LabelMap labels;
  nn::Tensor mean_softmax;
  std::vector<int> coverage_counts;
  double gate_rate = 0.0;
};

/// Maps an image tile and its raw side crop (empty when there is no side
/// information) to per-pixel class probabilities; `gate_rate` receives the
/// executed fraction of gated blocks.
using TilePredictor = std::function<nn::Tensor(const nn::Tensor& image, const nn::Tensor& side, double& gate_rate)>;

/// Accumulates tile softmaxes in raster tile order (double sums), divides by
/// the per-pixel count, then takes the argmax with lowest-index tie-break.
SegmentationResult sliding_infer(const nn::Tensor& image, const nn::Tensor& raw_side, const TilePredictor& predict,
                                 const TileGrid& grid);

/// Eval-mode model prediction; the side map is the full-scene rasterization
/// of `annotations`, cropped per tile.
SegmentationResult sliding_infer(const nn::Tensor& image, const AnnotationSet& annotations, net::Model& model,
                                 const TileGrid& grid);

TilePredictor model_predictor(net::Model& model);

std::uint8_t argmax_label(const float* probs, int classes);

struct MetricsReport {
  int num_classes = 0;
  std::vector<std::vector<std::int64_t>> confusion;  // [gt][pred]
  std::int64_t counted = 0;
  bool defined = false;  // false when every pixel is ignored
  double pixel_accuracy = 0.0;
  std::vector<double> per_class_iou;
  std::vector<bool> class_present;  // present in GT or prediction and not excluded
  double miou = 0.0;

  void add(const MetricsReport& other);
  /// Recomputes accuracy and IoU from the confusion matrix.
  void finalize(const std::vector<int>& exclude = {});
  nlohmann::json to_json() const;
  std::string to_text() const;
};

MetricsReport empty_metrics(int num_classes);

/// Confusion-matrix metrics. Prediction values must be < num_classes; GT
/// pixels equal to `ignore_index` are skipped.
MetricsReport compute_metrics(const nn::LabelMap& pred, const nn::LabelMap& gt, int num_classes,
                              std::uint8_t ignore_index = nn::LabelMap::kIgnore, const std::vector<int>& exclude = {});

/// Binary dump: "SINFMAP1", i32 h, w, c, float32 data.
std::string encode_feature_map(const nn::Tensor& t);
nn::Tensor decode_feature_map(const std::string& bytes);

// ---- evaluation over scenes ------------------------------------------------------

struct EvalScene {
  std::string id;
  nn::Tensor image;
  nn::LabelMap labels;
  AnnotationSet annotations;
};

struct SceneEval {
  std::string id;
  SegmentationResult result;
  MetricsReport metrics;
};

struct EvalSummary {
  std::vector<SceneEval> scenes;
  MetricsReport total;  // confusion summed over scenes
  double gate_rate = 0.0;
};

EvalSummary evaluate(net::Model& model, const std::vector<EvalScene>& scenes, int patch, int stride,
                     const std::vector<int>& exclude = {}, bool use_annotations = true);

// ---- ablations ---------------------------------------------------------------

struct AblationRow {
  double x = 0.0;  // fraction, gate target or embedding dim
  double pixel_accuracy = 0.0;
  double miou = 0.0;
  double gate_rate = 0.0;
};

struct AblationTable {
  std::string kind;
  std::string column;
  std::vector<AblationRow> rows;
  std::string to_csv() const;
};

inline const std::vector<double> kSideFractions = {0.0, 0.2, 0.4, 0.6, 0.8, 1.0};
inline const std::vector<double> kGateRates = {0.8, 0.6, 0.4};

/// Per-scene k-means seed: derived from `seed` and the scene index.
std::uint64_t scene_seed(std::uint64_t seed, std::size_t index);

AblationTable ablate_side_fraction(net::Model& model, const std::vector<EvalScene>& scenes,
                                   const std::vector<double>& fractions, std::uint64_t seed, int patch, int stride);

/// Trains a fresh model for each value via `train_one` and evaluates it.
AblationTable ablate_trained(const std::string& kind, const std::string& column, const std::vector<double>& values,
                             const std::function<net::Model(double)>& train_one,
                             const std::vector<EvalScene>& scenes, int patch, int stride);

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

// ---- timing ------------------------------------------------------------------

struct BenchRow {
  int batch = 0;
  int patch = 0;
  int patches = 0;
  double seconds_per_patch = 0.0;
  std::int64_t peak_bytes = 0;
};

/// Peak resident set size of this process (VmHWM), 0 when unavailable.
std::int64_t peak_working_set();

/// For every (patch, batch) pair: warm up, then time eval-mode forwards over
/// at least `min_patches` crops taken from the scene, `batch` at a time.
std::vector<BenchRow> bench_inference(net::Model& model, const nn::Tensor& image, const nn::Tensor& raw_side,
                                      const std::vector<int>& batches, const std::vector<int>& patches,
                                      int min_patches = 50, int warmup = 3);
std::string bench_csv(const std::vector<BenchRow>& rows);

}  // namespace sinet::eval
