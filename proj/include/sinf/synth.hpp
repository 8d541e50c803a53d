#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sinf/annotation.hpp"
#include "sinf/tensor.hpp"

namespace sinet::synth {

using side::AnnotationSet;
using side::PixelCoord;

struct Region {
  int class_id = 0;
  int area = 0;  // non-ignore pixels
  double centroid_row = 0.0;
  double centroid_col = 0.0;
};

/// Voronoi scene. The last two classes form the twin pair: identical texture
/// distributions, separable only through side information.
struct SyntheticScene {
  nn::Tensor image;  // h x w x 3, multiples of 1/255 in [0, 1]
  nn::LabelMap labels;
  std::vector<Region> regions;
  std::vector<int> region_of;  // per pixel, -1 on ignore-labelled boundaries; empty for loaded bundles
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::uint64_t effective_seed = 0;
  int attempts = 1;

  int height() const { return labels.h; }
  int width() const { return labels.w; }
  std::pair<int, int> twin_classes() const { return {num_classes - 2, num_classes - 1}; }
  std::vector<std::string> class_names() const;
};

/// h, w >= 64 and 3 <= num_classes <= 32, else ConfigError. If a class is
/// missing from the labels the scene is regenerated from a derived seed; the
/// number of attempts is recorded.
SyntheticScene generate_scene(int h, int w, int num_classes, std::uint64_t seed);

struct StrokeSimParams {
  int min_region_area = 64;
  float stroke_width = 5.0F;
  int strokes_per_region = 1;
  int jitter = 2;

  void validate() const;
};

/// Polylines through the interior of every large enough region, labelled with
/// the region class. Every stroke pixel carries the stroke's class in the
/// ground truth. Raw channels = num_classes.
AnnotationSet simulate_strokes(const SyntheticScene& scene, const StrokeSimParams& params, std::uint64_t seed);

/// Poisson(density * A / 1000) points, A = non-ignore pixel count, placed
/// uniformly on non-ignore pixels. Features are noisy one-hot vectors whose
/// argmax stays the region class; locations get Gaussian noise then clipping.
AnnotationSet simulate_photos(const SyntheticScene& scene, double density, double noise_sigma, std::uint64_t seed,
                              double feature_sigma = 0.15);

int kmeans_count(std::size_t n, double p);

/// Keeps ceil(n*p) annotations: k-means++ then Lloyd on annotation centers,
/// one representative per cluster (nearest its centroid). Output preserves
/// input order.
AnnotationSet kmeans_sample(const AnnotationSet& annotations, double p, std::uint64_t seed);
std::vector<std::size_t> kmeans_select(const std::vector<side::Center>& centers, int k, std::uint64_t seed);

enum class DiscardRule { kNone, kIgnoreFraction, kSparseClass };

struct PatchParams {
  int patch = 128;
  int stride = 64;
  DiscardRule discard = DiscardRule::kIgnoreFraction;
  double ignore_threshold = 0.6;
  double sparse_min_fraction = 0.05;
  int normal_class = 0;
  bool flips = false;
  std::uint64_t seed = 0;
};

struct Patch {
  nn::Tensor image;
  nn::LabelMap labels;
  AnnotationSet annotations;  // re-based to the crop
  nn::Tensor side;            // crop of the full-scene raw side map
  PixelCoord origin;
  bool flipped_h = false;
  bool flipped_v = false;
};

/// Tile starts along one axis: 0, stride, ... with the last clamped to the border.
std::vector<int> tile_origins(int extent, int patch, int stride);

bool should_discard(const nn::LabelMap& labels, const PatchParams& params);

std::vector<Patch> extract_patches(const nn::Tensor& image, const nn::LabelMap& labels,
                                   const AnnotationSet& annotations, const PatchParams& params);
inline std::vector<Patch> extract_patches(const SyntheticScene& scene, const AnnotationSet& annotations,
                                          const PatchParams& params) {
  return extract_patches(scene.image, scene.labels, annotations, params);
}

Patch flip_horizontal(const Patch& p);
Patch flip_vertical(const Patch& p);

// ---- scene bundles ------------------------------------------------------------
// <dir>/image.png, labels.png, annotations.jsonl, meta.txt

struct SceneBundle {
  SyntheticScene scene;
  AnnotationSet annotations;
};

void write_scene_bundle(const std::filesystem::path& dir, const SyntheticScene& scene,
                        const AnnotationSet& annotations);
SceneBundle read_scene_bundle(const std::filesystem::path& dir);

}  // namespace sinet::synth
