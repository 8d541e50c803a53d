#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace sinet::side {

/// Invalid annotation input. `path()` names the offending record/field, e.g.
/// "annotations[3].points[1]" or "strokes[0].class_id".
class AnnotationError : public std::runtime_error {
 public:
  AnnotationError(std::string path, const std::string& what)
      : std::runtime_error(path + ": " + what), path_(std::move(path)) {}
  const std::string& path() const { return path_; }

 private:
  std::string path_;
};

enum class AnnotationKind { kStroke, kPoint };

struct PixelCoord {
  int row = 0;
  int col = 0;
  bool operator==(const PixelCoord&) const = default;
};

struct Center {
  double row = 0.0;
  double col = 0.0;
};

/// A brush stroke (class-labeled polyline with width) or a located feature
/// vector (e.g. a geotagged photo descriptor).
struct Annotation {
  AnnotationKind kind = AnnotationKind::kStroke;
  int class_id = -1;
  std::vector<float> feature;
  std::vector<PixelCoord> points;
  float width = 1.0F;

  static Annotation stroke(int class_id, std::vector<PixelCoord> points, float width);
  /// Normalizes `feature` to unit length; a zero vector is rejected.
  static Annotation point(std::vector<float> feature, PixelCoord at);

  /// Vertex mean for strokes, the location for points.
  Center center() const;
  bool operator==(const Annotation&) const = default;
};

struct AnnotationSet {
  int height = 0;
  int width = 0;
  int raw_channels = 0;
  std::vector<Annotation> items;

  AnnotationSet() = default;
  AnnotationSet(int h, int w, int channels) : height(h), width(w), raw_channels(channels) {}

  std::size_t size() const { return items.size(); }
  bool empty() const { return items.empty(); }
  /// An empty set with the same geometry.
  AnnotationSet like() const { return AnnotationSet(height, width, raw_channels); }

  /// Checks bounds, widths, class ids (< raw_channels for strokes) and
  /// feature lengths. Throws AnnotationError naming the first bad record.
  void validate(const std::string& prefix = "annotations") const;
};

// ---- line-delimited records -------------------------------------------------

nlohmann::json to_json(const Annotation& a);
/// Parses one record; `path` prefixes error messages.
Annotation annotation_from_json(const nlohmann::json& j, const std::string& path);

std::string to_jsonl(const AnnotationSet& set);
AnnotationSet annotations_from_jsonl(const std::string& text, int height, int width, int raw_channels);
void write_annotations(const std::filesystem::path& path, const AnnotationSet& set);
AnnotationSet read_annotations(const std::filesystem::path& path, int height, int width, int raw_channels);

// ---- geometry -----------------------------------------------------------------

/// Clips every annotation to the window [row0, row0+h) x [col0, col0+w) and
/// re-bases coordinates to it. Strokes are clipped segment by segment and may
/// split into several strokes; points outside the window are dropped.
AnnotationSet crop_annotations(const AnnotationSet& set, int row0, int col0, int h, int w);

AnnotationSet flip_annotations_horizontal(const AnnotationSet& set);
AnnotationSet flip_annotations_vertical(const AnnotationSet& set);

/// Pixel centers within width/2 of a stroke's polyline, in row-major order.
std::vector<PixelCoord> stroke_pixels(const Annotation& stroke, int height, int width);

}  // namespace sinet::side
