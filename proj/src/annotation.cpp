#include "sinf/annotation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>

namespace sinet::side {

using nlohmann::json;

Annotation Annotation::stroke(int class_id, std::vector<PixelCoord> points, float width) {
  Annotation a;
  a.kind = AnnotationKind::kStroke;
  a.class_id = class_id;
  a.points = std::move(points);
  a.width = width;
  return a;
}

Annotation Annotation::point(std::vector<float> feature, PixelCoord at) {
  double norm = 0.0;
  for (float v : feature) norm += static_cast<double>(v) * v;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw AnnotationError("feature", "point feature must be a finite non-zero vector");
  }
  for (float& v : feature) v = static_cast<float>(v / norm);
  Annotation a;
  a.kind = AnnotationKind::kPoint;
  a.feature = std::move(feature);
  a.points = {at};
  return a;
}

Center Annotation::center() const {
  Center c;
  if (points.empty()) return c;
  for (const auto& p : points) {
    c.row += p.row;
    c.col += p.col;
  }
  c.row /= static_cast<double>(points.size());
  c.col /= static_cast<double>(points.size());
  return c;
}

void AnnotationSet::validate(const std::string& prefix) const {
  for (std::size_t i = 0; i < items.size(); ++i) {
    const Annotation& a = items[i];
    const std::string at = fmt::format("{}[{}]", prefix, i);
    if (a.points.empty()) throw AnnotationError(at + ".points", "no coordinates");
    for (std::size_t k = 0; k < a.points.size(); ++k) {
      const auto& p = a.points[k];
      if (p.row < 0 || p.row >= height || p.col < 0 || p.col >= width) {
        throw AnnotationError(fmt::format("{}.points[{}]", at, k),
                              fmt::format("({}, {}) outside {}x{} image", p.row, p.col, height, width));
      }
    }
    if (a.kind == AnnotationKind::kStroke) {
      if (!(a.width >= 1.0F)) throw AnnotationError(at + ".width", "stroke width must be >= 1");
      if (a.class_id < 0 || a.class_id >= raw_channels) {
        throw AnnotationError(at + ".class_id",
                              fmt::format("class {} not in [0, {})", a.class_id, raw_channels));
      }
    } else {
      if (static_cast<int>(a.feature.size()) != raw_channels) {
        throw AnnotationError(at + ".feature", fmt::format("length {} != {}", a.feature.size(), raw_channels));
      }
      if (a.points.size() != 1) throw AnnotationError(at + ".points", "a point has exactly one coordinate");
    }
  }
}

json to_json(const Annotation& a) {
  json j;
  json pts = json::array();
  for (const auto& p : a.points) pts.push_back({p.row, p.col});
  if (a.kind == AnnotationKind::kStroke) {
    j["kind"] = "stroke";
    j["class_id"] = a.class_id;
    j["points"] = std::move(pts);
    j["width"] = a.width;
  } else {
    j["kind"] = "point";
    j["feature"] = a.feature;
    j["points"] = std::move(pts);
  }
  return j;
}

namespace {

PixelCoord coord_from_json(const json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number()) {
    throw AnnotationError(path, "expected [row, col]");
  }
  const double r = j[0].get<double>();
  const double c = j[1].get<double>();
  if (r != std::floor(r) || c != std::floor(c)) throw AnnotationError(path, "coordinates must be integers");
  return {static_cast<int>(r), static_cast<int>(c)};
}

}  // namespace

Annotation annotation_from_json(const json& j, const std::string& path) {
  if (!j.is_object()) throw AnnotationError(path, "expected an object");
  const auto kind_it = j.find("kind");
  std::string kind = "stroke";
  if (kind_it != j.end()) {
    if (!kind_it->is_string()) throw AnnotationError(path + ".kind", "expected a string");
    kind = kind_it->get<std::string>();
  }
  for (const auto& [key, value] : j.items()) {
    const bool known = key == "kind" || key == "points" ||
                       (kind == "stroke" && (key == "class_id" || key == "width")) ||
                       (kind == "point" && key == "feature");
    if (!known) throw AnnotationError(path + "." + key, fmt::format("unexpected field for a {}", kind));
  }
  const auto pts_it = j.find("points");
  if (pts_it == j.end() || !pts_it->is_array()) throw AnnotationError(path + ".points", "expected an array");
  std::vector<PixelCoord> pts;
  for (std::size_t k = 0; k < pts_it->size(); ++k) {
    pts.push_back(coord_from_json((*pts_it)[k], fmt::format("{}.points[{}]", path, k)));
  }
  if (kind == "stroke") {
    const auto cls = j.find("class_id");
    if (cls == j.end() || !cls->is_number_integer()) throw AnnotationError(path + ".class_id", "expected an integer");
    float width = 1.0F;
    if (const auto w = j.find("width"); w != j.end()) {
      if (!w->is_number()) throw AnnotationError(path + ".width", "expected a number");
      width = w->get<float>();
    }
    return Annotation::stroke(cls->get<int>(), std::move(pts), width);
  }
  if (kind == "point") {
    const auto feat = j.find("feature");
    if (feat == j.end() || !feat->is_array()) throw AnnotationError(path + ".feature", "expected an array");
    std::vector<float> f;
    for (std::size_t k = 0; k < feat->size(); ++k) {
      if (!(*feat)[k].is_number()) throw AnnotationError(fmt::format("{}.feature[{}]", path, k), "expected a number");
      f.push_back((*feat)[k].get<float>());
    }
    if (pts.size() != 1) throw AnnotationError(path + ".points", "a point has exactly one coordinate");
    try {
      return Annotation::point(std::move(f), pts[0]);
    } catch (const AnnotationError& e) {
      throw AnnotationError(path + ".feature", e.what());
    }
  }
  throw AnnotationError(path + ".kind", fmt::format("unknown kind '{}'", kind));
}

std::string to_jsonl(const AnnotationSet& set) {
  std::string out;
  for (const auto& a : set.items) {
    out += to_json(a).dump();
    out += '\n';
  }
  return out;
}

AnnotationSet annotations_from_jsonl(const std::string& text, int height, int width, int raw_channels) {
  AnnotationSet set(height, width, raw_channels);
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string path = fmt::format("annotations[{}]", set.items.size());
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw AnnotationError(path, fmt::format("line {}: {}", lineno, e.what()));
    }
    set.items.push_back(annotation_from_json(j, path));
  }
  set.validate();
  return set;
}

void write_annotations(const std::filesystem::path& path, const AnnotationSet& set) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_jsonl(set);
}

AnnotationSet read_annotations(const std::filesystem::path& path, int height, int width, int raw_channels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return annotations_from_jsonl(ss.str(), height, width, raw_channels);
}

namespace {

// Liang-Barsky clip of segment a->b against [0, h-1] x [0, w-1].
bool clip_segment(double& r0, double& c0, double& r1, double& c1, double h, double w) {
  double t0 = 0.0, t1 = 1.0;
  const double dr = r1 - r0, dc = c1 - c0;
  const double p[4] = {-dr, dr, -dc, dc};
  const double q[4] = {r0, (h - 1) - r0, c0, (w - 1) - c0};
  for (int i = 0; i < 4; ++i) {
    if (p[i] == 0.0) {
      if (q[i] < 0.0) return false;
    } else {
      const double t = q[i] / p[i];
      if (p[i] < 0.0) {
        t0 = std::max(t0, t);
      } else {
        t1 = std::min(t1, t);
      }
      if (t0 > t1) return false;
    }
  }
  const double nr0 = r0 + t0 * dr, nc0 = c0 + t0 * dc;
  const double nr1 = r0 + t1 * dr, nc1 = c0 + t1 * dc;
  r0 = nr0;
  c0 = nc0;
  r1 = nr1;
  c1 = nc1;
  return true;
}

PixelCoord round_coord(double r, double c, int h, int w) {
  return {std::clamp(static_cast<int>(std::lround(r)), 0, h - 1),
          std::clamp(static_cast<int>(std::lround(c)), 0, w - 1)};
}

}  // namespace

AnnotationSet crop_annotations(const AnnotationSet& set, int row0, int col0, int h, int w) {
  AnnotationSet out(h, w, set.raw_channels);
  for (const auto& a : set.items) {
    if (a.kind == AnnotationKind::kPoint) {
      const auto& p = a.points[0];
      if (p.row >= row0 && p.row < row0 + h && p.col >= col0 && p.col < col0 + w) {
        Annotation b = a;
        b.points[0] = {p.row - row0, p.col - col0};
        out.items.push_back(std::move(b));
      }
      continue;
    }
    if (a.points.size() == 1) {
      const auto& p = a.points[0];
      if (p.row >= row0 && p.row < row0 + h && p.col >= col0 && p.col < col0 + w) {
        out.items.push_back(Annotation::stroke(a.class_id, {{p.row - row0, p.col - col0}}, a.width));
      }
      continue;
    }
    std::vector<PixelCoord> current;
    auto flush = [&]() {
      if (!current.empty()) out.items.push_back(Annotation::stroke(a.class_id, std::move(current), a.width));
      current.clear();
    };
    for (std::size_t k = 0; k + 1 < a.points.size(); ++k) {
      double r0 = a.points[k].row - row0, c0 = a.points[k].col - col0;
      double r1 = a.points[k + 1].row - row0, c1 = a.points[k + 1].col - col0;
      const bool start_inside = r0 >= 0 && r0 <= h - 1 && c0 >= 0 && c0 <= w - 1;
      const bool end_inside = r1 >= 0 && r1 <= h - 1 && c1 >= 0 && c1 <= w - 1;
      if (!clip_segment(r0, c0, r1, c1, h, w)) {
        flush();
        continue;
      }
      const PixelCoord s = round_coord(r0, c0, h, w);
      const PixelCoord e = round_coord(r1, c1, h, w);
      if (!start_inside) flush();
      if (current.empty() || !(current.back() == s)) current.push_back(s);
      if (!(current.back() == e)) current.push_back(e);
      if (!end_inside) flush();
    }
    flush();
  }
  return out;
}

AnnotationSet flip_annotations_horizontal(const AnnotationSet& set) {
  AnnotationSet out = set;
  for (auto& a : out.items) {
    for (auto& p : a.points) p.col = set.width - 1 - p.col;
  }
  return out;
}

AnnotationSet flip_annotations_vertical(const AnnotationSet& set) {
  AnnotationSet out = set;
  for (auto& a : out.items) {
    for (auto& p : a.points) p.row = set.height - 1 - p.row;
  }
  return out;
}

namespace {

double segment_distance_sq(double py, double px, const PixelCoord& a, const PixelCoord& b) {
  const double dy = b.row - a.row, dx = b.col - a.col;
  const double len2 = dy * dy + dx * dx;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((py - a.row) * dy + (px - a.col) * dx) / len2, 0.0, 1.0);
  const double ry = a.row + t * dy - py, rx = a.col + t * dx - px;
  return ry * ry + rx * rx;
}

}  // namespace

std::vector<PixelCoord> stroke_pixels(const Annotation& stroke, int height, int width) {
  std::vector<PixelCoord> out;
  if (stroke.points.empty()) return out;
  const double radius = stroke.width / 2.0;
  const double r2 = radius * radius;
  int rmin = height, rmax = -1, cmin = width, cmax = -1;
  for (const auto& p : stroke.points) {
    rmin = std::min(rmin, p.row);
    rmax = std::max(rmax, p.row);
    cmin = std::min(cmin, p.col);
    cmax = std::max(cmax, p.col);
  }
  const int pad = static_cast<int>(std::ceil(radius));
  rmin = std::max(0, rmin - pad);
  rmax = std::min(height - 1, rmax + pad);
  cmin = std::max(0, cmin - pad);
  cmax = std::min(width - 1, cmax + pad);
  for (int y = rmin; y <= rmax; ++y) {
    for (int x = cmin; x <= cmax; ++x) {
      bool hit = false;
      if (stroke.points.size() == 1) {
        hit = segment_distance_sq(y, x, stroke.points[0], stroke.points[0]) <= r2;
      }
      for (std::size_t k = 0; !hit && k + 1 < stroke.points.size(); ++k) {
        hit = segment_distance_sq(y, x, stroke.points[k], stroke.points[k + 1]) <= r2;
      }
      if (hit) out.push_back({y, x});
    }
  }
  return out;
}

}  // namespace sinet::side
