#include "sinf/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>

#include "sinf/imageio.hpp"
#include "sinf/seed.hpp"
#include "sinf/sideinfo.hpp"

namespace sinet::synth {

namespace {

// Uniform in [0, 1) from the top 53 bits; identical on every standard library.
double unit(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_index(std::mt19937_64& rng, int n) {
  return std::min(n - 1, static_cast<int>(unit(rng) * n));
}

struct Appearance {
  std::array<double, 3> base;
  double amplitude;
  double angle;
  double period;
};

Appearance appearance(int cls, int num_classes) {
  const int twin_a = num_classes - 2;
  if (cls >= twin_a) return {{0.42, 0.40, 0.62}, 0.0, 0.0, 1.0};
  static const std::array<std::array<double, 3>, 6> colors = {{{0.78, 0.32, 0.26},
                                                               {0.30, 0.64, 0.32},
                                                               {0.80, 0.74, 0.30},
                                                               {0.28, 0.60, 0.72},
                                                               {0.66, 0.38, 0.70},
                                                               {0.55, 0.55, 0.55}}};
  Appearance a;
  a.base = colors[cls % colors.size()];
  a.amplitude = 0.12;
  a.angle = std::numbers::pi * cls / std::max(1, twin_a);
  a.period = 6.0 + 2.0 * (cls % 4);
  return a;
}

constexpr double kTextureNoise = 0.05;

SyntheticScene generate_once(int h, int w, int num_classes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const int sites = std::max(num_classes + 2, h * w / 4096);
  std::vector<double> sr(sites);
  std::vector<double> sc(sites);
  for (int i = 0; i < sites; ++i) {
    sr[i] = unit(rng) * h;
    sc[i] = unit(rng) * w;
  }
  std::vector<int> cls(sites);
  for (int i = 0; i < sites; ++i) cls[i] = i < num_classes ? i : uniform_index(rng, num_classes);
  for (int i = sites - 1; i > 0; --i) std::swap(cls[i], cls[uniform_index(rng, i + 1)]);

  SyntheticScene s;
  s.num_classes = num_classes;
  s.labels = nn::LabelMap(h, w);
  s.region_of.assign(static_cast<std::size_t>(h) * w, -1);
  s.image = nn::Tensor(h, w, 3);
  std::normal_distribution<double> noise(0.0, kTextureNoise);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double d1 = std::numeric_limits<double>::infinity();
      double d2 = d1;
      int best = 0;
      for (int i = 0; i < sites; ++i) {
        const double d = std::hypot(y + 0.5 - sr[i], x + 0.5 - sc[i]);
        if (d < d1) {
          d2 = d1;
          d1 = d;
          best = i;
        } else if (d < d2) {
          d2 = d;
        }
      }
      const std::size_t p = static_cast<std::size_t>(y) * w + x;
      const bool boundary = d2 - d1 < 1.0;
      s.labels.data[p] = boundary ? nn::LabelMap::kIgnore : static_cast<std::uint8_t>(cls[best]);
      if (!boundary) s.region_of[p] = best;
      const Appearance a = appearance(cls[best], num_classes);
      const double phase = 2.0 * std::numbers::pi * (y * std::sin(a.angle) + x * std::cos(a.angle)) / a.period;
      const double pattern = a.amplitude * std::sin(phase);
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(a.base[c] + pattern + noise(rng), 0.0, 1.0);
        s.image.at(y, x, c) = static_cast<float>(std::round(v * 255.0) / 255.0);
      }
    }
  }
  s.regions.resize(sites);
  for (int i = 0; i < sites; ++i) s.regions[i].class_id = cls[i];
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int r = s.region_of[static_cast<std::size_t>(y) * w + x];
      if (r < 0) continue;
      s.regions[r].area += 1;
      s.regions[r].centroid_row += y;
      s.regions[r].centroid_col += x;
    }
  }
  for (auto& r : s.regions) {
    if (r.area > 0) {
      r.centroid_row /= r.area;
      r.centroid_col /= r.area;
    }
  }
  return s;
}

bool has_all_classes(const SyntheticScene& s) {
  std::vector<bool> seen(s.num_classes, false);
  for (auto v : s.labels.data)
    if (v != nn::LabelMap::kIgnore) seen[v] = true;
  return std::all_of(seen.begin(), seen.end(), [](bool b) { return b; });
}

}  // namespace

std::vector<std::string> SyntheticScene::class_names() const {
  std::vector<std::string> names;
  for (int c = 0; c < num_classes - 2; ++c) names.push_back(fmt::format("textured_{}", c));
  names.push_back("twin_a");
  names.push_back("twin_b");
  return names;
}

SyntheticScene generate_scene(int h, int w, int num_classes, std::uint64_t seed) {
  if (h < 64 || w < 64) throw ConfigError(fmt::format("scene size {}x{} below the 64x64 minimum", h, w));
  if (num_classes < 3 || num_classes > 32) {
    throw ConfigError(fmt::format("num_classes {} not in [3, 32]", num_classes));
  }
  constexpr int kMaxAttempts = 64;
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const std::uint64_t effective = attempt == 0 ? seed : splitmix64(seed + attempt);
    SyntheticScene s = generate_once(h, w, num_classes, effective);
    if (!has_all_classes(s)) continue;
    s.seed = seed;
    s.effective_seed = effective;
    s.attempts = attempt + 1;
    return s;
  }
  throw ConfigError(fmt::format("no scene with all {} classes after {} attempts", num_classes, kMaxAttempts));
}

// ---- strokes ------------------------------------------------------------------

void StrokeSimParams::validate() const {
  if (min_region_area < 0) throw ConfigError("strokes.min_region_area: must be >= 0");
  if (!(stroke_width >= 1.0F)) throw ConfigError("strokes.stroke_width: must be >= 1");
  if (strokes_per_region < 0) throw ConfigError("strokes.strokes_per_region: must be >= 0");
  if (jitter < 0) throw ConfigError("strokes.jitter: must be >= 0");
}

namespace {

// Pixels whose (2r+1)^2 neighbourhood lies inside their own region.
std::vector<std::uint8_t> interior(const SyntheticScene& s, int r) {
  const int h = s.height();
  const int w = s.width();
  auto id = [&](int y, int x) { return s.region_of[static_cast<std::size_t>(y) * w + x]; };
  std::vector<std::uint8_t> row_ok(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int me = id(y, x);
      if (me < 0 || x - r < 0 || x + r >= w) continue;
      bool ok = true;
      for (int dx = -r; dx <= r && ok; ++dx) ok = id(y, x + dx) == me;
      row_ok[static_cast<std::size_t>(y) * w + x] = ok;
    }
  }
  std::vector<std::uint8_t> out(row_ok.size(), 0);
  for (int y = r; y + r < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int me = id(y, x);
      if (me < 0) continue;
      bool ok = true;
      for (int dy = -r; dy <= r && ok; ++dy) {
        ok = row_ok[static_cast<std::size_t>(y + dy) * w + x] && id(y + dy, x) == me;
      }
      out[static_cast<std::size_t>(y) * w + x] = ok;
    }
  }
  return out;
}

bool stroke_matches(const side::Annotation& a, const SyntheticScene& s) {
  for (const auto& p : side::stroke_pixels(a, s.height(), s.width())) {
    if (s.labels.at(p.row, p.col) != a.class_id) return false;
  }
  return true;
}

}  // namespace

AnnotationSet simulate_strokes(const SyntheticScene& scene, const StrokeSimParams& params, std::uint64_t seed) {
  params.validate();
  if (scene.region_of.empty()) throw ConfigError("stroke simulation needs the scene's region map");
  const int h = scene.height();
  const int w = scene.width();
  AnnotationSet out(h, w, scene.num_classes);
  std::mt19937_64 rng(seed);
  const int radius = static_cast<int>(std::ceil(params.stroke_width / 2.0F)) + params.jitter + 1;
  const auto safe = interior(scene, radius);
  std::vector<std::vector<PixelCoord>> safe_by_region(scene.regions.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (safe[static_cast<std::size_t>(y) * w + x]) {
        safe_by_region[scene.region_of[static_cast<std::size_t>(y) * w + x]].push_back({y, x});
      }
    }
  }
  constexpr int kVertices = 3;
  constexpr int kTries = 16;
  for (std::size_t r = 0; r < scene.regions.size(); ++r) {
    const Region& reg = scene.regions[r];
    if (reg.area < params.min_region_area || reg.area == 0) continue;
    const auto& pool = safe_by_region[r];
    if (pool.empty()) continue;
    for (int k = 0; k < params.strokes_per_region; ++k) {
      for (int t = 0; t < kTries; ++t) {
        std::vector<PixelCoord> pts;
        for (int v = 0; v < kVertices; ++v) {
          PixelCoord p = pool[uniform_index(rng, static_cast<int>(pool.size()))];
          if (params.jitter > 0) {
            p.row += uniform_index(rng, 2 * params.jitter + 1) - params.jitter;
            p.col += uniform_index(rng, 2 * params.jitter + 1) - params.jitter;
          }
          p.row = std::clamp(p.row, 0, h - 1);
          p.col = std::clamp(p.col, 0, w - 1);
          pts.push_back(p);
        }
        auto a = side::Annotation::stroke(reg.class_id, std::move(pts), params.stroke_width);
        if (stroke_matches(a, scene)) {
          out.items.push_back(std::move(a));
          break;
        }
      }
    }
  }
  return out;
}

// ---- photos -------------------------------------------------------------------

AnnotationSet simulate_photos(const SyntheticScene& scene, double density, double noise_sigma, std::uint64_t seed,
                              double feature_sigma) {
  if (!(density > 0.0)) throw ConfigError("photos.density: must be > 0");
  if (!(noise_sigma >= 0.0)) throw ConfigError("photos.noise_sigma: must be >= 0");
  const int h = scene.height();
  const int w = scene.width();
  const int c = scene.num_classes;
  AnnotationSet out(h, w, c);
  std::vector<int> valid;
  for (int i = 0; i < h * w; ++i)
    if (scene.labels.data[i] != nn::LabelMap::kIgnore) valid.push_back(i);
  if (valid.empty()) return out;
  std::mt19937_64 rng(seed);
  std::poisson_distribution<int> count(density * static_cast<double>(valid.size()) / 1000.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    const int p = valid[uniform_index(rng, static_cast<int>(valid.size()))];
    const int cls = scene.labels.data[p];
    std::vector<float> f(c);
    for (int k = 0; k < c; ++k) f[k] = static_cast<float>((k == cls ? 1.0 : 0.0) + feature_sigma * gauss(rng));
    float other = -std::numeric_limits<float>::infinity();
    for (int k = 0; k < c; ++k)
      if (k != cls) other = std::max(other, f[k]);
    if (f[cls] <= other) f[cls] = other + 0.05F;
    if (f[cls] <= 0.0F) f[cls] = 0.05F;
    int row = p / w;
    int col = p % w;
    if (noise_sigma > 0.0) {
      row = static_cast<int>(std::lround(row + noise_sigma * gauss(rng)));
      col = static_cast<int>(std::lround(col + noise_sigma * gauss(rng)));
      row = std::clamp(row, 0, h - 1);
      col = std::clamp(col, 0, w - 1);
    }
    out.items.push_back(side::Annotation::point(std::move(f), {row, col}));
  }
  return out;
}

// ---- k-means subsampling --------------------------------------------------------

int kmeans_count(std::size_t n, double p) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(fmt::format("side fraction {} not in [0, 1]", p));
  const double k = std::ceil(static_cast<double>(n) * p - 1e-9);
  return std::clamp(static_cast<int>(k), 0, static_cast<int>(n));
}

std::vector<std::size_t> kmeans_select(const std::vector<side::Center>& pts, int k, std::uint64_t seed) {
  const std::size_t n = pts.size();
  if (k <= 0 || n == 0) return {};
  if (static_cast<std::size_t>(k) >= n) {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  auto d2 = [](const side::Center& a, const side::Center& b) {
    const double dr = a.row - b.row;
    const double dc = a.col - b.col;
    return dr * dr + dc * dc;
  };
  std::mt19937_64 rng(seed);
  std::vector<side::Center> cent;
  std::vector<bool> chosen(n, false);
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());
  auto take = [&](std::size_t i) {
    chosen[i] = true;
    cent.push_back(pts[i]);
    for (std::size_t j = 0; j < n; ++j) nearest[j] = std::min(nearest[j], d2(pts[j], pts[i]));
  };
  take(static_cast<std::size_t>(uniform_index(rng, static_cast<int>(n))));
  while (static_cast<int>(cent.size()) < k) {
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) total += nearest[j];
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = unit(rng) * total;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        acc += nearest[j];
        if (nearest[j] > 0.0 && u < acc) {
          pick = j;
          break;
        }
      }
      if (pick == n) {
        for (std::size_t j = n; j-- > 0;) {
          if (nearest[j] > 0.0) {
            pick = j;
            break;
          }
        }
      }
    } else {
      for (std::size_t j = 0; j < n && pick == n; ++j)
        if (!chosen[j]) pick = j;
    }
    take(pick);
  }

  std::vector<int> assign(n, 0);
  auto assign_all = [&] {
    for (std::size_t j = 0; j < n; ++j) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double d = d2(pts[j], cent[c]);
        if (d < best) {
          best = d;
          assign[j] = c;
        }
      }
    }
  };
  for (int iter = 0; iter < 100; ++iter) {
    assign_all();
    std::vector<side::Center> next(k);
    std::vector<int> count(k, 0);
    for (std::size_t j = 0; j < n; ++j) {
      next[assign[j]].row += pts[j].row;
      next[assign[j]].col += pts[j].col;
      count[assign[j]] += 1;
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] > 0) {
        next[c].row /= count[c];
        next[c].col /= count[c];
        continue;
      }
      // Empty cluster: reseed at the point farthest from its centroid.
      std::size_t far = 0;
      double fd = -1.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double d = d2(pts[j], cent[assign[j]]);
        if (d > fd) {
          fd = d;
          far = j;
        }
      }
      next[c] = pts[far];
    }
    double move = 0.0;
    for (int c = 0; c < k; ++c) move = std::max(move, std::sqrt(d2(next[c], cent[c])));
    cent = std::move(next);
    if (move < 1e-4) break;
  }
  assign_all();

  std::vector<std::size_t> picked;
  std::vector<bool> used(n, false);
  std::vector<int> empty;
  for (int c = 0; c < k; ++c) {
    std::size_t best = n;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (assign[j] != c) continue;
      const double d = d2(pts[j], cent[c]);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    if (best == n) {
      empty.push_back(c);
      continue;
    }
    used[best] = true;
    picked.push_back(best);
  }
  // Coincident centers can leave clusters empty; they take the nearest unused annotation.
  for (int c : empty) {
    std::size_t best = n;
    double bd = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (used[j]) continue;
      const double d = d2(pts[j], cent[c]);
      if (d < bd) {
        bd = d;
        best = j;
      }
    }
    used[best] = true;
    picked.push_back(best);
  }
  std::sort(picked.begin(), picked.end());
  return picked;
}

AnnotationSet kmeans_sample(const AnnotationSet& annotations, double p, std::uint64_t seed) {
  const int k = kmeans_count(annotations.size(), p);
  std::vector<side::Center> centers;
  centers.reserve(annotations.size());
  for (const auto& a : annotations.items) centers.push_back(a.center());
  AnnotationSet out = annotations.like();
  for (std::size_t i : kmeans_select(centers, k, seed)) out.items.push_back(annotations.items[i]);
  return out;
}

// ---- patches --------------------------------------------------------------------

std::vector<int> tile_origins(int extent, int patch, int stride) {
  if (patch <= 0 || stride <= 0) throw ConfigError(fmt::format("patch {} / stride {} must be > 0", patch, stride));
  if (patch > extent) throw ConfigError(fmt::format("patch {} larger than extent {}", patch, extent));
  std::vector<int> o;
  for (int v = 0; v + patch <= extent; v += stride) o.push_back(v);
  if (o.back() + patch < extent) o.push_back(extent - patch);
  return o;
}

bool should_discard(const nn::LabelMap& labels, const PatchParams& params) {
  const double n = static_cast<double>(labels.data.size());
  switch (params.discard) {
    case DiscardRule::kNone:
      return false;
    case DiscardRule::kIgnoreFraction: {
      const auto ignored = std::count(labels.data.begin(), labels.data.end(), nn::LabelMap::kIgnore);
      return static_cast<double>(ignored) / n > params.ignore_threshold;
    }
    case DiscardRule::kSparseClass: {
      std::size_t abnormal = 0;
      for (auto v : labels.data)
        if (v != nn::LabelMap::kIgnore && v != params.normal_class) ++abnormal;
      return static_cast<double>(abnormal) / n < params.sparse_min_fraction;
    }
  }
  return false;
}

namespace {

nn::Tensor flip_tensor(const nn::Tensor& t, bool horizontal) {
  if (t.empty()) return t;
  nn::Tensor out(t.shape());
  for (int y = 0; y < t.h(); ++y) {
    for (int x = 0; x < t.w(); ++x) {
      const int sy = horizontal ? y : t.h() - 1 - y;
      const int sx = horizontal ? t.w() - 1 - x : x;
      std::copy_n(t.pixel(sy, sx), t.c(), out.pixel(y, x));
    }
  }
  return out;
}

nn::LabelMap flip_labels(const nn::LabelMap& m, bool horizontal) {
  nn::LabelMap out(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) out.at(y, x) = m.at(horizontal ? y : m.h - 1 - y, horizontal ? m.w - 1 - x : x);
  return out;
}

nn::Tensor crop_tensor(const nn::Tensor& t, int r0, int c0, int h, int w) {
  nn::Tensor out(h, w, t.c());
  for (int y = 0; y < h; ++y) std::copy_n(t.pixel(r0 + y, c0), static_cast<std::size_t>(w) * t.c(), out.pixel(y, 0));
  return out;
}

nn::LabelMap crop_labels(const nn::LabelMap& m, int r0, int c0, int h, int w) {
  nn::LabelMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = m.at(r0 + y, c0 + x);
  return out;
}

}  // namespace

Patch flip_horizontal(const Patch& p) {
  Patch q = p;
  q.image = flip_tensor(p.image, true);
  q.labels = flip_labels(p.labels, true);
  q.side = flip_tensor(p.side, true);
  q.annotations = side::flip_annotations_horizontal(p.annotations);
  q.flipped_h = !p.flipped_h;
  return q;
}

Patch flip_vertical(const Patch& p) {
  Patch q = p;
  q.image = flip_tensor(p.image, false);
  q.labels = flip_labels(p.labels, false);
  q.side = flip_tensor(p.side, false);
  q.annotations = side::flip_annotations_vertical(p.annotations);
  q.flipped_v = !p.flipped_v;
  return q;
}

std::vector<Patch> extract_patches(const nn::Tensor& image, const nn::LabelMap& labels,
                                   const AnnotationSet& annotations, const PatchParams& params) {
  const int h = labels.h;
  const int w = labels.w;
  if (image.h() != h || image.w() != w) {
    throw ConfigError(fmt::format("image {}x{} and labels {}x{} differ", image.h(), image.w(), h, w));
  }
  if (params.patch > std::min(h, w)) {
    throw ConfigError(fmt::format("patch {} larger than scene {}x{}", params.patch, h, w));
  }
  const bool has_side = annotations.raw_channels > 0;
  if (has_side && (annotations.height != h || annotations.width != w)) {
    throw ConfigError("annotation geometry does not match the scene");
  }
  const nn::Tensor raw = has_side ? side::rasterize(annotations) : nn::Tensor();
  std::mt19937_64 rng(params.seed);
  std::vector<Patch> out;
  for (int r0 : tile_origins(h, params.patch, params.stride)) {
    for (int c0 : tile_origins(w, params.patch, params.stride)) {
      nn::LabelMap lab = crop_labels(labels, r0, c0, params.patch, params.patch);
      if (should_discard(lab, params)) continue;
      Patch p;
      p.origin = {r0, c0};
      p.image = crop_tensor(image, r0, c0, params.patch, params.patch);
      p.labels = std::move(lab);
      if (has_side) {
        p.side = crop_tensor(raw, r0, c0, params.patch, params.patch);
        p.annotations = side::crop_annotations(annotations, r0, c0, params.patch, params.patch);
      } else {
        p.annotations = AnnotationSet(params.patch, params.patch, 0);
      }
      if (params.flips) {
        const bool fh = (rng() >> 63) != 0;
        const bool fv = (rng() >> 63) != 0;
        if (fh) p = flip_horizontal(p);
        if (fv) p = flip_vertical(p);
      }
      out.push_back(std::move(p));
    }
  }
  return out;
}

// ---- bundles ------------------------------------------------------------------

void write_scene_bundle(const std::filesystem::path& dir, const SyntheticScene& scene,
                        const AnnotationSet& annotations) {
  std::filesystem::create_directories(dir);
  io::write_file(dir / "image.png", io::encode_rgb_png(scene.image));
  io::write_file(dir / "labels.png", io::encode_label_raster(scene.labels));
  side::write_annotations(dir / "annotations.jsonl", annotations);
  std::string meta;
  meta += fmt::format("seed = {}\n", scene.seed);
  meta += fmt::format("effective_seed = {}\n", scene.effective_seed);
  meta += fmt::format("attempts = {}\n", scene.attempts);
  meta += fmt::format("height = {}\nwidth = {}\n", scene.height(), scene.width());
  meta += fmt::format("num_classes = {}\n", scene.num_classes);
  meta += fmt::format("raw_channels = {}\n", annotations.raw_channels);
  const auto names = scene.class_names();
  meta += fmt::format("class_names = {}\n", fmt::join(names, ","));
  std::vector<std::string> legend;
  for (int c = 0; c < scene.num_classes; ++c) legend.push_back(io::hex_color(io::label_palette()[c]));
  meta += fmt::format("legend = {}\n", fmt::join(legend, ","));
  meta += fmt::format("twin_classes = {},{}\n", scene.twin_classes().first, scene.twin_classes().second);
  meta += fmt::format("ignore_label = {}\n", nn::LabelMap::kIgnore);
  meta += fmt::format("regions = {}\n", scene.regions.size());
  for (std::size_t i = 0; i < scene.regions.size(); ++i) {
    const auto& r = scene.regions[i];
    meta += fmt::format("region.{} = {} {} {:.3f} {:.3f}\n", i, r.class_id, r.area, r.centroid_row, r.centroid_col);
  }
  io::write_file(dir / "meta.txt", meta);
}

SceneBundle read_scene_bundle(const std::filesystem::path& dir) {
  std::map<std::string, std::string> kv;
  {
    std::istringstream in(io::read_file(dir / "meta.txt"));
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      auto trim = [](std::string s) {
        const auto b = s.find_first_not_of(" \t\r");
        const auto e = s.find_last_not_of(" \t\r");
        return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
      };
      kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
  }
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ConfigError(fmt::format("{}: missing '{}'", (dir / "meta.txt").string(), key));
    return it->second;
  };
  SceneBundle b;
  SyntheticScene& s = b.scene;
  s.seed = std::stoull(get("seed"));
  s.effective_seed = kv.count("effective_seed") ? std::stoull(kv["effective_seed"]) : s.seed;
  s.attempts = kv.count("attempts") ? std::stoi(kv["attempts"]) : 1;
  s.num_classes = std::stoi(get("num_classes"));
  const int h = std::stoi(get("height"));
  const int w = std::stoi(get("width"));
  s.image = io::decode_rgb_png(io::read_file(dir / "image.png"));
  s.labels = io::decode_label_raster(io::read_file(dir / "labels.png"));
  if (s.image.h() != h || s.image.w() != w || s.labels.h != h || s.labels.w != w) {
    throw ConfigError(fmt::format("{}: rasters do not match {}x{}", dir.string(), h, w));
  }
  const int regions = kv.count("regions") ? std::stoi(kv["regions"]) : 0;
  for (int i = 0; i < regions; ++i) {
    std::istringstream in(get(fmt::format("region.{}", i)));
    Region r;
    in >> r.class_id >> r.area >> r.centroid_row >> r.centroid_col;
    s.regions.push_back(r);
  }
  const int raw = kv.count("raw_channels") ? std::stoi(kv["raw_channels"]) : s.num_classes;
  const auto ann = dir / "annotations.jsonl";
  b.annotations = std::filesystem::exists(ann) ? side::read_annotations(ann, h, w, raw) : AnnotationSet(h, w, raw);
  return b;
}

}  // namespace sinet::synth
