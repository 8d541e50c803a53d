#include "sinf/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

#include <fmt/format.h>

#include "sinf/seed.hpp"
#include "sinf/sideinfo.hpp"
#include "sinf/synth.hpp"

namespace sinet::eval {

TileGrid TileGrid::make(int h, int w, int patch, int stride) {
  if (patch > h || patch > w) {
    throw ConfigError(fmt::format("tile {} larger than scene {}x{}", patch, h, w));
  }
  TileGrid g;
  g.patch = patch;
  g.stride = stride;
  for (int r : synth::tile_origins(h, patch, stride))
    for (int c : synth::tile_origins(w, patch, stride)) g.origins.push_back({r, c});
  return g;
}

namespace {

nn::Tensor crop(const nn::Tensor& t, int r0, int c0, int h, int w) {
  nn::Tensor out(h, w, t.c());
  for (int y = 0; y < h; ++y) std::copy_n(t.pixel(r0 + y, c0), static_cast<std::size_t>(w) * t.c(), out.pixel(y, 0));
  return out;
}

}  // namespace

std::uint8_t argmax_label(const float* probs, int classes) {
  int best = 0;
  for (int k = 1; k < classes; ++k)
    if (probs[k] > probs[best]) best = k;
  return static_cast<std::uint8_t>(best);
}

SegmentationResult sliding_infer(const nn::Tensor& image, const nn::Tensor& raw_side, const TilePredictor& predict,
                                 const TileGrid& grid) {
  const int h = image.h();
  const int w = image.w();
  if (grid.patch > h || grid.patch > w) {
    throw ConfigError(fmt::format("tile {} larger than scene {}x{}", grid.patch, h, w));
  }
  if (!raw_side.empty() && (raw_side.h() != h || raw_side.w() != w)) {
    throw ConfigError("side map does not match the image");
  }
  SegmentationResult r;
  r.coverage_counts.assign(static_cast<std::size_t>(h) * w, 0);
  nn::TensorD sum;
  double gate_sum = 0.0;
  for (const auto& o : grid.origins) {
    const nn::Tensor tile = crop(image, o.row, o.col, grid.patch, grid.patch);
    const nn::Tensor side = raw_side.empty() ? nn::Tensor() : crop(raw_side, o.row, o.col, grid.patch, grid.patch);
    double rate = 0.0;
    const nn::Tensor prob = predict(tile, side, rate);
    gate_sum += rate;
    if (sum.empty()) sum = nn::TensorD(h, w, prob.c());
    const int c = prob.c();
    for (int y = 0; y < grid.patch; ++y) {
      for (int x = 0; x < grid.patch; ++x) {
        const float* src = prob.pixel(y, x);
        double* dst = sum.pixel(o.row + y, o.col + x);
        for (int k = 0; k < c; ++k) dst[k] += src[k];
        r.coverage_counts[static_cast<std::size_t>(o.row + y) * w + o.col + x] += 1;
      }
    }
  }
  const int c = sum.c();
  r.mean_softmax = nn::Tensor(h, w, c);
  r.labels = nn::LabelMap(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const int n = r.coverage_counts[static_cast<std::size_t>(y) * w + x];
      float* dst = r.mean_softmax.pixel(y, x);
      const double* src = sum.pixel(y, x);
      for (int k = 0; k < c; ++k) dst[k] = static_cast<float>(src[k] / n);
      r.labels.at(y, x) = argmax_label(dst, c);
    }
  }
  r.gate_rate = grid.origins.empty() ? 0.0 : gate_sum / static_cast<double>(grid.origins.size());
  return r;
}

TilePredictor model_predictor(net::Model& model) {
  return [&model](const nn::Tensor& image, const nn::Tensor& side, double& gate_rate) {
    auto out = model.forward(image, side, net::Mode::kEval);
    gate_rate = out.trace.executed_fraction;
    return nn::softmax(out.logits);
  };
}

SegmentationResult sliding_infer(const nn::Tensor& image, const AnnotationSet& annotations, net::Model& model,
                                 const TileGrid& grid) {
  const nn::Tensor raw = annotations.empty() ? nn::Tensor() : side::rasterize(annotations);
  return sliding_infer(image, raw, model_predictor(model), grid);
}

// ---- metrics ---------------------------------------------------------------------

MetricsReport empty_metrics(int num_classes) {
  MetricsReport m;
  m.num_classes = num_classes;
  m.confusion.assign(num_classes, std::vector<std::int64_t>(num_classes, 0));
  m.per_class_iou.assign(num_classes, 0.0);
  m.class_present.assign(num_classes, false);
  return m;
}

void MetricsReport::add(const MetricsReport& other) {
  if (other.num_classes != num_classes) throw ConfigError("cannot add metrics over different class counts");
  for (int i = 0; i < num_classes; ++i)
    for (int j = 0; j < num_classes; ++j) confusion[i][j] += other.confusion[i][j];
  counted += other.counted;
}

void MetricsReport::finalize(const std::vector<int>& exclude) {
  defined = counted > 0;
  std::int64_t correct = 0;
  for (int i = 0; i < num_classes; ++i) correct += confusion[i][i];
  pixel_accuracy = defined ? static_cast<double>(correct) / static_cast<double>(counted) : 0.0;
  double iou_sum = 0.0;
  int n = 0;
  for (int k = 0; k < num_classes; ++k) {
    std::int64_t gt = 0;
    std::int64_t pred = 0;
    for (int j = 0; j < num_classes; ++j) {
      gt += confusion[k][j];
      pred += confusion[j][k];
    }
    const std::int64_t uni = gt + pred - confusion[k][k];
    const bool excluded = std::find(exclude.begin(), exclude.end(), k) != exclude.end();
    class_present[k] = uni > 0 && !excluded;
    per_class_iou[k] = uni > 0 ? static_cast<double>(confusion[k][k]) / static_cast<double>(uni) : 0.0;
    if (class_present[k]) {
      iou_sum += per_class_iou[k];
      ++n;
    }
  }
  miou = n > 0 ? iou_sum / n : 0.0;
  if (n == 0) defined = false;
}

MetricsReport compute_metrics(const nn::LabelMap& pred, const nn::LabelMap& gt, int num_classes,
                              std::uint8_t ignore_index, const std::vector<int>& exclude) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw ConfigError(fmt::format("prediction {}x{} and ground truth {}x{} differ", pred.h, pred.w, gt.h, gt.w));
  }
  MetricsReport m = empty_metrics(num_classes);
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    const int g = gt.data[i];
    if (g == ignore_index) continue;
    const int p = pred.data[i];
    if (g >= num_classes) throw ConfigError(fmt::format("ground-truth label {} >= {} classes", g, num_classes));
    if (p >= num_classes) throw ConfigError(fmt::format("predicted label {} >= {} classes", p, num_classes));
    m.confusion[g][p] += 1;
    m.counted += 1;
  }
  m.finalize(exclude);
  return m;
}

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j;
  j["defined"] = defined;
  j["pixels"] = counted;
  j["pixel_accuracy"] = defined ? nlohmann::json(pixel_accuracy) : nlohmann::json(nullptr);
  j["miou"] = defined ? nlohmann::json(miou) : nlohmann::json(nullptr);
  nlohmann::json iou = nlohmann::json::array();
  for (int k = 0; k < num_classes; ++k) {
    iou.push_back(class_present[k] ? nlohmann::json(per_class_iou[k]) : nlohmann::json(nullptr));
  }
  j["per_class_iou"] = iou;
  j["confusion"] = confusion;
  return j;
}

std::string MetricsReport::to_text() const {
  std::string out;
  out += fmt::format("pixels = {}\n", counted);
  if (!defined) {
    out += "pixel_accuracy = undefined\nmiou = undefined\n";
  } else {
    out += fmt::format("pixel_accuracy = {:.6f}\nmiou = {:.6f}\n", pixel_accuracy, miou);
  }
  for (int k = 0; k < num_classes; ++k) {
    if (class_present[k]) out += fmt::format("iou.{} = {:.6f}\n", k, per_class_iou[k]);
    else out += fmt::format("iou.{} = absent\n", k);
  }
  return out;
}

// ---- feature map dump ----------------------------------------------------------

namespace {

constexpr char kMapMagic[8] = {'S', 'I', 'N', 'F', 'M', 'A', 'P', '1'};

}  // namespace

std::string encode_feature_map(const nn::Tensor& t) {
  std::string out(kMapMagic, 8);
  const std::int32_t dims[3] = {t.h(), t.w(), t.c()};
  out.append(reinterpret_cast<const char*>(dims), sizeof dims);
  out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  return out;
}

nn::Tensor decode_feature_map(const std::string& bytes) {
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMapMagic, 8) != 0) throw ConfigError("not a feature map dump");
  std::int32_t dims[3];
  std::memcpy(dims, bytes.data() + 8, sizeof dims);
  if (dims[0] < 0 || dims[1] < 0 || dims[2] < 0) throw ConfigError("feature map has negative dimensions");
  nn::Tensor t(dims[0], dims[1], dims[2]);
  if (bytes.size() != 20 + t.size() * sizeof(float)) throw ConfigError("feature map dump is truncated");
  std::memcpy(t.data(), bytes.data() + 20, t.size() * sizeof(float));
  return t;
}

// ---- scenes --------------------------------------------------------------------

EvalSummary evaluate(net::Model& model, const std::vector<EvalScene>& scenes, int patch, int stride,
                     const std::vector<int>& exclude, bool use_annotations) {
  EvalSummary s;
  s.total = empty_metrics(model.config().num_classes);
  double rate = 0.0;
  for (const auto& scene : scenes) {
    const TileGrid grid = TileGrid::make(scene.image.h(), scene.image.w(), patch, stride);
    SceneEval e;
    e.id = scene.id;
    const AnnotationSet none = scene.annotations.like();
    e.result = sliding_infer(scene.image, use_annotations ? scene.annotations : none, model, grid);
    e.metrics = compute_metrics(e.result.labels, scene.labels, model.config().num_classes, nn::LabelMap::kIgnore,
                                exclude);
    s.total.add(e.metrics);
    rate += e.result.gate_rate;
    s.scenes.push_back(std::move(e));
  }
  s.total.finalize(exclude);
  s.gate_rate = scenes.empty() ? 0.0 : rate / static_cast<double>(scenes.size());
  return s;
}

// ---- ablations -------------------------------------------------------------------

std::string AblationTable::to_csv() const {
  std::string out = fmt::format("{},pixel_accuracy,miou,gate_rate\n", column);
  for (const auto& r : rows) {
    out += fmt::format("{:.4g},{:.6f},{:.6f},{:.6f}\n", r.x, r.pixel_accuracy, r.miou, r.gate_rate);
  }
  return out;
}

std::uint64_t scene_seed(std::uint64_t seed, std::size_t index) { return derive_seed(seed, index); }

AblationTable ablate_side_fraction(net::Model& model, const std::vector<EvalScene>& scenes,
                                   const std::vector<double>& fractions, std::uint64_t seed, int patch, int stride) {
  AblationTable t;
  t.kind = "side_fraction";
  t.column = "fraction";
  for (double p : fractions) {
    std::vector<EvalScene> sub = scenes;
    for (std::size_t i = 0; i < sub.size(); ++i) {
      sub[i].annotations = synth::kmeans_sample(scenes[i].annotations, p, scene_seed(seed, i));
    }
    const EvalSummary s = evaluate(model, sub, patch, stride);
    t.rows.push_back({p, s.total.pixel_accuracy, s.total.miou, s.gate_rate});
  }
  return t;
}

AblationTable ablate_trained(const std::string& kind, const std::string& column, const std::vector<double>& values,
                             const std::function<net::Model(double)>& train_one,
                             const std::vector<EvalScene>& scenes, int patch, int stride) {
  AblationTable t;
  t.kind = kind;
  t.column = column;
  for (double v : values) {
    net::Model m = train_one(v);
    const EvalSummary s = evaluate(m, scenes, patch, stride);
    t.rows.push_back({v, s.total.pixel_accuracy, s.total.miou, s.gate_rate});
  }
  return t;
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("spearman needs two equal-length series of size >= 2");
  const auto rx = ranks(x);
  const auto ry = ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

// ---- timing ------------------------------------------------------------------------

std::int64_t peak_working_set() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("VmHWM:", 0) == 0) return std::stoll(line.substr(6)) * 1024;
  }
  return 0;
}

std::vector<BenchRow> bench_inference(net::Model& model, const nn::Tensor& image, const nn::Tensor& raw_side,
                                      const std::vector<int>& batches, const std::vector<int>& patches,
                                      int min_patches, int warmup) {
  using clock = std::chrono::steady_clock;
  std::vector<BenchRow> rows;
  for (int patch : patches) {
    const TileGrid grid = TileGrid::make(image.h(), image.w(), patch, std::max(1, patch / 2));
    auto tile = [&](std::size_t i, nn::Tensor& img, nn::Tensor& side) {
      const auto& o = grid.origins[i % grid.origins.size()];
      img = crop(image, o.row, o.col, patch, patch);
      side = raw_side.empty() ? nn::Tensor() : crop(raw_side, o.row, o.col, patch, patch);
    };
    for (int batch : batches) {
      if (batch <= 0) throw ConfigError(fmt::format("batch size {} must be > 0", batch));
      std::vector<nn::Tensor> imgs(batch);
      std::vector<nn::Tensor> sides(batch);
      for (int b = 0; b < batch; ++b) tile(static_cast<std::size_t>(b), imgs[b], sides[b]);
      for (int i = 0; i < warmup; ++i) (void)model.forward(imgs[0], sides[0], net::Mode::kEval);
      const int rounds = (min_patches + batch - 1) / batch;
      const auto t0 = clock::now();
      for (int r = 0; r < rounds; ++r)
        for (int b = 0; b < batch; ++b) (void)model.forward(imgs[b], sides[b], net::Mode::kEval);
      const double secs = std::chrono::duration<double>(clock::now() - t0).count();
      BenchRow row;
      row.batch = batch;
      row.patch = patch;
      row.patches = rounds * batch;
      row.seconds_per_patch = secs / row.patches;
      row.peak_bytes = peak_working_set();
      rows.push_back(row);
    }
  }
  return rows;
}

std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = "patch,batch,patches,seconds_per_patch,peak_bytes\n";
  for (const auto& r : rows) {
    out += fmt::format("{},{},{},{:.6e},{}\n", r.patch, r.batch, r.patches, r.seconds_per_patch, r.peak_bytes);
  }
  return out;
}

}  // namespace sinet::eval
