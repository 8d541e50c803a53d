#include "sinf/service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "sinf/checkpoint.hpp"
#include "sinf/eval.hpp"
#include "sinf/imageio.hpp"
#include "sinf/synth.hpp"

namespace sinet::service {

using nlohmann::json;

json HttpError::body() const {
  json j = {{"v", kWireVersion}, {"error", what()}, {"status", status_}};
  if (!path_.empty()) j["path"] = path_;
  return j;
}

std::vector<SceneEntry> load_scenes(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root)) throw ConfigError(fmt::format("scenes directory not found: {}", root.string()));
  std::vector<std::filesystem::path> dirs;
  auto consider = [&](const std::filesystem::path& d) {
    if (std::filesystem::exists(d / "meta.txt")) dirs.push_back(d);
  };
  consider(root);
  for (const auto& e : std::filesystem::directory_iterator(root)) {
    if (!e.is_directory()) continue;
    consider(e.path());
    for (const auto& f : std::filesystem::directory_iterator(e.path()))
      if (f.is_directory()) consider(f.path());
  }
  std::sort(dirs.begin(), dirs.end(), [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  std::vector<SceneEntry> out;
  for (const auto& d : dirs) {
    auto b = synth::read_scene_bundle(d);
    SceneEntry s;
    s.id = d.filename().string();
    if (std::any_of(out.begin(), out.end(), [&](const SceneEntry& o) { return o.id == s.id; })) {
      throw ConfigError(fmt::format("duplicate scene id '{}' under {}", s.id, root.string()));
    }
    s.image = std::move(b.scene.image);
    s.labels = std::move(b.scene.labels);
    s.num_classes = b.scene.num_classes;
    s.image_png = io::read_file(d / "image.png");
    out.push_back(std::move(s));
  }
  return out;
}

SegmentRequest parse_segment_request(const json& body, const std::string& scene_id, int height, int width,
                                     int num_classes) {
  if (!body.is_object()) throw HttpError(400, "", "request body must be a JSON object");
  static const std::vector<std::string> known = {"v", "scene_id", "strokes", "side_fraction", "return_confidence"};
  for (const auto& [key, value] : body.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw HttpError(400, key, fmt::format("unknown field '{}'", key));
    }
  }
  if (body.contains("v") && body["v"] != kWireVersion) {
    throw HttpError(400, "v", fmt::format("unsupported payload version {}", body["v"].dump()));
  }
  if (body.contains("scene_id") && body["scene_id"] != scene_id) {
    throw HttpError(400, "scene_id", "scene_id does not match the URL");
  }
  SegmentRequest r;
  r.scene_id = scene_id;
  r.strokes = side::AnnotationSet(height, width, num_classes);
  if (body.contains("strokes")) {
    const auto& s = body["strokes"];
    if (!s.is_array()) throw HttpError(400, "strokes", "expected an array");
    for (std::size_t i = 0; i < s.size(); ++i) {
      const std::string path = fmt::format("strokes[{}]", i);
      if (s[i].is_object() && s[i].contains("kind") && s[i]["kind"] != "stroke") {
        throw HttpError(400, path + ".kind", "only strokes are accepted");
      }
      try {
        r.strokes.items.push_back(side::annotation_from_json(s[i], path));
      } catch (const side::AnnotationError& e) {
        throw HttpError(400, e.path(), e.what());
      }
    }
    try {
      r.strokes.validate("strokes");
    } catch (const side::AnnotationError& e) {
      throw HttpError(400, e.path(), e.what());
    }
  }
  if (body.contains("side_fraction") && !body["side_fraction"].is_null()) {
    const auto& p = body["side_fraction"];
    if (!p.is_number() || !(p.get<double>() >= 0.0 && p.get<double>() <= 1.0)) {
      throw HttpError(400, "side_fraction", "expected a number in [0, 1]");
    }
    r.side_fraction = p.get<double>();
  }
  if (body.contains("return_confidence")) {
    if (!body["return_confidence"].is_boolean()) throw HttpError(400, "return_confidence", "expected a boolean");
    r.return_confidence = body["return_confidence"].get<bool>();
  }
  json canon = {{"scene_id", scene_id}, {"strokes", json::array()}, {"side_fraction", nullptr}};
  for (const auto& a : r.strokes.items) canon["strokes"].push_back(side::to_json(a));
  if (r.side_fraction) canon["side_fraction"] = *r.side_fraction;
  r.seed = ckpt::fnv1a(canon.dump());
  return r;
}

Service::Service(net::Model model, std::vector<SceneEntry> scenes, const pipeline::PipelineConfig& config)
    : model_(std::move(model)), scenes_(std::move(scenes)), config_(config) {
  for (const auto& s : scenes_) {
    if (s.num_classes != model_.config().num_classes) {
      throw ConfigError(fmt::format("scene '{}' has {} classes, model predicts {}", s.id, s.num_classes,
                                    model_.config().num_classes));
    }
  }
}

json Service::health() const { return {{"v", kWireVersion}, {"status", "ok"}}; }

json Service::list_scenes() const {
  json list = json::array();
  for (const auto& s : scenes_) {
    list.push_back({{"id", s.id},
                    {"width", s.image.w()},
                    {"height", s.image.h()},
                    {"classes", s.num_classes},
                    {"has_ground_truth", s.labels.has_value()}});
  }
  json legend = json::array();
  for (int c = 0; c < model_.config().num_classes; ++c) legend.push_back(io::hex_color(io::label_palette()[c]));
  return {{"v", kWireVersion}, {"scenes", list}, {"legend", legend}};
}

const SceneEntry& Service::scene(const std::string& id) const {
  for (const auto& s : scenes_)
    if (s.id == id) return s;
  throw HttpError(404, "", fmt::format("unknown scene '{}'", id));
}

json Service::segment(const std::string& id, const std::string& body) const {
  const auto t0 = std::chrono::steady_clock::now();
  const SceneEntry& s = scene(id);
  if (body.size() > config_.serve.max_body_bytes) {
    throw HttpError(413, "", fmt::format("request body of {} bytes exceeds {}", body.size(), config_.serve.max_body_bytes));
  }
  const json j = json::parse(body.empty() ? std::string("{}") : body, nullptr, false);
  if (j.is_discarded()) throw HttpError(400, "", "request body is not valid JSON");
  const SegmentRequest req = parse_segment_request(j, id, s.image.h(), s.image.w(), s.num_classes);
  side::AnnotationSet ann = req.strokes;
  if (req.side_fraction) ann = synth::kmeans_sample(ann, *req.side_fraction, req.seed);

  net::Model model = model_;
  const int patch = std::min({config_.eval.patch, s.image.h(), s.image.w()});
  const auto grid = eval::TileGrid::make(s.image.h(), s.image.w(), patch, config_.eval.stride);
  const auto result = eval::sliding_infer(s.image, ann, model, grid);

  json out = {{"v", kWireVersion},
              {"scene_id", id},
              {"width", s.image.w()},
              {"height", s.image.h()},
              {"labels", io::base64_encode(io::encode_label_raster(result.labels))},
              {"gate_rate", result.gate_rate},
              {"strokes_used", ann.size()}};
  if (req.side_fraction) out["side_fraction"] = *req.side_fraction;
  if (req.return_confidence) {
    const int c = result.mean_softmax.c();
    std::vector<double> mean(c, 0.0);
    double top = 0.0;
    const std::size_t pixels = static_cast<std::size_t>(s.image.h()) * s.image.w();
    for (std::size_t p = 0; p < pixels; ++p) {
      const float* v = result.mean_softmax.data() + p * c;
      for (int k = 0; k < c; ++k) mean[k] += v[k];
      top += *std::max_element(v, v + c);
    }
    for (double& m : mean) m /= static_cast<double>(pixels);
    out["confidence"] = {{"class_mean", mean}, {"mean_max", top / static_cast<double>(pixels)}};
  }
  if (s.labels) {
    out["metrics"] = eval::compute_metrics(result.labels, *s.labels, s.num_classes, nn::LabelMap::kIgnore,
                                           config_.eval.exclude)
                         .to_json();
    out["metrics"].erase("confusion");
  }
  out["latency_ms"] = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

namespace {

void send_json(httplib::Response& res, int status, const json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const HttpError& e) {
    send_json(res, e.status(), e.body());
  } catch (const std::exception& e) {
    spdlog::error("request failed: {}", e.what());
    send_json(res, 500, HttpError(500, "", e.what()).body());
  }
}

}  // namespace

void Service::attach(httplib::Server& server) const {
  server.set_payload_max_length(config_.serve.max_body_bytes);
  server.Get("/health", [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, health()); });
  server.Get("/scenes", [this](const httplib::Request&, httplib::Response& res) { send_json(res, 200, list_scenes()); });
  server.Get(R"(/scenes/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto& s = scene(req.matches[1]);
      res.status = 200;
      res.set_content(s.image_png, "image/png");
    });
  });
  server.Post(R"(/scenes/([^/]+)/segment)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json out = segment(req.matches[1], req.body);
      spdlog::info("segment {} strokes={} latency_ms={:.1f}", std::string(req.matches[1]), out["strokes_used"].get<std::size_t>(),
                   out["latency_ms"].get<double>());
      send_json(res, 200, out);
    });
  });
  server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const std::string what = res.status == 413 ? "request body too large"
                             : res.status == 404 ? "not found"
                                                 : fmt::format("HTTP {}", res.status);
    res.set_content(HttpError(res.status, "", what).body().dump(), "application/json");
  });
  if (!config_.serve.ui_dir.empty()) {
    if (!server.set_mount_point("/ui", config_.serve.ui_dir)) {
      throw ConfigError(fmt::format("serve.ui_dir: cannot mount {}", config_.serve.ui_dir));
    }
  }
}

std::pair<std::string, int> split_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos) throw ConfigError(fmt::format("bind address '{}' is not host:port", bind));
  const std::string host = bind.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(bind.substr(colon + 1));
  } catch (const std::exception&) {
    throw ConfigError(fmt::format("bind address '{}' has no numeric port", bind));
  }
  if (port < 0 || port > 65535) throw ConfigError(fmt::format("port {} out of range", port));
  return {host, port};
}

void Service::run(const std::string& bind, std::atomic<int>* bound) const {
  httplib::Server server;
  attach(server);
  const auto [host, port] = split_bind(bind);
  int actual = port;
  if (port == 0) {
    actual = server.bind_to_any_port(host);
    if (actual < 0) throw ConfigError(fmt::format("cannot bind {}", bind));
  } else if (!server.bind_to_port(host, port)) {
    throw ConfigError(fmt::format("cannot bind {}", bind));
  }
  spdlog::info("serving {} scenes on {}:{}", scenes_.size(), host, actual);
  if (bound) bound->store(actual);
  server.listen_after_bind();
}

}  // namespace sinet::service
