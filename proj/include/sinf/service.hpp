#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/annotation.hpp"
#include "sinf/model.hpp"
#include "sinf/pipeline.hpp"
#include "sinf/tensor.hpp"

namespace httplib {
class Server;
}

namespace sinet::service {

inline constexpr int kWireVersion = 1;

/// A request failure with its HTTP status; `path` names the offending field.
class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string path, const std::string& what)
      : std::runtime_error(what), status_(status), path_(std::move(path)) {}
  int status() const { return status_; }
  const std::string& path() const { return path_; }
  nlohmann::json body() const;

 private:
  int status_;
  std::string path_;
};

struct SceneEntry {
  std::string id;
  nn::Tensor image;
  std::optional<nn::LabelMap> labels;
  int num_classes = 0;
  std::string image_png;
};

/// Every directory under `root` (up to two levels deep) holding a scene
/// bundle, keyed by its directory name and sorted.
std::vector<SceneEntry> load_scenes(const std::filesystem::path& root);

struct SegmentRequest {
  std::string scene_id;
  side::AnnotationSet strokes;
  std::optional<double> side_fraction;
  bool return_confidence = false;
  std::uint64_t seed = 0;  // derived from the canonical request body
};

/// Validates a segment request body against the scene geometry. Throws
/// HttpError(400) naming the field, e.g. "strokes[2].class_id".
SegmentRequest parse_segment_request(const nlohmann::json& body, const std::string& scene_id, int height, int width,
                                     int num_classes);

class Service {
 public:
  Service(net::Model model, std::vector<SceneEntry> scenes, const pipeline::PipelineConfig& config);

  nlohmann::json health() const;
  nlohmann::json list_scenes() const;
  const SceneEntry& scene(const std::string& id) const;  // HttpError(404)
  /// Runs a segment request body; throws HttpError on bad input.
  nlohmann::json segment(const std::string& id, const std::string& body) const;

  /// Installs routes and limits on `server`.
  void attach(httplib::Server& server) const;
  /// Blocks serving on host:port; `port` 0 picks a free port, reported via `bound`.
  void run(const std::string& bind, std::atomic<int>* bound = nullptr) const;

 private:
  net::Model model_;
  std::vector<SceneEntry> scenes_;
  pipeline::PipelineConfig config_;
};

std::pair<std::string, int> split_bind(const std::string& bind);

}  // namespace sinet::service
