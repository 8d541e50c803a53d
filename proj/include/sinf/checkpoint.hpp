#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/model.hpp"

namespace sinet::ckpt {

enum class Errc {
  kNotFound,
  kBadMagic,
  kVersionMismatch,
  kTruncated,
  kChecksumMismatch,
  kConfigHashMismatch,
  kShapeMismatch,
  kKindMismatch,
};

const char* errc_name(Errc e);

class CheckpointError : public std::runtime_error {
 public:
  CheckpointError(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

inline constexpr std::uint32_t kFormatVersion = 1;

enum class Kind : std::uint32_t { kModel = 0, kTraining = 1 };
enum class Role : std::uint8_t { kParam = 0, kBuffer = 1, kMomentum = 2 };

struct Record {
  std::string name;
  Role role = Role::kParam;
  nn::Tensor value;
};

/// Layout: "SINF", u32 version, u32 kind, u32 length + config JSON, u64 FNV-1a
/// hash of that JSON, u32 record count, records (u32 name length, name, u8
/// role, i32 h, i32 w, i32 c, float32 data), u32 length + state JSON, u32
/// CRC-32 of everything before it. All integers and floats little-endian.
struct Checkpoint {
  Kind kind = Kind::kModel;
  nlohmann::json config;
  std::vector<Record> records;
  nlohmann::json state = nlohmann::json::object();
};

std::uint64_t fnv1a(const std::string& bytes);
std::string canonical(const nlohmann::json& j);

std::string encode(const Checkpoint& c);
Checkpoint decode(const std::string& bytes);

/// Writes through a temporary file and renames it into place.
void write(const std::filesystem::path& path, const Checkpoint& c);
Checkpoint read(const std::filesystem::path& path);

/// Parameters and buffers, plus momentum buffers when asked.
Checkpoint snapshot(net::Model& model, bool with_momentum);
/// Copies tensors back into `model`. Throws ConfigHashMismatch when the stored
/// model config differs from the model's own, ShapeMismatch on any record.
void restore(net::Model& model, const Checkpoint& c, bool with_momentum);

void save_model(net::Model& model, const std::filesystem::path& path);
net::Model load_model(const std::filesystem::path& path);

}  // namespace sinet::ckpt
