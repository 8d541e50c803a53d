#include "sinf/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <zlib.h>

namespace sinet::ckpt {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

const char* errc_name(Errc e) {
  switch (e) {
    case Errc::kNotFound: return "not_found";
    case Errc::kBadMagic: return "bad_magic";
    case Errc::kVersionMismatch: return "version_mismatch";
    case Errc::kTruncated: return "truncated";
    case Errc::kChecksumMismatch: return "checksum_mismatch";
    case Errc::kConfigHashMismatch: return "config_hash_mismatch";
    case Errc::kShapeMismatch: return "shape_mismatch";
    case Errc::kKindMismatch: return "kind_mismatch";
  }
  return "unknown";
}

std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string canonical(const nlohmann::json& j) { return j.dump(); }

namespace {

constexpr char kMagic[4] = {'S', 'I', 'N', 'F'};

class Writer {
 public:
  template <typename I>
  void put(I v) {
    char buf[sizeof(I)];
    std::memcpy(buf, &v, sizeof(I));
    out_.append(buf, sizeof(I));
  }
  void bytes(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  void raw(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  std::string& str() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& in, std::size_t end) : in_(in), end_(end) {}
  template <typename I>
  I get() {
    need(sizeof(I));
    I v;
    std::memcpy(&v, in_.data() + pos_, sizeof(I));
    pos_ += sizeof(I);
    return v;
  }
  std::string bytes() {
    const auto n = get<std::uint32_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  void raw(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw CheckpointError(Errc::kTruncated, "checkpoint is truncated");
  }
  const std::string& in_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  return static_cast<std::uint32_t>(
      crc32(0L, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(n)));
}

}  // namespace

std::string encode(const Checkpoint& c) {
  Writer w;
  w.raw(kMagic, 4);
  w.put<std::uint32_t>(kFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.kind));
  const std::string config = canonical(c.config);
  w.bytes(config);
  w.put<std::uint64_t>(fnv1a(config));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.records.size()));
  for (const auto& r : c.records) {
    w.bytes(r.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(r.role));
    w.put<std::int32_t>(r.value.h());
    w.put<std::int32_t>(r.value.w());
    w.put<std::int32_t>(r.value.c());
    w.raw(r.value.data(), r.value.size() * sizeof(float));
  }
  w.bytes(canonical(c.state));
  w.put<std::uint32_t>(crc_of(w.str(), w.str().size()));
  return std::move(w.str());
}

Checkpoint decode(const std::string& bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw CheckpointError(Errc::kBadMagic, "not a checkpoint (bad magic)");
  }
  if (bytes.size() < 12) throw CheckpointError(Errc::kTruncated, "checkpoint is truncated");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  if (version != kFormatVersion) {
    throw CheckpointError(Errc::kVersionMismatch,
                          fmt::format("checkpoint format version {} (expected {})", version, kFormatVersion));
  }
  if (bytes.size() < 16) throw CheckpointError(Errc::kTruncated, "checkpoint is truncated");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + body, 4);

  // Structural parse first so a cut-off file reports truncation, not a
  // checksum failure.
  Reader r(bytes, body);
  r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  Checkpoint c;
  const auto kind = r.get<std::uint32_t>();
  if (kind > 1) throw CheckpointError(Errc::kKindMismatch, fmt::format("unknown checkpoint kind {}", kind));
  c.kind = static_cast<Kind>(kind);
  const std::string config = r.bytes();
  const auto config_hash = r.get<std::uint64_t>();
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    Record rec;
    rec.name = r.bytes();
    rec.role = static_cast<Role>(r.get<std::uint8_t>());
    const auto h = r.get<std::int32_t>();
    const auto w = r.get<std::int32_t>();
    const auto ch = r.get<std::int32_t>();
    if (h < 0 || w < 0 || ch < 0 || static_cast<std::uint64_t>(h) * w * ch > body) {
      throw CheckpointError(Errc::kTruncated, fmt::format("record '{}' has an impossible shape", rec.name));
    }
    rec.value = nn::Tensor(h, w, ch);
    r.raw(rec.value.data(), rec.value.size() * sizeof(float));
    c.records.push_back(std::move(rec));
  }
  const std::string state = r.bytes();
  if (r.pos() != body) throw CheckpointError(Errc::kTruncated, "checkpoint has trailing bytes before checksum");
  if (crc_of(bytes, body) != stored_crc) throw CheckpointError(Errc::kChecksumMismatch, "checkpoint checksum mismatch");
  if (fnv1a(config) != config_hash) throw CheckpointError(Errc::kConfigHashMismatch, "checkpoint config hash mismatch");
  try {
    c.config = nlohmann::json::parse(config);
    c.state = nlohmann::json::parse(state);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(Errc::kChecksumMismatch, fmt::format("checkpoint metadata unreadable: {}", e.what()));
  }
  return c;
}

void write(const std::filesystem::path& path, const Checkpoint& c) {
  const std::string bytes = encode(c);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("cannot write {}", tmp.string()));
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error(fmt::format("short write to {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(Errc::kNotFound, fmt::format("checkpoint not found: {}", path.string()));
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str());
}

namespace {

nlohmann::json model_config_of(const Checkpoint& c) {
  return c.kind == Kind::kTraining ? c.config.at("model") : c.config;
}

}  // namespace

Checkpoint snapshot(net::Model& model, bool with_momentum) {
  Checkpoint c;
  c.kind = Kind::kModel;
  c.config = net::to_json(model.config());
  for (auto* p : model.params()) c.records.push_back({p->name, Role::kParam, p->value});
  for (auto& [name, t] : model.buffers()) c.records.push_back({name, Role::kBuffer, *t});
  if (with_momentum) {
    for (auto* p : model.params()) c.records.push_back({p->name, Role::kMomentum, p->momentum});
  }
  return c;
}

void restore(net::Model& model, const Checkpoint& c, bool with_momentum) {
  const nlohmann::json stored = model_config_of(c);
  if (canonical(stored) != canonical(net::to_json(model.config()))) {
    throw CheckpointError(Errc::kConfigHashMismatch, "checkpoint was written for a different model config");
  }
  auto find = [&](const std::string& name, Role role) -> const Record& {
    for (const auto& r : c.records) {
      if (r.name == name && r.role == role) return r;
    }
    throw CheckpointError(Errc::kShapeMismatch, fmt::format("checkpoint lacks record '{}'", name));
  };
  auto assign = [](nn::Tensor& dst, const Record& r) {
    if (!(dst.shape() == r.value.shape())) {
      throw CheckpointError(Errc::kShapeMismatch, fmt::format("record '{}' has shape {}, model expects {}", r.name,
                                                              r.value.shape().str(), dst.shape().str()));
    }
    dst = r.value;
  };
  for (auto* p : model.params()) {
    assign(p->value, find(p->name, Role::kParam));
    if (with_momentum) assign(p->momentum, find(p->name, Role::kMomentum));
  }
  for (auto& [name, t] : model.buffers()) assign(*t, find(name, Role::kBuffer));
}

void save_model(net::Model& model, const std::filesystem::path& path) { write(path, snapshot(model, false)); }

net::Model load_model(const std::filesystem::path& path) {
  const Checkpoint c = read(path);
  net::Model model(net::model_config_from_json(model_config_of(c)));
  restore(model, c, false);
  return model;
}

}  // namespace sinet::ckpt
