#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sinet {

/// Raised when shapes, layer parameters or file contents do not fit together.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when a NaN or Inf shows up where finite values are required.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace nn {

struct Shape {
  int h = 0;
  int w = 0;
  int c = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(h) * static_cast<std::size_t>(w) *
           static_cast<std::size_t>(c);
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// Dense rank-3 array in (h, w, c) row-major order. Matrices are stored as
/// (rows, cols, 1).
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  BasicTensor(int h, int w, int c, T fill = T(0));
  explicit BasicTensor(Shape shape, T fill = T(0)) : BasicTensor(shape.h, shape.w, shape.c, fill) {}

  static BasicTensor matrix(int rows, int cols, T fill = T(0)) {
    return BasicTensor(rows, cols, 1, fill);
  }

  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int c() const { return shape_.c; }
  int rows() const { return shape_.h; }
  int cols() const { return shape_.w; }
  const Shape& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::size_t index(int y, int x, int ch) const {
    return (static_cast<std::size_t>(y) * shape_.w + x) * shape_.c + ch;
  }
  T& at(int y, int x, int ch = 0) { return data_[index(y, x, ch)]; }
  T at(int y, int x, int ch = 0) const { return data_[index(y, x, ch)]; }
  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T* pixel(int y, int x) { return data_.data() + index(y, x, 0); }
  const T* pixel(int y, int x) const { return data_.data() + index(y, x, 0); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  void fill(T v);
  void zero() { fill(T(0)); }
  bool all_finite() const;
  bool bitwise_equal(const BasicTensor& other) const;

  /// Adds `other` elementwise; shapes must match.
  BasicTensor& operator+=(const BasicTensor& other);
  BasicTensor& operator*=(T s);

  template <typename U>
  BasicTensor<U> cast() const {
    BasicTensor<U> out(shape_.h, shape_.w, shape_.c);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
    return out;
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

/// Optimizer groups with separate learning-rate multipliers.
enum class ParamGroup : std::uint8_t { kBase = 0, kEmbedding = 1, kFusion = 2 };

const char* group_name(ParamGroup g);

/// A learnable tensor with its gradient and momentum buffer.
template <typename T>
struct BasicParam {
  std::string name;
  ParamGroup group = ParamGroup::kBase;
  BasicTensor<T> value;
  BasicTensor<T> grad;
  BasicTensor<T> momentum;

  BasicParam() = default;
  BasicParam(std::string param_name, Shape shape, ParamGroup param_group = ParamGroup::kBase)
      : name(std::move(param_name)),
        group(param_group),
        value(shape),
        grad(shape),
        momentum(shape) {}

  void zero_grad() { grad.zero(); }
};

using Param = BasicParam<float>;

/// Per-pixel class indices; 255 marks pixels excluded from loss and metrics.
struct LabelMap {
  static constexpr std::uint8_t kIgnore = 255;

  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> data;

  LabelMap() = default;
  LabelMap(int height, int width, std::uint8_t fill = 0)
      : h(height), w(width), data(static_cast<std::size_t>(height) * width, fill) {}

  std::uint8_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * w + x]; }
  std::uint8_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * w + x]; }
  bool operator==(const LabelMap&) const = default;
};

enum class LayerKind { kConv2d, kDilatedConv2d, kMaxPool, kAffine, kRelu, kBatchNorm, kSoftmax };

/// Geometry of one layer. Spatial output extent is
/// (in + 2*padding - dilation*(kernel-1) - 1) / stride + 1.
struct LayerSpec {
  LayerKind kind = LayerKind::kConv2d;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  int in_channels = 0;
  int out_channels = 0;

  static LayerSpec conv(int kernel, int in, int out, int stride = 1, int padding = 0, int dilation = 1);

  int out_extent(int in) const;
  Shape output_shape(const Shape& in) const;
  /// Throws ConfigError if the spec cannot produce a positive output for `in`.
  void validate(const Shape& in) const;
};

}  // namespace nn
}  // namespace sinet
