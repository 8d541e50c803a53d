#include "sinf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include <fmt/format.h>

namespace sinet::nn {

std::string Shape::str() const { return fmt::format("{}x{}x{}", h, w, c); }

template <typename T>
BasicTensor<T>::BasicTensor(int h, int w, int c, T fill) : shape_{h, w, c} {
  if (h < 0 || w < 0 || c < 0) {
    throw ConfigError(fmt::format("negative tensor shape {}", shape_.str()));
  }
  data_.assign(shape_.size(), fill);
}

template <typename T>
void BasicTensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool BasicTensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
bool BasicTensor<T>::bitwise_equal(const BasicTensor& other) const {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(T)) == 0);
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::operator+=(const BasicTensor& other) {
  if (!(shape_ == other.shape_)) {
    throw ConfigError(fmt::format("tensor add: shape {} vs {}", shape_.str(), other.shape_.str()));
  }
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

template <typename T>
BasicTensor<T>& BasicTensor<T>::operator*=(T s) {
  for (auto& v : data_) v *= s;
  return *this;
}

template class BasicTensor<float>;
template class BasicTensor<double>;

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::kBase:
      return "base";
    case ParamGroup::kEmbedding:
      return "embedding";
    case ParamGroup::kFusion:
      return "fusion";
  }
  return "unknown";
}

LayerSpec LayerSpec::conv(int kernel, int in, int out, int stride, int padding, int dilation) {
  LayerSpec s;
  s.kind = dilation > 1 ? LayerKind::kDilatedConv2d : LayerKind::kConv2d;
  s.kernel = kernel;
  s.in_channels = in;
  s.out_channels = out;
  s.stride = stride;
  s.padding = padding;
  s.dilation = dilation;
  return s;
}

int LayerSpec::out_extent(int in) const {
  const int span = in + 2 * padding - dilation * (kernel - 1) - 1;
  if (span < 0) return 0;
  return span / stride + 1;
}

Shape LayerSpec::output_shape(const Shape& in) const {
  switch (kind) {
    case LayerKind::kConv2d:
    case LayerKind::kDilatedConv2d:
      return {out_extent(in.h), out_extent(in.w), out_channels};
    case LayerKind::kMaxPool:
      return {out_extent(in.h), out_extent(in.w), in.c};
    case LayerKind::kAffine:
      return {in.h, in.w, out_channels};
    case LayerKind::kRelu:
    case LayerKind::kBatchNorm:
    case LayerKind::kSoftmax:
      return in;
  }
  return in;
}

void LayerSpec::validate(const Shape& in) const {
  if (kernel < 1 || stride < 1 || padding < 0 || dilation < 1) {
    throw ConfigError(fmt::format("invalid layer geometry kernel={} stride={} padding={} dilation={}",
                                  kernel, stride, padding, dilation));
  }
  const bool has_channels = kind == LayerKind::kConv2d || kind == LayerKind::kDilatedConv2d ||
                            kind == LayerKind::kAffine;
  if (has_channels && in.c != in_channels) {
    throw ConfigError(
        fmt::format("channel mismatch: input has {} channels, layer expects in_channels={}", in.c,
                    in_channels));
  }
  if (kind == LayerKind::kConv2d || kind == LayerKind::kDilatedConv2d || kind == LayerKind::kMaxPool) {
    if (out_extent(in.h) < 1) {
      throw ConfigError(fmt::format("height {} too small for kernel {} (dilation {}, padding {})",
                                    in.h, kernel, dilation, padding));
    }
    if (out_extent(in.w) < 1) {
      throw ConfigError(fmt::format("width {} too small for kernel {} (dilation {}, padding {})",
                                    in.w, kernel, dilation, padding));
    }
  }
}

}  // namespace sinet::nn
