#pragma once

#include <random>
#include <vector>

#include "sinf/annotation.hpp"
#include "sinf/layers.hpp"
#include "sinf/tensor.hpp"

namespace sinet::side {

using nn::BasicParam;
using nn::BasicTensor;

/// Rasterizes annotations into an (h, w, raw_channels) map. Strokes stamp a
/// one-hot class vector on every pixel within width/2 of the polyline; points
/// stamp their feature vector. Pixels hit by several annotations hold the mean;
/// everything else is zero. Throws AnnotationError for out-of-bounds input.
nn::Tensor rasterize(const AnnotationSet& annotations);

/// Shared fully connected layer mapping raw side features to d channels.
template <typename T>
struct EmbeddingLayer {
  nn::AffineLayer<T> fc;

  EmbeddingLayer() = default;
  EmbeddingLayer(int raw_channels, int d);
  int raw_channels() const { return fc.in_features; }
  int d() const { return fc.out_features; }
};

template <typename T>
struct EmbedCache {
  BasicTensor<T> output;
  std::vector<double> norms;  // pre-normalization length per pixel, 0 if unannotated
};

/// Affine map then unit-length rescale at annotated (non-zero) pixels; zero
/// pixels stay exactly zero.
template <typename T>
BasicTensor<T> embed(const BasicTensor<T>& raw, const EmbeddingLayer<T>& layer, EmbedCache<T>* cache = nullptr);

template <typename T>
void embed_backward(const BasicTensor<T>& raw, const EmbedCache<T>& cache, EmbeddingLayer<T>& layer,
                    const BasicTensor<T>& grad_out);

enum class DiffusionInit { kOnes, kFirstOneRestZero };

/// n learnable scalars weighting successive passes of a fixed 3x3 ones
/// kernel (stride 1, zero padding 1).
template <typename T>
struct DiffusionOperator {
  std::vector<BasicParam<T>> weights;

  DiffusionOperator() = default;
  explicit DiffusionOperator(int passes, DiffusionInit init = DiffusionInit::kOnes);
  int passes() const { return static_cast<int>(weights.size()); }
  void reset(DiffusionInit init);
};

/// Number of diffusion passes whose support reaches each pixel.
struct CoverageMap {
  int h = 0;
  int w = 0;
  std::vector<int> counts;

  int at(int y, int x) const { return counts[static_cast<std::size_t>(y) * w + x]; }
};

template <typename T>
struct DiffusionResult {
  BasicTensor<T> output;
  CoverageMap coverage;
};

/// One pass of the 3x3 ones kernel with zero padding, accumulated in double.
nn::TensorD box_sum3(const nn::TensorD& x);

/// x_next = (sum_i w_i * f^i(x)) / max(coverage, 1), where f is box_sum3 and
/// coverage counts the passes whose dilated non-zero support reaches a pixel.
template <typename T>
DiffusionResult<T> diffuse(const BasicTensor<T>& x, const DiffusionOperator<T>& op);

template <typename T>
struct DiffusionGrads {
  std::vector<double> weights;
  BasicTensor<T> input;
};

/// Gradients of diffuse() with the coverage normalization held constant.
template <typename T>
DiffusionGrads<T> diffuse_backward(const BasicTensor<T>& upstream, const BasicTensor<T>& x,
                                   const DiffusionOperator<T>& op);

/// Pooling that brings the full-resolution side map onto the factor-4 grid.
inline constexpr int kFusePoolKernel = 6;
inline constexpr int kFusePoolStride = 4;
inline constexpr int kFusePoolPadding = 1;

struct FuseCache {
  nn::PoolIndex pool;
  int backbone_channels = 0;
};

/// Max-pools the side map to the backbone grid and appends it after the
/// backbone channels. Throws ConfigError when the grids disagree.
template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& side, const BasicTensor<T>& backbone, FuseCache* cache = nullptr);

/// Returns {grad_backbone, grad_side}.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> fuse_backward(const FuseCache& cache, const BasicTensor<T>& grad);

/// Nearest-neighbour downsampled copies of a unit-normalized side map. Sources
/// landing in the same target cell are averaged and re-normalized.
std::vector<nn::Tensor> multiscale_views(const nn::Tensor& x, const std::vector<double>& scales);

/// The side-information maps of one image.
struct SideInfoMap {
  nn::Tensor full_res;
  nn::Tensor fused_res;
  CoverageMap coverage;
};

}  // namespace sinet::side
