#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "sinf/tensor.hpp"

namespace sinet::nn {

// Convolution weights are a (kernel*kernel*in_channels, out_channels) matrix
// whose rows follow (ky, kx, cin) order; bias is (1, out_channels, 1).
template <typename T>
struct ConvLayer {
  LayerSpec spec;
  BasicParam<T> weight;
  BasicParam<T> bias;

  ConvLayer() = default;
  ConvLayer(const std::string& name, const LayerSpec& spec, ParamGroup group = ParamGroup::kBase);
};

/// Per-pixel affine map over channels: out[c'] = sum_c in[c] * W[c, c'] + b[c'].
template <typename T>
struct AffineLayer {
  int in_features = 0;
  int out_features = 0;
  BasicParam<T> weight;
  BasicParam<T> bias;

  AffineLayer() = default;
  AffineLayer(const std::string& name, int in, int out, ParamGroup group = ParamGroup::kBase);
};

template <typename T>
struct BatchNormLayer {
  int channels = 0;
  double momentum = 0.1;
  double eps = 1e-5;
  BasicParam<T> gamma;
  BasicParam<T> beta;
  BasicTensor<T> running_mean;
  BasicTensor<T> running_var;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name, int channels, ParamGroup group = ParamGroup::kBase);
};

template <typename T>
struct BatchNormCache {
  bool training = true;
  std::vector<double> mean;
  std::vector<double> inv_std;
  BasicTensor<T> normalized;
};

/// Fan-in scaled uniform init (bound sqrt(6 / fan_in)), zero bias.
template <typename T>
void init_uniform_fan_in(BasicParam<T>& weight, int fan_in, std::mt19937_64& rng);

// ---- convolution ----------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvLayer<T>& layer);

/// Accumulates weight/bias gradients into `layer` and returns the input
/// gradient (empty tensor when `want_input_grad` is false).
template <typename T>
BasicTensor<T> conv2d_backward(const BasicTensor<T>& input, ConvLayer<T>& layer,
                               const BasicTensor<T>& grad_out, bool want_input_grad = true);

// ---- pooling --------------------------------------------------------------

struct PoolIndex {
  Shape input_shape;
  std::vector<std::int32_t> argmax;  // flat input index per output element
};

/// Max pooling with -inf padding. Ties resolve to the first maximum in
/// row-major window order.
template <typename T>
BasicTensor<T> maxpool(const BasicTensor<T>& input, int kernel, int stride, int padding = 0,
                       PoolIndex* index = nullptr);

template <typename T>
BasicTensor<T> maxpool_backward(const PoolIndex& index, const BasicTensor<T>& grad_out);

// ---- affine / activations ---------------------------------------------------

template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& input, const AffineLayer<T>& layer);

template <typename T>
BasicTensor<T> affine_backward(const BasicTensor<T>& input, AffineLayer<T>& layer,
                               const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out);

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input);

// ---- normalization -----------------------------------------------------------

/// Training mode normalizes with the statistics of this input's spatial
/// extent and updates the running averages; eval mode uses the running ones.
template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, BatchNormLayer<T>& layer, bool training,
                         BatchNormCache<T>* cache = nullptr);

template <typename T>
BasicTensor<T> batchnorm_backward(const BatchNormCache<T>& cache, BatchNormLayer<T>& layer,
                                  const BasicTensor<T>& grad_out);

// ---- softmax / loss -----------------------------------------------------------

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

template <typename T>
struct CrossEntropyResult {
  double loss = 0.0;
  BasicTensor<T> grad;
  std::size_t counted = 0;
  bool all_ignored = false;
};

/// Mean negative log-likelihood over non-ignored pixels; grad is
/// (softmax - onehot) / counted.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, const LabelMap& labels,
                                            std::uint8_t ignore_index = LabelMap::kIgnore);

// ---- resampling / plumbing ----------------------------------------------------

/// Bilinear resize with half-pixel centers (align_corners = false).
template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int factor);

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& grad_out, const Shape& input_shape,
                                          int factor);

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b);

/// Splits a gradient over [a | b] channels; returns the pair.
template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad, int a_channels);

/// Per-channel spatial mean, shaped (1, 1, c).
template <typename T>
BasicTensor<T> global_mean_pool(const BasicTensor<T>& input);

template <typename T>
BasicTensor<T> global_mean_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape);

// ---- optimizer ---------------------------------------------------------------

/// Learning rate per parameter group, indexed by ParamGroup.
struct GroupRates {
  double base = 0.0;
  double embedding = 0.0;
  double fusion = 0.0;

  double for_group(ParamGroup g) const;
};

/// Momentum SGD: buf <- momentum*buf + grad; value <- value - lr*buf.
/// Checks every gradient first; a non-finite one aborts the whole step with
/// a NumericError naming the parameter.
template <typename T>
void sgd_step(std::span<BasicParam<T>* const> params, const GroupRates& rates, double momentum);

template <typename T>
void sgd_step(std::span<BasicParam<T>* const> params, double lr, double momentum);

}  // namespace sinet::nn
