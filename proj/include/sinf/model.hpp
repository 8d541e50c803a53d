#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "sinf/layers.hpp"
#include "sinf/sideinfo.hpp"
#include "sinf/tensor.hpp"

namespace sinet::net {

using nn::BasicParam;
using nn::BasicTensor;

struct ModelConfig {
  int num_classes = 4;
  int raw_channels = 4;  // c_raw of the side information
  int d = 8;             // embedded side channels
  int n = 3;             // diffusion passes
  side::DiffusionInit diffusion_init = side::DiffusionInit::kFirstOneRestZero;
  int backbone_channels = 16;
  int num_gated_blocks = 6;
  std::vector<int> dilations{1, 1, 2, 2, 4, 4};
  bool gated = true;
  int gate_hidden = 16;
  double target_rate = 0.6;
  double gumbel_temperature = 1.0;
  double gate_bias_init = 0.0;
  bool per_gate_rate = false;
  std::uint64_t seed = 1;

  /// Throws ConfigError naming the offending field.
  void validate() const;
};

nlohmann::json to_json(const ModelConfig& c);
/// Unknown keys are rejected; missing keys keep their defaults.
ModelConfig model_config_from_json(const nlohmann::json& j);

const char* diffusion_init_name(side::DiffusionInit init);
side::DiffusionInit parse_diffusion_init(const std::string& s);

enum class Mode { kTrain, kEval };

/// Forces gates regardless of the MLP output. Forced gates draw no noise and
/// receive no gradient.
enum class GateOverride { kNone, kAllOn, kAllOff };

template <typename T>
struct GatedBlock {
  int dilation = 1;
  nn::ConvLayer<T> conv1;
  nn::BatchNormLayer<T> bn1;
  nn::ConvLayer<T> conv2;
  nn::BatchNormLayer<T> bn2;
  bool gated = true;
  nn::AffineLayer<T> gate_fc1;
  nn::AffineLayer<T> gate_fc2;
  double temperature = 1.0;

  GatedBlock() = default;
  GatedBlock(const std::string& name, int channels, int dilation, bool gated, int gate_hidden, double temperature);
};

template <typename T>
struct BodyCache {
  BasicTensor<T> h1;
  nn::BatchNormCache<T> bn1;
  BasicTensor<T> a1;
  BasicTensor<T> h2;
  nn::BatchNormCache<T> bn2;
};

/// Residual transform F: bn2(conv2(relu(bn1(conv1(x))))).
template <typename T>
BasicTensor<T> block_body(const BasicTensor<T>& x, GatedBlock<T>& block, bool training, BodyCache<T>* cache = nullptr);

/// Accumulates parameter gradients and returns dL/dx through F.
template <typename T>
BasicTensor<T> block_body_backward(const BasicTensor<T>& x, GatedBlock<T>& block, const BodyCache<T>& cache,
                                   const BasicTensor<T>& grad_out);

/// Per-channel spatial mean of the block input.
template <typename T>
BasicTensor<T> pooled_descriptor(const BasicTensor<T>& x);

struct GateDecision {
  bool z = true;
  double relevance = 1.0;  // eval: sigmoid(logit); train: relaxed sample
  double soft = 1.0;       // relaxed activation that feeds the rate loss
  double logit = 0.0;
  double noise = 0.0;
};

template <typename T>
struct GateCache {
  BasicTensor<T> descriptor;
  BasicTensor<T> hidden;
};

/// Train mode: soft = sigmoid((logit + g) / temperature) with logistic noise
/// g = log u - log(1 - u), z = soft > 0.5 (straight-through). Eval mode:
/// relevance = sigmoid(logit), z = relevance > 0.5.
template <typename T>
GateDecision gate_decision(const BasicTensor<T>& descriptor, const GatedBlock<T>& block, Mode mode,
                           std::mt19937_64* rng, GateCache<T>* cache = nullptr);

/// x + z * F(x). With z = 0 the input is returned untouched.
template <typename T>
BasicTensor<T> gated_block_forward(const BasicTensor<T>& x, GatedBlock<T>& block, bool z, bool training = false);

struct GateTrace {
  std::vector<std::uint8_t> decisions;
  std::vector<double> relevance;
  std::vector<double> soft;
  double executed_fraction = 0.0;
};

/// (mean over batch and blocks of soft activations - t)^2. With `per_gate`
/// each block's batch mean is penalized separately and the squares averaged.
double target_rate_loss(const std::vector<GateTrace>& batch, double t, bool per_gate = false);

/// d loss / d soft for every (sample, block).
std::vector<std::vector<double>> target_rate_loss_grad(const std::vector<GateTrace>& batch, double t,
                                                       bool per_gate = false);

template <typename T>
struct BlockCache {
  BasicTensor<T> input;
  BasicTensor<T> body;
  BodyCache<T> body_cache;
  GateCache<T> gate_cache;
  GateDecision gate;
  bool has_body = false;
  bool gate_trainable = false;
};

template <typename T>
struct ForwardCache {
  int pad_h = 0;
  int pad_w = 0;
  BasicTensor<T> image;  // mean-subtracted, padded
  BasicTensor<T> s1;
  nn::BatchNormCache<T> sbn1;
  BasicTensor<T> a1;
  nn::PoolIndex pool;
  BasicTensor<T> p1;
  BasicTensor<T> s2;
  nn::BatchNormCache<T> sbn2;
  BasicTensor<T> backbone;
  bool has_side = false;
  BasicTensor<T> raw_side;
  side::EmbedCache<T> embed;
  BasicTensor<T> side_embedded;
  side::FuseCache fuse;
  BasicTensor<T> fused;
  BasicTensor<T> f1;
  nn::BatchNormCache<T> fbn;
  BasicTensor<T> trunk;
  std::vector<BlockCache<T>> blocks;
  BasicTensor<T> head_in;
  BasicTensor<T> head_out;
};

template <typename T>
struct ForwardResult {
  BasicTensor<T> logits;
  GateTrace trace;
};

template <typename T>
class SegModel {
 public:
  SegModel() = default;
  explicit SegModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  /// image is (h, w, 3); raw_side is (h, w, raw_channels) or empty for no
  /// side information. Sides not divisible by 4 are reflect-padded and the
  /// logits cropped back. Train mode needs `rng` unless gates are forced.
  ForwardResult<T> forward(const BasicTensor<T>& image, const BasicTensor<T>& raw_side, Mode mode,
                           std::mt19937_64* rng = nullptr, ForwardCache<T>* cache = nullptr);

  /// Accumulates gradients for one forward. `soft_grad` carries the rate-loss
  /// gradient per block (may be empty).
  void backward(const ForwardCache<T>& cache, const BasicTensor<T>& grad_logits,
                const std::vector<double>& soft_grad = {});

  void set_gate_override(GateOverride o) { override_ = o; }
  GateOverride gate_override() const { return override_; }

  std::vector<BasicParam<T>*> params();
  std::vector<std::pair<std::string, BasicTensor<T>*>> buffers();
  void zero_grad();

  // Layers are public so tests and tools can inspect and poke them.
  nn::ConvLayer<T> stem1;
  nn::BatchNormLayer<T> stem_bn1;
  nn::ConvLayer<T> stem2;
  nn::BatchNormLayer<T> stem_bn2;
  side::EmbeddingLayer<T> embedding;
  side::DiffusionOperator<T> diffusion;
  nn::ConvLayer<T> fusion;
  nn::BatchNormLayer<T> fusion_bn;
  std::vector<GatedBlock<T>> blocks;
  nn::ConvLayer<T> head;
  BasicTensor<T> input_mean;  // (1, 1, 3) buffer subtracted from images

 private:
  ModelConfig config_;
  GateOverride override_ = GateOverride::kNone;
};

using Model = SegModel<float>;

/// Reflect padding on the bottom and right edges.
template <typename T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& x, int pad_h, int pad_w);

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& x, int h, int w);

/// Copies every parameter value and buffer from `src` into `dst`.
template <typename T, typename U>
void copy_weights(SegModel<T>& dst, SegModel<U>& src) {
  auto dp = dst.params();
  auto sp = src.params();
  for (std::size_t i = 0; i < dp.size(); ++i) dp[i]->value = sp[i]->value.template cast<T>();
  auto db = dst.buffers();
  auto sb = src.buffers();
  for (std::size_t i = 0; i < db.size(); ++i) *db[i].second = sb[i].second->template cast<T>();
}

}  // namespace sinet::net
