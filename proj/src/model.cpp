#include "sinf/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

namespace sinet::net {

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw ConfigError(fmt::format("model.{}: {}", field, why));
  };
  if (num_classes < 2 || num_classes > 254) fail("num_classes", "must be in [2, 254]");
  if (raw_channels < 1) fail("raw_channels", "must be >= 1");
  if (d < 1) fail("d", "must be >= 1");
  if (n < 1) fail("n", "must be >= 1");
  if (backbone_channels < 1) fail("backbone_channels", "must be >= 1");
  if (num_gated_blocks < 1) fail("num_gated_blocks", "must be >= 1");
  if (static_cast<int>(dilations.size()) != num_gated_blocks) {
    fail("dilations", fmt::format("has {} entries for {} blocks", dilations.size(), num_gated_blocks));
  }
  for (int r : dilations) {
    if (r < 1) fail("dilations", "every rate must be >= 1");
  }
  if (gate_hidden < 1) fail("gate_hidden", "must be >= 1");
  if (!(target_rate > 0.0 && target_rate <= 1.0)) fail("target_rate", "must be in (0, 1]");
  if (!(gumbel_temperature > 0.0)) fail("gumbel_temperature", "must be > 0");
}

const char* diffusion_init_name(side::DiffusionInit init) {
  return init == side::DiffusionInit::kOnes ? "ones" : "first_one_rest_zero";
}

side::DiffusionInit parse_diffusion_init(const std::string& s) {
  if (s == "ones") return side::DiffusionInit::kOnes;
  if (s == "first_one_rest_zero") return side::DiffusionInit::kFirstOneRestZero;
  throw ConfigError(fmt::format("unknown diffusion init '{}' (expected ones or first_one_rest_zero)", s));
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"num_classes", c.num_classes},
          {"raw_channels", c.raw_channels},
          {"d", c.d},
          {"n", c.n},
          {"diffusion_init", diffusion_init_name(c.diffusion_init)},
          {"backbone_channels", c.backbone_channels},
          {"num_gated_blocks", c.num_gated_blocks},
          {"dilations", c.dilations},
          {"gated", c.gated},
          {"gate_hidden", c.gate_hidden},
          {"target_rate", c.target_rate},
          {"gumbel_temperature", c.gumbel_temperature},
          {"gate_bias_init", c.gate_bias_init},
          {"per_gate_rate", c.per_gate_rate},
          {"seed", c.seed}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("model config must be an object");
  ModelConfig c;
  const nlohmann::json defaults = to_json(c);
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key)) throw ConfigError(fmt::format("unknown key 'model.{}'", key));
    try {
      if (key == "num_classes") c.num_classes = value.get<int>();
      else if (key == "raw_channels") c.raw_channels = value.get<int>();
      else if (key == "d") c.d = value.get<int>();
      else if (key == "n") c.n = value.get<int>();
      else if (key == "diffusion_init") c.diffusion_init = parse_diffusion_init(value.get<std::string>());
      else if (key == "backbone_channels") c.backbone_channels = value.get<int>();
      else if (key == "num_gated_blocks") c.num_gated_blocks = value.get<int>();
      else if (key == "dilations") c.dilations = value.get<std::vector<int>>();
      else if (key == "gated") c.gated = value.get<bool>();
      else if (key == "gate_hidden") c.gate_hidden = value.get<int>();
      else if (key == "target_rate") c.target_rate = value.get<double>();
      else if (key == "gumbel_temperature") c.gumbel_temperature = value.get<double>();
      else if (key == "gate_bias_init") c.gate_bias_init = value.get<double>();
      else if (key == "per_gate_rate") c.per_gate_rate = value.get<bool>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(fmt::format("model.{}: {}", key, e.what()));
    }
  }
  c.validate();
  return c;
}

template <typename T>
GatedBlock<T>::GatedBlock(const std::string& name, int channels, int rate, bool is_gated, int gate_hidden,
                          double temp)
    : dilation(rate),
      conv1(name + ".conv1", nn::LayerSpec::conv(3, channels, channels, 1, rate, rate)),
      bn1(name + ".bn1", channels),
      conv2(name + ".conv2", nn::LayerSpec::conv(3, channels, channels, 1, rate, rate)),
      bn2(name + ".bn2", channels),
      gated(is_gated),
      temperature(temp) {
  if (gated) {
    gate_fc1 = nn::AffineLayer<T>(name + ".gate.fc1", channels, gate_hidden);
    gate_fc2 = nn::AffineLayer<T>(name + ".gate.fc2", gate_hidden, 1);
  }
}

template <typename T>
BasicTensor<T> block_body(const BasicTensor<T>& x, GatedBlock<T>& block, bool training, BodyCache<T>* cache) {
  BodyCache<T> local;
  BodyCache<T>& c = cache ? *cache : local;
  c.h1 = nn::conv2d(x, block.conv1);
  c.a1 = nn::relu(nn::batchnorm(c.h1, block.bn1, training, &c.bn1));
  c.h2 = nn::conv2d(c.a1, block.conv2);
  return nn::batchnorm(c.h2, block.bn2, training, &c.bn2);
}

template <typename T>
BasicTensor<T> block_body_backward(const BasicTensor<T>& x, GatedBlock<T>& block, const BodyCache<T>& cache,
                                   const BasicTensor<T>& grad_out) {
  BasicTensor<T> g = nn::batchnorm_backward(cache.bn2, block.bn2, grad_out);
  g = nn::conv2d_backward(cache.a1, block.conv2, g);
  g = nn::relu_backward(cache.a1, g);
  g = nn::batchnorm_backward(cache.bn1, block.bn1, g);
  return nn::conv2d_backward(x, block.conv1, g);
}

template <typename T>
BasicTensor<T> pooled_descriptor(const BasicTensor<T>& x) {
  if (x.h() == 0 || x.w() == 0) throw ConfigError("pooled_descriptor: empty spatial extent");
  return nn::global_mean_pool(x);
}

namespace {

double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

}  // namespace

template <typename T>
GateDecision gate_decision(const BasicTensor<T>& descriptor, const GatedBlock<T>& block, Mode mode,
                           std::mt19937_64* rng, GateCache<T>* cache) {
  if (!block.gated) return {};
  if (descriptor.c() != block.gate_fc1.in_features) {
    throw ConfigError(fmt::format("gate: descriptor has {} channels, gate expects {}", descriptor.c(),
                                  block.gate_fc1.in_features));
  }
  BasicTensor<T> hidden = nn::relu(nn::affine(descriptor, block.gate_fc1));
  const double logit = nn::affine(hidden, block.gate_fc2)[0];
  GateDecision d;
  d.logit = logit;
  if (mode == Mode::kEval) {
    d.relevance = sigmoid(logit);
    d.soft = d.relevance;
    d.z = d.relevance > 0.5;
  } else {
    if (!rng) throw ConfigError("gate: train mode needs a random generator");
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    const double u = std::clamp(unif(*rng), 1e-12, 1.0 - 1e-12);
    d.noise = std::log(u) - std::log1p(-u);
    d.soft = sigmoid((logit + d.noise) / block.temperature);
    d.relevance = d.soft;
    d.z = d.soft > 0.5;
  }
  if (cache) {
    cache->descriptor = descriptor;
    cache->hidden = std::move(hidden);
  }
  return d;
}

template <typename T>
BasicTensor<T> gated_block_forward(const BasicTensor<T>& x, GatedBlock<T>& block, bool z, bool training) {
  if (!z) return x;
  BasicTensor<T> y = x;
  y += block_body(x, block, training);
  return y;
}

double target_rate_loss(const std::vector<GateTrace>& batch, double t, bool per_gate) {
  if (batch.empty() || batch.front().soft.empty()) return 0.0;
  const std::size_t blocks = batch.front().soft.size();
  if (per_gate) {
    double loss = 0.0;
    for (std::size_t l = 0; l < blocks; ++l) {
      double m = 0.0;
      for (const auto& tr : batch) m += tr.soft[l];
      m /= static_cast<double>(batch.size());
      loss += (m - t) * (m - t);
    }
    return loss / static_cast<double>(blocks);
  }
  double m = 0.0;
  for (const auto& tr : batch) {
    for (double s : tr.soft) m += s;
  }
  m /= static_cast<double>(batch.size() * blocks);
  return (m - t) * (m - t);
}

std::vector<std::vector<double>> target_rate_loss_grad(const std::vector<GateTrace>& batch, double t,
                                                       bool per_gate) {
  std::vector<std::vector<double>> g(batch.size());
  if (batch.empty() || batch.front().soft.empty()) return g;
  const std::size_t blocks = batch.front().soft.size();
  const double b = static_cast<double>(batch.size());
  for (auto& row : g) row.assign(blocks, 0.0);
  if (per_gate) {
    for (std::size_t l = 0; l < blocks; ++l) {
      double m = 0.0;
      for (const auto& tr : batch) m += tr.soft[l];
      m /= b;
      const double v = 2.0 * (m - t) / (b * static_cast<double>(blocks));
      for (auto& row : g) row[l] = v;
    }
    return g;
  }
  double m = 0.0;
  for (const auto& tr : batch) {
    for (double s : tr.soft) m += s;
  }
  const double count = b * static_cast<double>(blocks);
  m /= count;
  const double v = 2.0 * (m - t) / count;
  for (auto& row : g) std::fill(row.begin(), row.end(), v);
  return g;
}

template <typename T>
BasicTensor<T> reflect_pad(const BasicTensor<T>& x, int pad_h, int pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  if (pad_h >= x.h() || pad_w >= x.w()) {
    throw ConfigError(fmt::format("reflect_pad: padding {}x{} too large for {}", pad_h, pad_w, x.shape().str()));
  }
  BasicTensor<T> out(x.h() + pad_h, x.w() + pad_w, x.c());
  for (int y = 0; y < out.h(); ++y) {
    const int sy = y < x.h() ? y : 2 * (x.h() - 1) - y;
    for (int xx = 0; xx < out.w(); ++xx) {
      const int sx = xx < x.w() ? xx : 2 * (x.w() - 1) - xx;
      std::copy(x.pixel(sy, sx), x.pixel(sy, sx) + x.c(), out.pixel(y, xx));
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> crop(const BasicTensor<T>& x, int h, int w) {
  if (h == x.h() && w == x.w()) return x;
  BasicTensor<T> out(h, w, x.c());
  for (int y = 0; y < h; ++y) std::copy(x.pixel(y, 0), x.pixel(y, 0) + static_cast<std::size_t>(w) * x.c(), out.pixel(y, 0));
  return out;
}

namespace {

template <typename T>
BasicTensor<T> zero_pad(const BasicTensor<T>& x, int pad_h, int pad_w) {
  if (pad_h == 0 && pad_w == 0) return x;
  BasicTensor<T> out(x.h() + pad_h, x.w() + pad_w, x.c());
  for (int y = 0; y < x.h(); ++y) std::copy(x.pixel(y, 0), x.pixel(y, 0) + static_cast<std::size_t>(x.w()) * x.c(), out.pixel(y, 0));
  return out;
}

template <typename T>
bool all_zero(const BasicTensor<T>& x) {
  return std::all_of(x.values().begin(), x.values().end(), [](T v) { return v == T(0); });
}

}  // namespace

template <typename T>
SegModel<T>::SegModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int c = config_.backbone_channels;
  std::mt19937_64 rng(config_.seed);
  stem1 = nn::ConvLayer<T>("stem.conv1", nn::LayerSpec::conv(7, 3, c, 2, 3));
  stem_bn1 = nn::BatchNormLayer<T>("stem.bn1", c);
  stem2 = nn::ConvLayer<T>("stem.conv2", nn::LayerSpec::conv(3, c, c, 1, 1));
  stem_bn2 = nn::BatchNormLayer<T>("stem.bn2", c);
  embedding = side::EmbeddingLayer<T>(config_.raw_channels, config_.d);
  diffusion = side::DiffusionOperator<T>(config_.n, config_.diffusion_init);
  fusion = nn::ConvLayer<T>("fusion.conv", nn::LayerSpec::conv(3, c + config_.d, c, 1, 1), nn::ParamGroup::kFusion);
  fusion_bn = nn::BatchNormLayer<T>("fusion.bn", c, nn::ParamGroup::kFusion);
  for (int i = 0; i < config_.num_gated_blocks; ++i) {
    blocks.emplace_back(fmt::format("block{}", i), c, config_.dilations[i], config_.gated, config_.gate_hidden,
                        config_.gumbel_temperature);
  }
  head = nn::ConvLayer<T>("head.conv", nn::LayerSpec::conv(1, c, config_.num_classes));
  input_mean = BasicTensor<T>(1, 1, 3, T(0.5));

  nn::init_uniform_fan_in(stem1.weight, 7 * 7 * 3, rng);
  nn::init_uniform_fan_in(stem2.weight, 9 * c, rng);
  nn::init_uniform_fan_in(embedding.fc.weight, config_.raw_channels, rng);
  nn::init_uniform_fan_in(fusion.weight, 9 * c, rng);
  // Rows are (ky, kx, cin); the side channels come after the backbone ones.
  const int cin = c + config_.d;
  for (int k = 0; k < 9; ++k) {
    for (int ch = c; ch < cin; ++ch) {
      T* row = fusion.weight.value.data() + (static_cast<std::size_t>(k) * cin + ch) * c;
      std::fill(row, row + c, T(0));
    }
  }
  for (auto& b : blocks) {
    nn::init_uniform_fan_in(b.conv1.weight, 9 * c, rng);
    nn::init_uniform_fan_in(b.conv2.weight, 9 * c, rng);
    if (b.gated) {
      nn::init_uniform_fan_in(b.gate_fc1.weight, c, rng);
      nn::init_uniform_fan_in(b.gate_fc2.weight, config_.gate_hidden, rng);
      b.gate_fc2.bias.value.fill(static_cast<T>(config_.gate_bias_init));
    }
  }
  nn::init_uniform_fan_in(head.weight, c, rng);
}

template <typename T>
ForwardResult<T> SegModel<T>::forward(const BasicTensor<T>& image, const BasicTensor<T>& raw_side, Mode mode,
                                      std::mt19937_64* rng, ForwardCache<T>* cache) {
  if (image.c() != 3) throw ConfigError(fmt::format("model: image must have 3 channels, got {}", image.c()));
  if (!raw_side.empty() &&
      (raw_side.h() != image.h() || raw_side.w() != image.w() || raw_side.c() != config_.raw_channels)) {
    throw ConfigError(fmt::format("model: side map {} does not match image {} with {} raw channels",
                                  raw_side.shape().str(), image.shape().str(), config_.raw_channels));
  }
  const bool training = mode == Mode::kTrain;
  ForwardCache<T> local;
  ForwardCache<T>& c = cache ? *cache : local;
  c.pad_h = (4 - image.h() % 4) % 4;
  c.pad_w = (4 - image.w() % 4) % 4;

  BasicTensor<T> x = image;
  const std::size_t pixels = static_cast<std::size_t>(x.h()) * x.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (int ch = 0; ch < 3; ++ch) x[p * 3 + ch] -= input_mean[ch];
  }
  c.image = reflect_pad(x, c.pad_h, c.pad_w);

  c.s1 = nn::conv2d(c.image, stem1);
  c.a1 = nn::relu(nn::batchnorm(c.s1, stem_bn1, training, &c.sbn1));
  c.p1 = nn::maxpool(c.a1, 3, 2, 1, &c.pool);
  c.s2 = nn::conv2d(c.p1, stem2);
  c.backbone = nn::relu(nn::batchnorm(c.s2, stem_bn2, training, &c.sbn2));

  c.has_side = !raw_side.empty() && !all_zero(raw_side);
  if (c.has_side) {
    c.raw_side = zero_pad(raw_side, c.pad_h, c.pad_w);
    c.side_embedded = side::embed(c.raw_side, embedding, &c.embed);
    auto diffused = side::diffuse(c.side_embedded, diffusion);
    c.fused = side::fuse(diffused.output, c.backbone, &c.fuse);
  } else {
    c.fused = nn::concat_channels(c.backbone, BasicTensor<T>(c.backbone.h(), c.backbone.w(), config_.d));
  }
  c.f1 = nn::conv2d(c.fused, fusion);
  c.trunk = nn::relu(nn::batchnorm(c.f1, fusion_bn, training, &c.fbn));

  ForwardResult<T> r;
  GateTrace& trace = r.trace;
  c.blocks.assign(blocks.size(), BlockCache<T>{});
  x = c.trunk;
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    GatedBlock<T>& block = blocks[l];
    BlockCache<T>& bc = c.blocks[l];
    if (!block.gated || override_ == GateOverride::kAllOn) {
      bc.gate = GateDecision{};
    } else if (override_ == GateOverride::kAllOff) {
      bc.gate = GateDecision{false, 0.0, 0.0, 0.0, 0.0};
    } else {
      bc.gate = gate_decision(pooled_descriptor(x), block, mode, rng, &bc.gate_cache);
      bc.gate_trainable = training;
    }
    trace.decisions.push_back(bc.gate.z ? 1 : 0);
    trace.relevance.push_back(bc.gate.relevance);
    if (block.gated) trace.soft.push_back(bc.gate.soft);

    bc.has_body = bc.gate.z || bc.gate_trainable;
    if (!bc.has_body) continue;
    bc.input = x;
    bc.body = block_body(x, block, training, &bc.body_cache);
    if (bc.gate.z) x += bc.body;
  }
  double on = 0.0;
  for (auto z : trace.decisions) on += z;
  trace.executed_fraction = on / static_cast<double>(trace.decisions.size());

  c.head_in = x;
  c.head_out = nn::conv2d(x, head);
  r.logits = crop(nn::upsample_bilinear(c.head_out, 4), image.h(), image.w());
  return r;
}

template <typename T>
void SegModel<T>::backward(const ForwardCache<T>& c, const BasicTensor<T>& grad_logits,
                           const std::vector<double>& soft_grad) {
  BasicTensor<T> g = zero_pad(grad_logits, c.pad_h, c.pad_w);
  g = nn::upsample_bilinear_backward(g, c.head_out.shape(), 4);
  g = nn::conv2d_backward(c.head_in, head, g);

  std::size_t soft_index = blocks.size();
  for (std::size_t l = blocks.size(); l-- > 0;) {
    GatedBlock<T>& block = blocks[l];
    const BlockCache<T>& bc = c.blocks[l];
    if (block.gated) --soft_index;
    if (!bc.has_body) continue;
    BasicTensor<T> g_in = g;
    if (bc.gate.z) g_in += block_body_backward(bc.input, block, bc.body_cache, g);
    if (bc.gate_trainable) {
      double dsoft = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) dsoft += static_cast<double>(g[i]) * bc.body[i];
      if (!soft_grad.empty()) dsoft += soft_grad.at(soft_index);
      const double s = bc.gate.soft;
      BasicTensor<T> g_logit(1, 1, 1, static_cast<T>(dsoft * s * (1.0 - s) / block.temperature));
      BasicTensor<T> g_hidden = nn::affine_backward(bc.gate_cache.hidden, block.gate_fc2, g_logit);
      g_hidden = nn::relu_backward(bc.gate_cache.hidden, g_hidden);
      BasicTensor<T> g_desc = nn::affine_backward(bc.gate_cache.descriptor, block.gate_fc1, g_hidden);
      g_in += nn::global_mean_pool_backward(g_desc, bc.input.shape());
    }
    g = std::move(g_in);
  }

  g = nn::relu_backward(c.trunk, g);
  g = nn::batchnorm_backward(c.fbn, fusion_bn, g);
  g = nn::conv2d_backward(c.fused, fusion, g);
  auto [g_backbone, g_side] = nn::split_channels(g, config_.backbone_channels);
  if (c.has_side) {
    BasicTensor<T> g_full = nn::maxpool_backward(c.fuse.pool, g_side);
    auto dg = side::diffuse_backward(g_full, c.side_embedded, diffusion);
    for (int i = 0; i < diffusion.passes(); ++i) {
      diffusion.weights[i].grad[0] += static_cast<T>(dg.weights[i]);
    }
    side::embed_backward(c.raw_side, c.embed, embedding, dg.input);
  }
  g = nn::relu_backward(c.backbone, g_backbone);
  g = nn::batchnorm_backward(c.sbn2, stem_bn2, g);
  g = nn::conv2d_backward(c.p1, stem2, g);
  g = nn::maxpool_backward(c.pool, g);
  g = nn::relu_backward(c.a1, g);
  g = nn::batchnorm_backward(c.sbn1, stem_bn1, g);
  nn::conv2d_backward(c.image, stem1, g, false);
}

template <typename T>
std::vector<BasicParam<T>*> SegModel<T>::params() {
  std::vector<BasicParam<T>*> p;
  auto conv = [&](nn::ConvLayer<T>& l) {
    p.push_back(&l.weight);
    p.push_back(&l.bias);
  };
  auto bn = [&](nn::BatchNormLayer<T>& l) {
    p.push_back(&l.gamma);
    p.push_back(&l.beta);
  };
  conv(stem1);
  bn(stem_bn1);
  conv(stem2);
  bn(stem_bn2);
  p.push_back(&embedding.fc.weight);
  p.push_back(&embedding.fc.bias);
  for (auto& w : diffusion.weights) p.push_back(&w);
  conv(fusion);
  bn(fusion_bn);
  for (auto& b : blocks) {
    conv(b.conv1);
    bn(b.bn1);
    conv(b.conv2);
    bn(b.bn2);
    if (b.gated) {
      p.push_back(&b.gate_fc1.weight);
      p.push_back(&b.gate_fc1.bias);
      p.push_back(&b.gate_fc2.weight);
      p.push_back(&b.gate_fc2.bias);
    }
  }
  conv(head);
  return p;
}

template <typename T>
std::vector<std::pair<std::string, BasicTensor<T>*>> SegModel<T>::buffers() {
  std::vector<std::pair<std::string, BasicTensor<T>*>> b;
  auto bn = [&](const std::string& name, nn::BatchNormLayer<T>& l) {
    b.emplace_back(name + ".running_mean", &l.running_mean);
    b.emplace_back(name + ".running_var", &l.running_var);
  };
  b.emplace_back("input.mean", &input_mean);
  bn("stem.bn1", stem_bn1);
  bn("stem.bn2", stem_bn2);
  bn("fusion.bn", fusion_bn);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    bn(fmt::format("block{}.bn1", i), blocks[i].bn1);
    bn(fmt::format("block{}.bn2", i), blocks[i].bn2);
  }
  return b;
}

template <typename T>
void SegModel<T>::zero_grad() {
  for (auto* p : params()) p->zero_grad();
}

#define SINF_INSTANTIATE_MODEL(T)                                                                          \
  template struct GatedBlock<T>;                                                                           \
  template class SegModel<T>;                                                                              \
  template BasicTensor<T> block_body(const BasicTensor<T>&, GatedBlock<T>&, bool, BodyCache<T>*);          \
  template BasicTensor<T> block_body_backward(const BasicTensor<T>&, GatedBlock<T>&, const BodyCache<T>&,  \
                                              const BasicTensor<T>&);                                      \
  template BasicTensor<T> pooled_descriptor(const BasicTensor<T>&);                                        \
  template GateDecision gate_decision(const BasicTensor<T>&, const GatedBlock<T>&, Mode, std::mt19937_64*, \
                                      GateCache<T>*);                                                      \
  template BasicTensor<T> gated_block_forward(const BasicTensor<T>&, GatedBlock<T>&, bool, bool);          \
  template BasicTensor<T> reflect_pad(const BasicTensor<T>&, int, int);                                    \
  template BasicTensor<T> crop(const BasicTensor<T>&, int, int);

SINF_INSTANTIATE_MODEL(float)
SINF_INSTANTIATE_MODEL(double)

#undef SINF_INSTANTIATE_MODEL

}  // namespace sinet::net
