#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "sinf/checkpoint.hpp"
#include "sinf/grad_check.hpp"
#include "sinf/model.hpp"
#include "unit/test_util.hpp"

using namespace sinet;
using namespace sinet::nn;
using namespace sinet::net;
using testutil::probe;
using testutil::random_tensor;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.num_classes = 3;
  c.raw_channels = 3;
  c.d = 3;
  c.n = 2;
  c.backbone_channels = 4;
  c.num_gated_blocks = 2;
  c.dilations = {1, 2};
  c.gate_hidden = 5;
  c.seed = 42;
  return c;
}

template <typename T>
void randomize_block(GatedBlock<T>& b, std::mt19937_64& rng) {
  for (auto* p : {&b.conv1.weight, &b.conv1.bias, &b.conv2.weight, &b.conv2.bias, &b.bn1.gamma, &b.bn1.beta,
                  &b.bn2.gamma, &b.bn2.beta}) {
    p->value = random_tensor<T>(p->value.h(), p->value.w(), p->value.c(), rng);
  }
}

TensorD side_map(int h, int w, int c, std::mt19937_64& rng) {
  TensorD x(h, w, c);
  std::uniform_int_distribution<int> ry(0, h - 1), rx(0, w - 1), cls(0, c - 1);
  for (int i = 0; i < 6; ++i) x.at(ry(rng), rx(rng), cls(rng)) = 1.0;
  return x;
}

}  // namespace

TEST_CASE("pooled descriptor") {
  Tensor three(4, 5, 6, 3.0F);
  Tensor d = pooled_descriptor(three);
  REQUIRE(d.shape() == Shape{1, 1, 6});
  for (float v : d.values()) CHECK(v == 3.0F);

  Tensor m(2, 2, 1);
  m.values() = {1, 2, 3, 4};
  CHECK(pooled_descriptor(m)[0] == 2.5F);

  std::mt19937_64 rng(3);
  Tensor r = random_tensor<float>(9, 7, 4, rng);
  Tensor rd = pooled_descriptor(r);
  for (int c = 0; c < 4; ++c) {
    double s = 0.0;
    for (int y = 0; y < 9; ++y)
      for (int x = 0; x < 7; ++x) s += r.at(y, x, c);
    CHECK(std::abs(rd[c] - s / 63.0) < 1e-6);
  }
}

TEST_CASE("gate decision saturation and determinism") {
  GatedBlock<float> b("b", 4, 1, true, 16, 1.0);
  Tensor desc(1, 1, 4, 0.5F);
  b.gate_fc2.bias.value[0] = 40.0F;
  auto on = gate_decision(desc, b, Mode::kEval, nullptr);
  CHECK(on.z);
  CHECK(on.relevance == doctest::Approx(1.0));
  b.gate_fc2.bias.value[0] = -40.0F;
  auto off = gate_decision(desc, b, Mode::kEval, nullptr);
  CHECK_FALSE(off.z);
  CHECK(off.relevance == doctest::Approx(0.0));

  std::mt19937_64 init(8);
  init_uniform_fan_in(b.gate_fc1.weight, 4, init);
  init_uniform_fan_in(b.gate_fc2.weight, 16, init);
  b.gate_fc2.bias.value[0] = 0.0F;
  auto replay = [&] {
    std::mt19937_64 rng(77);
    std::vector<int> seq;
    for (int i = 0; i < 64; ++i) seq.push_back(gate_decision(desc, b, Mode::kTrain, &rng).z);
    return seq;
  };
  auto a = replay();
  CHECK(a == replay());
  CHECK(std::count(a.begin(), a.end(), 1) > 0);
  CHECK(std::count(a.begin(), a.end(), 0) > 0);
  CHECK_THROWS_AS(gate_decision(desc, b, Mode::kTrain, nullptr), ConfigError);
}

TEST_CASE("gated block: z = 0 passes through bitwise over many random blocks") {
  std::mt19937_64 rng(1000);
  std::uniform_int_distribution<int> dim(2, 9), ch(1, 5), dil(1, 3);
  for (int i = 0; i < 200; ++i) {
    const int c = ch(rng);
    GatedBlock<float> b("b", c, dil(rng), true, 4, 1.0);
    randomize_block(b, rng);
    Tensor x = random_tensor<float>(dim(rng), dim(rng), c, rng, -50, 50);
    CHECK(gated_block_forward(x, b, false, i % 2 == 0).bitwise_equal(x));
  }
}

TEST_CASE("gated block: z = 1 adds the separately computed body") {
  std::mt19937_64 rng(5);
  GatedBlock<float> b("b", 4, 2, true, 4, 1.0);
  randomize_block(b, rng);
  Tensor x = random_tensor<float>(8, 8, 4, rng);
  GatedBlock<float> copy = b;
  Tensor body = block_body(x, copy, false);
  Tensor want = x;
  want += body;
  CHECK(gated_block_forward(x, b, true).bitwise_equal(want));

  b.bn2.gamma.value.zero();
  b.bn2.beta.value.zero();
  CHECK(gated_block_forward(x, b, true).bitwise_equal(x));
}

TEST_CASE("target rate loss") {
  GateTrace at_t;
  at_t.soft = {0.6, 0.6, 0.6};
  CHECK(target_rate_loss({at_t, at_t}, 0.6) == doctest::Approx(0.0));
  GateTrace ones;
  ones.soft = {1.0, 1.0};
  CHECK(target_rate_loss({ones}, 0.8) == doctest::Approx(0.04));

  GateTrace a, b;
  a.soft = {0.1, 0.9, 0.4};
  b.soft = {0.7, 0.2, 1.0};
  const double m = (0.1 + 0.9 + 0.4 + 0.7 + 0.2 + 1.0) / 6.0;
  CHECK(target_rate_loss({a, b}, 0.6) == doctest::Approx((m - 0.6) * (m - 0.6)));
  double per = 0.0;
  for (int l = 0; l < 3; ++l) {
    const double ml = (a.soft[l] + b.soft[l]) / 2.0;
    per += (ml - 0.6) * (ml - 0.6);
  }
  CHECK(target_rate_loss({a, b}, 0.6, true) == doctest::Approx(per / 3.0));

  for (bool per_gate : {false, true}) {
    std::vector<GateTrace> batch{a, b};
    auto g = target_rate_loss_grad(batch, 0.6, per_gate);
    for (int s = 0; s < 2; ++s)
      for (int l = 0; l < 3; ++l) {
        auto up = batch, down = batch;
        up[s].soft[l] += 1e-6;
        down[s].soft[l] -= 1e-6;
        const double num =
            (target_rate_loss(up, 0.6, per_gate) - target_rate_loss(down, 0.6, per_gate)) / 2e-6;
        CHECK(g[s][l] == doctest::Approx(num).epsilon(1e-6));
      }
  }
}

TEST_CASE("model forward shape and channel accounting") {
  ModelConfig cfg;
  cfg.num_classes = 4;
  Model m(cfg);
  CHECK(m.fusion.spec.in_channels == cfg.backbone_channels + cfg.d);
  std::mt19937_64 rng(1);
  Tensor img = random_tensor<float>(80, 80, 3, rng, 0, 1);
  auto r = m.forward(img, {}, Mode::kEval);
  CHECK(r.logits.shape() == Shape{80, 80, 4});
  CHECK(r.trace.decisions.size() == 6);
  double on = 0.0;
  for (auto z : r.trace.decisions) on += z;
  CHECK(r.trace.executed_fraction == on / 6.0);

  Tensor odd = random_tensor<float>(42, 37, 3, rng, 0, 1);
  CHECK(m.forward(odd, Tensor(42, 37, 4), Mode::kEval).logits.shape() == Shape{42, 37, 4});
  CHECK_THROWS_AS(m.forward(odd, Tensor(42, 37, 2), Mode::kEval), ConfigError);
}

TEST_CASE("zero side map equals running without side input") {
  Model m(ModelConfig{});
  std::mt19937_64 rng(2);
  Tensor img = random_tensor<float>(32, 32, 3, rng, 0, 1);
  Tensor with_zero = m.forward(img, Tensor(32, 32, 4), Mode::kEval).logits;
  Tensor without = m.forward(img, {}, Mode::kEval).logits;
  CHECK(with_zero.bitwise_equal(without));

  // Side channels start as a no-op: any side map gives the same logits.
  Tensor side(32, 32, 4);
  side.at(10, 10, 2) = 1.0F;
  CHECK(m.forward(img, side, Mode::kEval).logits.bitwise_equal(without));
}

TEST_CASE("all gates off equals the stem and classifier only") {
  Model m(ModelConfig{});
  std::mt19937_64 rng(4);
  Tensor img = random_tensor<float>(40, 40, 3, rng, 0, 1);
  m.set_gate_override(GateOverride::kAllOff);
  auto r = m.forward(img, {}, Mode::kEval);
  CHECK(r.trace.executed_fraction == 0.0);

  Tensor x = img;
  for (std::size_t p = 0; p < 1600; ++p)
    for (int c = 0; c < 3; ++c) x[p * 3 + c] -= m.input_mean[c];
  Tensor s = relu(batchnorm(conv2d(x, m.stem1), m.stem_bn1, false));
  s = maxpool(s, 3, 2, 1);
  s = relu(batchnorm(conv2d(s, m.stem2), m.stem_bn2, false));
  s = concat_channels(s, Tensor(s.h(), s.w(), m.config().d));
  s = relu(batchnorm(conv2d(s, m.fusion), m.fusion_bn, false));
  Tensor want = upsample_bilinear(conv2d(s, m.head), 4);
  CHECK(r.logits.bitwise_equal(want));
}

TEST_CASE("eval mode is deterministic") {
  Model m(ModelConfig{});
  std::mt19937_64 rng(6);
  Tensor img = random_tensor<float>(48, 48, 3, rng, 0, 1);
  Tensor side(48, 48, 4);
  side.at(5, 7, 1) = 1.0F;
  auto a = m.forward(img, side, Mode::kEval);
  auto b = m.forward(img, side, Mode::kEval);
  CHECK(a.logits.bitwise_equal(b.logits));
  CHECK(a.trace.decisions == b.trace.decisions);
}

TEST_CASE("end-to-end gradients through gated blocks, fusion and embedding") {
  std::mt19937_64 rng(12);
  SegModel<double> m(small_config());
  // Wake the zero-initialized side path so its gradients are non-trivial.
  for (auto& v : m.fusion.weight.value.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  m.diffusion.weights[1].value[0] = 0.1;
  m.set_gate_override(GateOverride::kAllOn);
  TensorD img = random_tensor<double>(16, 16, 3, rng, 0, 1);
  TensorD side = side_map(16, 16, 3, rng);
  TensorD r = random_tensor<double>(16, 16, 3, rng);
  ForwardCache<double> cache;
  m.zero_grad();
  m.forward(img, side, Mode::kTrain, nullptr, &cache);
  m.backward(cache, r);
  auto f = [&] { return probe(m.forward(img, side, Mode::kTrain).logits, r); };
  double worst = 0.0;
  std::string worst_name;
  for (auto* p : m.params()) {
    auto res = grad_check<double>(f, *p, 1e-5);
    // A conv bias feeding batch statistics is cancelled by the mean
    // subtraction; both estimates must vanish instead.
    const bool cancelled = p->name.ends_with(".bias") && p->name.find("conv") != std::string::npos &&
                           p->name != "head.conv.bias";
    if (cancelled) {
      for (double v : p->grad.values()) CHECK(std::abs(v) < 1e-9);
      CHECK(std::abs(res.worst_numeric) < 1e-6);
      continue;
    }
    if (res.max_relative_error > worst) {
      worst = res.max_relative_error;
      worst_name = p->name;
    }
  }
  CAPTURE(worst_name);
  CHECK(worst < 1e-3);
}

TEST_CASE("straight-through gate gradient reaches the gate MLP") {
  std::mt19937_64 rng(3);
  SegModel<double> m(small_config());
  TensorD img = random_tensor<double>(16, 16, 3, rng, 0, 1);
  TensorD r = random_tensor<double>(16, 16, 3, rng);
  std::mt19937_64 gate_rng(1);
  ForwardCache<double> cache;
  m.zero_grad();
  auto out = m.forward(img, {}, Mode::kTrain, &gate_rng, &cache);
  m.backward(cache, r, {0.5, 0.5});
  double g = 0.0;
  for (auto& v : m.blocks[0].gate_fc2.weight.grad.values()) g += std::abs(v);
  CHECK(g > 0.0);
  CHECK(out.trace.soft.size() == 2);
}

TEST_CASE("ungated config has no gate parameters and runs every block") {
  ModelConfig c = small_config();
  c.gated = false;
  Model m(c);
  for (auto* p : m.params()) CHECK(p->name.find("gate") == std::string::npos);
  std::mt19937_64 rng(1);
  auto r = m.forward(random_tensor<float>(16, 16, 3, rng, 0, 1), {}, Mode::kTrain, &rng);
  CHECK(r.trace.executed_fraction == 1.0);
  CHECK(r.trace.soft.empty());
}

TEST_CASE("model config json round-trip and validation") {
  ModelConfig c = small_config();
  c.per_gate_rate = true;
  c.diffusion_init = side::DiffusionInit::kOnes;
  ModelConfig back = model_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK_THROWS_AS(model_config_from_json({{"bogus", 1}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json({{"target_rate", 0.0}}), ConfigError);
  CHECK_THROWS_AS(model_config_from_json({{"dilations", {1, 2}}}), ConfigError);
}

TEST_CASE("checkpoint round-trip is bit exact") {
  auto dir = std::filesystem::temp_directory_path() / "sinf_ckpt_test";
  std::filesystem::create_directories(dir);
  Model m(small_config());
  std::mt19937_64 rng(9);
  for (auto* p : m.params()) p->value = random_tensor<float>(p->value.h(), p->value.w(), p->value.c(), rng);
  m.stem_bn1.running_var = random_tensor<float>(1, 4, 1, rng, 0.5, 2);
  ckpt::save_model(m, dir / "a.ckpt");
  Model back = ckpt::load_model(dir / "a.ckpt");
  auto pa = m.params(), pb = back.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value.bitwise_equal(pb[i]->value));
  auto ba = m.buffers(), bb = back.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(ba[i].second->bitwise_equal(*bb[i].second));

  ckpt::save_model(back, dir / "b.ckpt");
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const std::string bytes = slurp(dir / "a.ckpt");
  CHECK(bytes == slurp(dir / "b.ckpt"));

  auto code_of = [](const std::string& b) {
    try {
      ckpt::decode(b);
    } catch (const ckpt::CheckpointError& e) {
      return e.code();
    }
    FAIL("expected CheckpointError");
    return ckpt::Errc::kNotFound;
  };
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  CHECK(code_of(flipped) == ckpt::Errc::kChecksumMismatch);
  CHECK(code_of(bytes.substr(0, bytes.size() - 100)) == ckpt::Errc::kTruncated);
  std::string versioned = bytes;
  versioned[4] = 9;
  CHECK(code_of(versioned) == ckpt::Errc::kVersionMismatch);
  CHECK(code_of("NOPE" + bytes.substr(4)) == ckpt::Errc::kBadMagic);
  try {
    ckpt::read(dir / "missing.ckpt");
    FAIL("expected not found");
  } catch (const ckpt::CheckpointError& e) {
    CHECK(e.code() == ckpt::Errc::kNotFound);
  }

  ModelConfig other = small_config();
  other.d = 5;
  Model wrong(other);
  try {
    ckpt::restore(wrong, ckpt::read(dir / "a.ckpt"), false);
    FAIL("expected config mismatch");
  } catch (const ckpt::CheckpointError& e) {
    CHECK(e.code() == ckpt::Errc::kConfigHashMismatch);
  }
  std::filesystem::remove_all(dir);
}
