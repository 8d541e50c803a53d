#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "doctest.h"
#include "sinf/grad_check.hpp"
#include "sinf/sideinfo.hpp"
#include "unit/test_util.hpp"

using namespace sinet;
using namespace sinet::nn;
using namespace sinet::side;
using testutil::probe;
using testutil::random_tensor;

namespace {

// Explicit 3x3 ones convolution written as a plain neighbourhood loop.
TensorD ones_conv(const TensorD& x) {
  TensorD out(x.shape());
  for (int y = 0; y < x.h(); ++y)
    for (int xx = 0; xx < x.w(); ++xx)
      for (int c = 0; c < x.c(); ++c) {
        double s = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int sy = y + dy, sx = xx + dx;
            if (sy >= 0 && sx >= 0 && sy < x.h() && sx < x.w()) s += x.at(sy, sx, c);
          }
        out.at(y, xx, c) = s;
      }
  return out;
}

struct Oracle {
  TensorD value;
  std::vector<int> coverage;
};

// Weighted multi-pass sum with coverage counted by pushing the support
// indicator through the same ones convolution.
Oracle diffusion_oracle(const TensorD& x, const std::vector<double>& w) {
  const int h = x.h(), wd = x.w(), c = x.c();
  TensorD ind(h, wd, 1);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < wd; ++xx)
      for (int ch = 0; ch < c; ++ch)
        if (x.at(y, xx, ch) != 0.0) ind.at(y, xx) = 1.0;
  TensorD acc(x.shape());
  TensorD cur = x;
  std::vector<int> cov(static_cast<std::size_t>(h) * wd, 0);
  for (double wi : w) {
    cur = ones_conv(cur);
    ind = ones_conv(ind);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += wi * cur[i];
    for (std::size_t p = 0; p < cov.size(); ++p) cov[p] += ind[p] > 0.0 ? 1 : 0;
  }
  for (std::size_t p = 0; p < cov.size(); ++p)
    for (int ch = 0; ch < c; ++ch) acc[p * c + ch] /= std::max(cov[p], 1);
  return {acc, cov};
}

template <typename T>
DiffusionOperator<T> make_op(const std::vector<double>& w) {
  DiffusionOperator<T> op(static_cast<int>(w.size()));
  for (std::size_t i = 0; i < w.size(); ++i) op.weights[i].value[0] = static_cast<T>(w[i]);
  return op;
}

bool close(double a, double b) { return std::abs(a - b) <= 1e-6 * std::max(1.0, std::abs(b)); }

TensorD sparse_map(int h, int w, int c, double density, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TensorD x(h, w, c);
  for (int y = 0; y < h; ++y)
    for (int xx = 0; xx < w; ++xx) {
      if (u(rng) >= density) continue;
      double n = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        x.at(y, xx, ch) = u(rng) * 2 - 1;
        n += x.at(y, xx, ch) * x.at(y, xx, ch);
      }
      for (int ch = 0; ch < c; ++ch) x.at(y, xx, ch) /= std::sqrt(n);
    }
  return x;
}

std::vector<double> graded_weights(int n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = u(rng) / std::pow(9.0, i);
  return w;
}

}  // namespace

TEST_CASE("rasterize examples") {
  AnnotationSet empty(6, 7, 3);
  Tensor z = rasterize(empty);
  CHECK(z.shape() == Shape{6, 7, 3});
  for (float v : z.values()) CHECK(v == 0.0F);

  AnnotationSet one(5, 5, 2);
  one.items.push_back(Annotation::point({3.0F, 4.0F}, {2, 3}));
  Tensor m = rasterize(one);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 5; ++x) {
      const bool here = y == 2 && x == 3;
      CHECK(m.at(y, x, 0) == doctest::Approx(here ? 0.6 : 0.0));
      CHECK(m.at(y, x, 1) == doctest::Approx(here ? 0.8 : 0.0));
    }

  AnnotationSet two(4, 4, 3);
  two.items.push_back(Annotation::point({1, 0, 0}, {1, 1}));
  two.items.push_back(Annotation::point({0, 1, 0}, {1, 1}));
  Tensor t = rasterize(two);
  CHECK(t.at(1, 1, 0) == 0.5F);
  CHECK(t.at(1, 1, 1) == 0.5F);
  CHECK(t.at(1, 1, 2) == 0.0F);
}

TEST_CASE("rasterize accumulates and counts like a direct oracle") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> coord(0, 11), cls(0, 3), width(1, 5);
  AnnotationSet set(12, 12, 4);
  for (int i = 0; i < 12; ++i) {
    set.items.push_back(Annotation::stroke(cls(rng), {{coord(rng), coord(rng)}, {coord(rng), coord(rng)}},
                                           static_cast<float>(width(rng))));
  }
  TensorD sum(12, 12, 4);
  std::vector<int> count(144, 0);
  for (const auto& a : set.items) {
    for (const auto& p : stroke_pixels(a, 12, 12)) {
      sum.at(p.row, p.col, a.class_id) += 1.0;
      ++count[p.row * 12 + p.col];
    }
  }
  Tensor r = rasterize(set);
  for (int p = 0; p < 144; ++p)
    for (int c = 0; c < 4; ++c) {
      const double want = count[p] ? sum[p * 4 + c] / count[p] : 0.0;
      CHECK(r[p * 4 + c] == doctest::Approx(want).epsilon(1e-7));
    }

  // Permutation invariance.
  AnnotationSet shuffled = set;
  std::shuffle(shuffled.items.begin(), shuffled.items.end(), rng);
  CHECK(rasterize(shuffled).bitwise_equal(r));
}

TEST_CASE("rasterize rejects out-of-bounds geometry with the annotation index") {
  AnnotationSet set(8, 8, 2);
  set.items.push_back(Annotation::stroke(0, {{1, 1}, {2, 2}}, 2));
  set.items.push_back(Annotation::stroke(1, {{1, 1}, {9, 2}}, 2));
  try {
    rasterize(set);
    FAIL("expected AnnotationError");
  } catch (const AnnotationError& e) {
    CHECK(e.path().find("[1]") != std::string::npos);
  }
}

TEST_CASE("stroke pixels lie within half the width of the polyline") {
  Annotation s = Annotation::stroke(0, {{5, 2}, {5, 12}}, 3);
  auto px = stroke_pixels(s, 11, 15);
  for (const auto& p : px) {
    CHECK(p.row >= 4);
    CHECK(p.row <= 6);
    CHECK(p.col >= 1);
    CHECK(p.col <= 13);
  }
  CHECK(std::find(px.begin(), px.end(), PixelCoord{5, 7}) != px.end());
  CHECK(std::find(px.begin(), px.end(), PixelCoord{4, 7}) != px.end());
  CHECK(std::find(px.begin(), px.end(), PixelCoord{3, 7}) == px.end());
}

TEST_CASE("embed examples") {
  EmbeddingLayer<double> layer(3, 3);
  for (int i = 0; i < 3; ++i) layer.fc.weight.value[i * 3 + i] = 1.0;
  layer.fc.bias.value.fill(0.25);
  TensorD zero(4, 4, 3);
  TensorD ez = embed(zero, layer);
  for (double v : ez.values()) CHECK(v == 0.0);

  layer.fc.bias.value.zero();
  TensorD x(2, 2, 3);
  x.at(1, 0, 0) = 0.6;
  x.at(1, 0, 1) = 0.8;
  TensorD e = embed(x, layer);
  CHECK(e.at(1, 0, 0) == doctest::Approx(0.6));
  CHECK(e.at(1, 0, 1) == doctest::Approx(0.8));
  CHECK(e.at(1, 0, 2) == 0.0);
  CHECK(e.at(0, 0, 0) == 0.0);

  CHECK_THROWS_AS(embed(TensorD(2, 2, 4), layer), ConfigError);
}

TEST_CASE("embed equals hand matrix-vector product then L2 rescale") {
  std::mt19937_64 rng(2);
  EmbeddingLayer<double> layer(4, 6);
  layer.fc.weight.value = random_tensor<double>(4, 6, 1, rng);
  layer.fc.bias.value = random_tensor<double>(1, 6, 1, rng);
  TensorD x(5, 5, 4);
  for (int c = 0; c < 4; ++c) x.at(3, 1, c) = 0.1 * (c + 1);
  TensorD e = embed(x, layer);
  std::vector<double> v(6);
  double n = 0.0;
  for (int j = 0; j < 6; ++j) {
    v[j] = layer.fc.bias.value[j];
    for (int i = 0; i < 4; ++i) v[j] += x.at(3, 1, i) * layer.fc.weight.value[i * 6 + j];
    n += v[j] * v[j];
  }
  for (int j = 0; j < 6; ++j) CHECK(e.at(3, 1, j) == doctest::Approx(v[j] / std::sqrt(n)).epsilon(1e-12));
  for (int y = 0; y < 5; ++y)
    for (int xx = 0; xx < 5; ++xx)
      if (y != 3 || xx != 1)
        for (int j = 0; j < 6; ++j) CHECK(e.at(y, xx, j) == 0.0);
}

TEST_CASE("embedding gradients match central differences") {
  std::mt19937_64 rng(31);
  EmbeddingLayer<double> layer(4, 5);
  layer.fc.weight.value = random_tensor<double>(4, 5, 1, rng);
  layer.fc.bias.value = random_tensor<double>(1, 5, 1, rng);
  TensorD x = sparse_map(16, 16, 4, 0.3, rng);
  TensorD r = random_tensor<double>(16, 16, 5, rng);
  EmbedCache<double> cache;
  embed(x, layer, &cache);
  layer.fc.weight.zero_grad();
  layer.fc.bias.zero_grad();
  embed_backward(x, cache, layer, r);
  auto f = [&] { return probe(embed(x, layer), r); };
  CHECK(grad_check<double>(f, layer.fc.weight, 1e-6).max_relative_error < 1e-3);
  CHECK(grad_check<double>(f, layer.fc.bias, 1e-6).max_relative_error < 1e-3);
}

TEST_CASE("diffuse examples") {
  DiffusionOperator<float> op1(1);
  Tensor zero(6, 6, 2);
  auto rz = diffuse(zero, op1);
  for (float v : rz.output.values()) CHECK(v == 0.0F);
  for (int c : rz.coverage.counts) CHECK(c == 0);

  Tensor one(6, 6, 1);
  one.at(3, 2) = 1.0F;
  auto r1 = diffuse(one, op1);
  for (int y = 0; y < 6; ++y)
    for (int x = 0; x < 6; ++x) {
      const bool near = std::abs(y - 3) <= 1 && std::abs(x - 2) <= 1;
      CHECK(r1.output.at(y, x) == (near ? 1.0F : 0.0F));
      CHECK(r1.coverage.at(y, x) == (near ? 1 : 0));
    }
}

TEST_CASE("diffuse two-pass worked example over the whole map") {
  auto op = make_op<double>({1.0, 0.5});
  TensorD x(4, 4, 1);
  x.at(1, 1) = 1.0;
  auto r = diffuse(x, op);
  CHECK(r.output.at(1, 1) == 2.75);
  // f(x) is 1 on rows/cols 0..2; f^2(x) is the count of those in each 3x3.
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) {
      const double f1 = (y <= 2 && xx <= 2) ? 1.0 : 0.0;
      int f2 = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int sy = y + dy, sx = xx + dx;
          if (sy >= 0 && sx >= 0 && sy <= 2 && sx <= 2) ++f2;
        }
      const int cov = (f1 > 0 ? 1 : 0) + 1;
      CHECK(r.coverage.at(y, xx) == cov);
      CHECK(r.output.at(y, xx) == doctest::Approx((f1 + 0.5 * f2) / cov));
    }
}

TEST_CASE("diffuse matches the explicit multi-pass oracle on randomized cases") {
  std::mt19937_64 rng(123);
  std::uniform_int_distribution<int> dim(3, 20), ch(1, 4), passes(1, 6);
  std::uniform_real_distribution<double> dens(0.01, 0.5);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = passes(rng);
    TensorD x = sparse_map(dim(rng), dim(rng), ch(rng), dens(rng), rng);
    auto w = random_tensor<double>(1, n, 1, rng, -1.5, 1.5).values();
    auto got = diffuse(x, make_op<double>(w));
    auto want = diffusion_oracle(x, w);
    CHECK(got.coverage.counts == want.coverage);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(close(got.output[i], want.value[i]));
  }
}

TEST_CASE("diffusion support grows one pixel per pass") {
  for (int n = 1; n <= 5; ++n) {
    TensorD x(15, 15, 1);
    x.at(7, 7) = 1.0;
    TensorD cur = x;
    for (int i = 0; i < n; ++i) cur = box_sum3(cur);
    for (int y = 0; y < 15; ++y)
      for (int xx = 0; xx < 15; ++xx) {
        const bool inside = std::abs(y - 7) <= n && std::abs(xx - 7) <= n;
        CHECK((cur.at(y, xx) != 0.0) == inside);
      }
  }
}

TEST_CASE("diffuse is linear for a fixed support") {
  std::mt19937_64 rng(7);
  TensorD a = sparse_map(12, 12, 3, 0.2, rng);
  TensorD b(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) b[i] = a[i] != 0.0 ? a[i] * 0.5 + 0.3 : 0.0;
  auto op = make_op<double>({1.0, -0.4, 0.2});
  TensorD mix(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) mix[i] = 2.0 * a[i] - 3.0 * b[i];
  // Guard: keep the support identical.
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != 0.0 && mix[i] == 0.0) mix[i] = 1e-3;
  auto da = diffuse(a, op), db = diffuse(b, op), dm = diffuse(mix, op);
  auto oracle = diffusion_oracle(mix, {1.0, -0.4, 0.2});
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(dm.output[i] == doctest::Approx(oracle.value[i]).epsilon(1e-9));
  }
  TensorD exact(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) exact[i] = 2.0 * a[i] - 3.0 * b[i];
  bool same_support = true;
  for (std::size_t i = 0; i < a.size(); ++i) same_support &= (exact[i] != 0.0) == (a[i] != 0.0);
  if (same_support) {
    auto de = diffuse(exact, op);
    for (std::size_t i = 0; i < a.size(); ++i)
      CHECK(de.output[i] == doctest::Approx(2.0 * da.output[i] - 3.0 * db.output[i]).epsilon(1e-9));
  }
}

TEST_CASE("diffuse_backward examples") {
  DiffusionOperator<double> op(3);
  TensorD x(8, 8, 2);
  x.at(4, 4, 0) = 1.0;
  auto g0 = diffuse_backward(TensorD(8, 8, 2), x, op);
  for (double v : g0.weights) CHECK(v == 0.0);
  for (double v : g0.input.values()) CHECK(v == 0.0);

  DiffusionOperator<double> op1(1);
  TensorD single(7, 7, 1);
  single.at(3, 3) = 1.0;
  auto g = diffuse_backward(TensorD(7, 7, 1, 1.0), single, op1);
  CHECK(g.weights[0] == 9.0);
}

TEST_CASE("diffuse_backward matches central differences for n in 1..8") {
  std::mt19937_64 rng(2024);
  for (int n = 1; n <= 8; ++n) {
    CAPTURE(n);
    auto w = graded_weights(n, rng);
    auto op = make_op<double>(w);
    TensorD sparse = sparse_map(16, 16, 4, 0.1, rng);
    TensorD r = random_tensor<double>(16, 16, 4, rng);
    auto g = diffuse_backward(r, sparse, op);
    for (int i = 0; i < n; ++i) op.weights[i].grad[0] = g.weights[i];
    auto f = [&] { return probe(diffuse(sparse, op).output, r); };
    for (int i = 0; i < n; ++i) {
      const double step = 1e-6 * std::max(1.0, std::abs(w[i]));
      CHECK(grad_check<double>(f, op.weights[i], step).max_relative_error < 1e-3);
    }
    // Dense input keeps the support fixed under perturbation.
    TensorD dense = random_tensor<double>(16, 16, 4, rng, 0.1, 1.0);
    auto gd = diffuse_backward(r, dense, op);
    auto fd = [&] { return probe(diffuse(dense, op).output, r); };
    CHECK(grad_check<double>(fd, dense, gd.input, 1e-6).max_relative_error < 1e-3);
  }
}

TEST_CASE("fuse examples") {
  Tensor side(32, 32, 4);
  std::mt19937_64 rng(5);
  Tensor backbone = random_tensor<float>(8, 8, 8, rng);
  Tensor f = fuse(side, backbone);
  REQUIRE(f.shape() == Shape{8, 8, 12});
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x)
      for (int c = 0; c < 12; ++c) CHECK(f.at(y, x, c) == (c < 8 ? backbone.at(y, x, c) : 0.0F));

  Tensor big(80, 80, 2, 0.75F);
  Tensor f80 = fuse(big, Tensor(20, 20, 3));
  REQUIRE(f80.shape() == Shape{20, 20, 5});
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x) CHECK(f80.at(y, x, 4) == 0.75F);

  CHECK_THROWS_AS(fuse(big, Tensor(19, 20, 3)), ConfigError);
}

TEST_CASE("fuse keeps unreachable cells zero") {
  Tensor side(64, 64, 3);
  side.at(5, 5, 1) = 1.0F;
  DiffusionOperator<float> op(2);
  auto d = diffuse(side, op);
  Tensor f = fuse(d.output, Tensor(16, 16, 2));
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      // Pool window rows 4y-1..4y+4 must meet the 5x5 support around (5, 5).
      const bool reach = 4 * y - 1 <= 7 && 4 * y + 4 >= 3 && 4 * x - 1 <= 7 && 4 * x + 4 >= 3;
      if (!reach)
        for (int c = 2; c < 5; ++c) CHECK(f.at(y, x, c) == 0.0F);
    }
}

TEST_CASE("multiscale views") {
  std::mt19937_64 rng(9);
  Tensor x = sparse_map(8, 8, 3, 0.3, rng).cast<float>();
  auto v = multiscale_views(x, {1.0});
  CHECK(v[0].bitwise_equal(x));

  Tensor m(4, 4, 2);
  m.at(0, 0, 0) = 1.0F;
  m.at(1, 1, 1) = 1.0F;
  auto half = multiscale_views(m, {0.5});
  REQUIRE(half[0].shape() == Shape{2, 2, 2});
  CHECK(half[0].at(0, 0, 0) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(half[0].at(0, 0, 1) == doctest::Approx(1.0 / std::sqrt(2.0)));
  CHECK(half[0].at(1, 1, 0) == 0.0F);

  auto zeros = multiscale_views(Tensor(8, 8, 2), {1.0, 0.5, 0.25});
  REQUIRE(zeros.size() == 3);
  CHECK(zeros[2].shape() == Shape{2, 2, 2});
  for (const auto& z : zeros)
    for (float val : z.values()) CHECK(val == 0.0F);

  CHECK_THROWS_AS(multiscale_views(Tensor(2, 2, 1), {0.25}), ConfigError);
  CHECK_THROWS_AS(multiscale_views(Tensor(2, 2, 1), {0.0}), ConfigError);
}

TEST_CASE("annotation records round-trip through line-delimited text") {
  AnnotationSet set(20, 30, 3);
  set.items.push_back(Annotation::stroke(2, {{1, 2}, {5, 9}, {10, 3}}, 4.5F));
  set.items.push_back(Annotation::point({1.0F, 2.0F, 2.0F}, {19, 29}));
  AnnotationSet back = annotations_from_jsonl(to_jsonl(set), 20, 30, 3);
  CHECK(back.items == set.items);

  auto tmp = std::filesystem::temp_directory_path() / "sinf_ann_test.jsonl";
  write_annotations(tmp, set);
  CHECK(read_annotations(tmp, 20, 30, 3).items == set.items);
  std::filesystem::remove(tmp);
}

TEST_CASE("annotation parse errors name the field path") {
  auto path_of = [](const std::string& text) -> std::string {
    try {
      annotations_from_jsonl(text, 10, 10, 3);
    } catch (const AnnotationError& e) {
      return e.path();
    }
    return "";
  };
  CHECK(path_of(R"({"kind":"stroke","class_id":1,"points":[[1,1]],"width":2})"
                "\n"
                R"({"kind":"stroke","class_id":5,"points":[[1,1]],"width":2})") == "annotations[1].class_id");
  CHECK(path_of(R"({"kind":"stroke","class_id":1,"points":[[1,1],[3,12]],"width":2})") ==
        "annotations[0].points[1]");
  CHECK(path_of(R"({"kind":"blob","points":[[1,1]]})") == "annotations[0].kind");
  CHECK(path_of(R"({"kind":"stroke","class_id":1,"points":[[1,1]],"width":0.5})") == "annotations[0].width");
}

TEST_CASE("crop and flips") {
  AnnotationSet set(20, 20, 2);
  set.items.push_back(Annotation::stroke(1, {{2, 2}, {2, 17}}, 3));
  set.items.push_back(Annotation::point({1, 0}, {12, 12}));
  AnnotationSet c = crop_annotations(set, 0, 10, 10, 10);
  REQUIRE(c.items.size() == 1);
  CHECK(c.items[0].points.front() == PixelCoord{2, 0});
  CHECK(c.items[0].points.back() == PixelCoord{2, 7});
  c.validate();

  AnnotationSet h2 = flip_annotations_horizontal(flip_annotations_horizontal(set));
  CHECK(h2.items == set.items);
  AnnotationSet v = flip_annotations_vertical(set);
  CHECK(v.items[1].points[0] == PixelCoord{7, 12});

  // A stroke leaving and re-entering the window splits in two.
  AnnotationSet zig(20, 20, 2);
  zig.items.push_back(Annotation::stroke(0, {{2, 2}, {2, 15}, {5, 15}, {5, 2}}, 1));
  AnnotationSet zc = crop_annotations(zig, 0, 0, 10, 10);
  CHECK(zc.items.size() == 2);
}
