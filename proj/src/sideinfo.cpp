#include "sinf/sideinfo.hpp"

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

namespace sinet::side {

nn::Tensor rasterize(const AnnotationSet& annotations) {
  annotations.validate();
  const int h = annotations.height, w = annotations.width, c = annotations.raw_channels;
  nn::TensorD sum(h, w, c);
  std::vector<int> count(static_cast<std::size_t>(h) * w, 0);
  for (const auto& a : annotations.items) {
    if (a.kind == AnnotationKind::kPoint) {
      const auto& p = a.points[0];
      double* s = sum.pixel(p.row, p.col);
      for (int ch = 0; ch < c; ++ch) s[ch] += a.feature[ch];
      ++count[static_cast<std::size_t>(p.row) * w + p.col];
      continue;
    }
    for (const auto& p : stroke_pixels(a, h, w)) {
      sum.at(p.row, p.col, a.class_id) += 1.0;
      ++count[static_cast<std::size_t>(p.row) * w + p.col];
    }
  }
  nn::Tensor out(h, w, c);
  for (std::size_t p = 0; p < count.size(); ++p) {
    if (count[p] == 0) continue;
    for (int ch = 0; ch < c; ++ch) {
      out[p * c + ch] = static_cast<float>(sum[p * c + ch] / count[p]);
    }
  }
  return out;
}

template <typename T>
EmbeddingLayer<T>::EmbeddingLayer(int raw_channels, int d)
    : fc("side.embed", raw_channels, d, nn::ParamGroup::kEmbedding) {}

namespace {

template <typename T>
bool is_zero_pixel(const T* x, int c) {
  for (int ch = 0; ch < c; ++ch) {
    if (x[ch] != T(0)) return false;
  }
  return true;
}

}  // namespace

template <typename T>
BasicTensor<T> embed(const BasicTensor<T>& raw, const EmbeddingLayer<T>& layer, EmbedCache<T>* cache) {
  const int m = layer.raw_channels();
  const int d = layer.d();
  if (raw.c() != m) {
    throw ConfigError(fmt::format("embed: raw map has {} channels, layer expects {}", raw.c(), m));
  }
  BasicTensor<T> out(raw.h(), raw.w(), d);
  const std::size_t pixels = static_cast<std::size_t>(raw.h()) * raw.w();
  std::vector<double> norms(pixels, 0.0);
  std::vector<double> v(d);
  const T* wt = layer.fc.weight.value.data();
  const T* b = layer.fc.bias.value.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = raw.data() + p * m;
    if (is_zero_pixel(x, m)) continue;
    for (int j = 0; j < d; ++j) v[j] = b[j];
    for (int i = 0; i < m; ++i) {
      for (int j = 0; j < d; ++j) v[j] += static_cast<double>(x[i]) * wt[static_cast<std::size_t>(i) * d + j];
    }
    double norm = 0.0;
    for (int j = 0; j < d; ++j) norm += v[j] * v[j];
    norm = std::sqrt(norm);
    if (!(norm > 0.0)) continue;
    norms[p] = norm;
    T* o = out.data() + p * d;
    for (int j = 0; j < d; ++j) o[j] = static_cast<T>(v[j] / norm);
  }
  if (cache) {
    cache->output = out;
    cache->norms = std::move(norms);
  }
  return out;
}

template <typename T>
void embed_backward(const BasicTensor<T>& raw, const EmbedCache<T>& cache, EmbeddingLayer<T>& layer,
                    const BasicTensor<T>& grad_out) {
  const int m = layer.raw_channels();
  const int d = layer.d();
  if (!(grad_out.shape() == cache.output.shape())) {
    throw ConfigError(fmt::format("embed backward: grad {} vs output {}", grad_out.shape().str(),
                                  cache.output.shape().str()));
  }
  T* gw = layer.fc.weight.grad.data();
  T* gb = layer.fc.bias.grad.data();
  std::vector<double> gv(d);
  const std::size_t pixels = static_cast<std::size_t>(raw.h()) * raw.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    const double norm = cache.norms[p];
    if (norm == 0.0) continue;
    const T* y = cache.output.data() + p * d;
    const T* g = grad_out.data() + p * d;
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(y[j]) * g[j];
    for (int j = 0; j < d; ++j) gv[j] = (g[j] - y[j] * dot) / norm;
    const T* x = raw.data() + p * m;
    for (int j = 0; j < d; ++j) gb[j] += static_cast<T>(gv[j]);
    for (int i = 0; i < m; ++i) {
      if (x[i] == T(0)) continue;
      for (int j = 0; j < d; ++j) gw[static_cast<std::size_t>(i) * d + j] += static_cast<T>(x[i] * gv[j]);
    }
  }
}

template <typename T>
DiffusionOperator<T>::DiffusionOperator(int passes, DiffusionInit init) {
  if (passes < 1) throw ConfigError(fmt::format("diffusion needs at least one pass, got {}", passes));
  for (int i = 0; i < passes; ++i) {
    weights.emplace_back(fmt::format("side.diffusion.w{}", i + 1), nn::Shape{1, 1, 1}, nn::ParamGroup::kFusion);
  }
  reset(init);
}

template <typename T>
void DiffusionOperator<T>::reset(DiffusionInit init) {
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const bool on = init == DiffusionInit::kOnes || i == 0;
    weights[i].value[0] = on ? T(1) : T(0);
  }
}

nn::TensorD box_sum3(const nn::TensorD& x) {
  const int h = x.h(), w = x.w(), c = x.c();
  nn::TensorD rows(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      double* o = rows.pixel(y, xx);
      for (int dx = -1; dx <= 1; ++dx) {
        const int sx = xx + dx;
        if (sx < 0 || sx >= w) continue;
        const double* s = x.pixel(y, sx);
        for (int ch = 0; ch < c; ++ch) o[ch] += s[ch];
      }
    }
  }
  nn::TensorD out(h, w, c);
  for (int y = 0; y < h; ++y) {
    for (int dy = -1; dy <= 1; ++dy) {
      const int sy = y + dy;
      if (sy < 0 || sy >= h) continue;
      const double* s = rows.pixel(sy, 0);
      double* o = out.pixel(y, 0);
      for (std::size_t i = 0; i < static_cast<std::size_t>(w) * c; ++i) o[i] += s[i];
    }
  }
  return out;
}

namespace {

// Chebyshev dilation of a binary mask by one pixel.
std::vector<std::uint8_t> dilate1(const std::vector<std::uint8_t>& mask, int h, int w) {
  std::vector<std::uint8_t> out(mask.size(), 0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!mask[static_cast<std::size_t>(y) * w + x]) continue;
      for (int dy = -1; dy <= 1; ++dy) {
        const int yy = y + dy;
        if (yy < 0 || yy >= h) continue;
        for (int dx = -1; dx <= 1; ++dx) {
          const int xx = x + dx;
          if (xx < 0 || xx >= w) continue;
          out[static_cast<std::size_t>(yy) * w + xx] = 1;
        }
      }
    }
  }
  return out;
}

template <typename T>
CoverageMap coverage_of(const BasicTensor<T>& x, int passes) {
  const int h = x.h(), w = x.w(), c = x.c();
  std::vector<std::uint8_t> support(static_cast<std::size_t>(h) * w, 0);
  for (std::size_t p = 0; p < support.size(); ++p) support[p] = is_zero_pixel(x.data() + p * c, c) ? 0 : 1;
  CoverageMap cov{h, w, std::vector<int>(support.size(), 0)};
  for (int i = 0; i < passes; ++i) {
    support = dilate1(support, h, w);
    for (std::size_t p = 0; p < support.size(); ++p) cov.counts[p] += support[p];
  }
  return cov;
}

}  // namespace

template <typename T>
DiffusionResult<T> diffuse(const BasicTensor<T>& x, const DiffusionOperator<T>& op) {
  const int n = op.passes();
  if (n < 1) throw ConfigError("diffuse: operator has no passes");
  DiffusionResult<T> r;
  r.coverage = coverage_of(x, n);
  nn::TensorD cur = x.template cast<double>();
  nn::TensorD acc(x.shape());
  for (int i = 0; i < n; ++i) {
    cur = box_sum3(cur);
    const double wi = op.weights[i].value[0];
    for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += wi * cur[k];
  }
  r.output = BasicTensor<T>(x.shape());
  const int c = x.c();
  for (std::size_t p = 0; p < r.coverage.counts.size(); ++p) {
    const double norm = std::max(r.coverage.counts[p], 1);
    for (int ch = 0; ch < c; ++ch) r.output[p * c + ch] = static_cast<T>(acc[p * c + ch] / norm);
  }
  return r;
}

template <typename T>
DiffusionGrads<T> diffuse_backward(const BasicTensor<T>& upstream, const BasicTensor<T>& x,
                                   const DiffusionOperator<T>& op) {
  if (!(upstream.shape() == x.shape())) {
    throw ConfigError(fmt::format("diffuse backward: grad {} vs input {}", upstream.shape().str(), x.shape().str()));
  }
  const int n = op.passes();
  const int c = x.c();
  const CoverageMap cov = coverage_of(x, n);
  nn::TensorD scaled(x.shape());
  for (std::size_t p = 0; p < cov.counts.size(); ++p) {
    const double norm = std::max(cov.counts[p], 1);
    for (int ch = 0; ch < c; ++ch) scaled[p * c + ch] = upstream[p * c + ch] / norm;
  }
  DiffusionGrads<T> g;
  g.weights.assign(n, 0.0);
  nn::TensorD fwd = x.template cast<double>();
  nn::TensorD back = scaled;
  nn::TensorD gx(x.shape());
  // The zero-padded ones kernel is self-adjoint, so the transpose chain is
  // the same box sum applied to the scaled upstream gradient.
  for (int i = 0; i < n; ++i) {
    fwd = box_sum3(fwd);
    back = box_sum3(back);
    double dot = 0.0;
    for (std::size_t k = 0; k < fwd.size(); ++k) dot += scaled[k] * fwd[k];
    g.weights[i] = dot;
    const double wi = op.weights[i].value[0];
    for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += wi * back[k];
  }
  g.input = gx.template cast<T>();
  return g;
}

template <typename T>
BasicTensor<T> fuse(const BasicTensor<T>& side, const BasicTensor<T>& backbone, FuseCache* cache) {
  nn::PoolIndex index;
  BasicTensor<T> pooled = nn::maxpool(side, kFusePoolKernel, kFusePoolStride, kFusePoolPadding, &index);
  if (pooled.h() != backbone.h() || pooled.w() != backbone.w()) {
    throw ConfigError(fmt::format("fuse: pooled side map {} does not match backbone grid {}",
                                  pooled.shape().str(), backbone.shape().str()));
  }
  if (cache) {
    cache->pool = std::move(index);
    cache->backbone_channels = backbone.c();
  }
  return nn::concat_channels(backbone, pooled);
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> fuse_backward(const FuseCache& cache, const BasicTensor<T>& grad) {
  auto [g_backbone, g_pooled] = nn::split_channels(grad, cache.backbone_channels);
  return {std::move(g_backbone), nn::maxpool_backward(cache.pool, g_pooled)};
}

std::vector<nn::Tensor> multiscale_views(const nn::Tensor& x, const std::vector<double>& scales) {
  std::vector<nn::Tensor> views;
  const int c = x.c();
  for (double s : scales) {
    if (!(s > 0.0 && s <= 1.0)) throw ConfigError(fmt::format("multiscale: scale {} not in (0, 1]", s));
    const int th = static_cast<int>(std::floor(x.h() * s));
    const int tw = static_cast<int>(std::floor(x.w() * s));
    if (th < 1 || tw < 1) {
      throw ConfigError(fmt::format("multiscale: scale {} maps {}x{} to an empty map", s, x.h(), x.w()));
    }
    nn::TensorD sum(th, tw, c);
    std::vector<int> count(static_cast<std::size_t>(th) * tw, 0);
    std::vector<std::size_t> first(count.size(), 0);
    for (int y = 0; y < x.h(); ++y) {
      const int ty = static_cast<int>(static_cast<long long>(y) * th / x.h());
      for (int xx = 0; xx < x.w(); ++xx) {
        const float* v = x.pixel(y, xx);
        if (is_zero_pixel(v, c)) continue;
        const int tx = static_cast<int>(static_cast<long long>(xx) * tw / x.w());
        const std::size_t cell = static_cast<std::size_t>(ty) * tw + tx;
        if (count[cell] == 0) first[cell] = x.index(y, xx, 0);
        ++count[cell];
        double* s2 = sum.pixel(ty, tx);
        for (int ch = 0; ch < c; ++ch) s2[ch] += v[ch];
      }
    }
    nn::Tensor view(th, tw, c);
    for (std::size_t cell = 0; cell < count.size(); ++cell) {
      if (count[cell] == 0) continue;
      float* o = view.data() + cell * c;
      if (count[cell] == 1) {
        std::copy(x.data() + first[cell], x.data() + first[cell] + c, o);
        continue;
      }
      double norm = 0.0;
      for (int ch = 0; ch < c; ++ch) norm += sum[cell * c + ch] * sum[cell * c + ch];
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (int ch = 0; ch < c; ++ch) o[ch] = static_cast<float>(sum[cell * c + ch] / norm);
    }
    views.push_back(std::move(view));
  }
  return views;
}

#define SINF_INSTANTIATE_SIDE(T)                                                                        \
  template struct EmbeddingLayer<T>;                                                                    \
  template struct DiffusionOperator<T>;                                                                 \
  template BasicTensor<T> embed(const BasicTensor<T>&, const EmbeddingLayer<T>&, EmbedCache<T>*);      \
  template void embed_backward(const BasicTensor<T>&, const EmbedCache<T>&, EmbeddingLayer<T>&,        \
                               const BasicTensor<T>&);                                                  \
  template DiffusionResult<T> diffuse(const BasicTensor<T>&, const DiffusionOperator<T>&);             \
  template DiffusionGrads<T> diffuse_backward(const BasicTensor<T>&, const BasicTensor<T>&,            \
                                              const DiffusionOperator<T>&);                             \
  template BasicTensor<T> fuse(const BasicTensor<T>&, const BasicTensor<T>&, FuseCache*);              \
  template std::pair<BasicTensor<T>, BasicTensor<T>> fuse_backward(const FuseCache&, const BasicTensor<T>&);

SINF_INSTANTIATE_SIDE(float)
SINF_INSTANTIATE_SIDE(double)

#undef SINF_INSTANTIATE_SIDE

}  // namespace sinet::side
