#include "sinf/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <fmt/format.h>

namespace sinet::nn {

template <typename T>
ConvLayer<T>::ConvLayer(const std::string& name, const LayerSpec& layer_spec, ParamGroup group)
    : spec(layer_spec),
      weight(name + ".weight",
             Shape{layer_spec.kernel * layer_spec.kernel * layer_spec.in_channels, layer_spec.out_channels, 1},
             group),
      bias(name + ".bias", Shape{1, layer_spec.out_channels, 1}, group) {}

template <typename T>
AffineLayer<T>::AffineLayer(const std::string& name, int in, int out, ParamGroup group)
    : in_features(in),
      out_features(out),
      weight(name + ".weight", Shape{in, out, 1}, group),
      bias(name + ".bias", Shape{1, out, 1}, group) {}

template <typename T>
BatchNormLayer<T>::BatchNormLayer(const std::string& name, int ch, ParamGroup group)
    : channels(ch),
      gamma(name + ".gamma", Shape{1, ch, 1}, group),
      beta(name + ".beta", Shape{1, ch, 1}, group),
      running_mean(1, ch, 1, T(0)),
      running_var(1, ch, 1, T(1)) {
  gamma.value.fill(T(1));
}

template <typename T>
void init_uniform_fan_in(BasicParam<T>& weight, int fan_in, std::mt19937_64& rng) {
  const double bound = std::sqrt(6.0 / std::max(1, fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& v : weight.value.values()) v = static_cast<T>(dist(rng));
}

namespace {

// Builds the (P x K) patch matrix for a convolution; P = output pixels.
template <typename T>
std::vector<T> im2col(const BasicTensor<T>& in, const LayerSpec& s, int oh, int ow) {
  const int k = s.kernel;
  const int cin = in.c();
  const std::size_t kdim = static_cast<std::size_t>(k) * k * cin;
  std::vector<T> cols(static_cast<std::size_t>(oh) * ow * kdim, T(0));
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      T* row = cols.data() + (static_cast<std::size_t>(oy) * ow + ox) * kdim;
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.padding + ky * s.dilation;
        if (iy < 0 || iy >= in.h()) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.padding + kx * s.dilation;
          if (ix < 0 || ix >= in.w()) continue;
          const T* src = in.pixel(iy, ix);
          std::copy(src, src + cin, row + (static_cast<std::size_t>(ky) * k + kx) * cin);
        }
      }
    }
  }
  return cols;
}

template <typename T>
void check_conv(const BasicTensor<T>& input, const ConvLayer<T>& layer) {
  layer.spec.validate(input.shape());
  const int kdim = layer.spec.kernel * layer.spec.kernel * layer.spec.in_channels;
  if (layer.weight.value.rows() != kdim || layer.weight.value.cols() != layer.spec.out_channels) {
    throw ConfigError(fmt::format("conv weight shape {} does not match spec ({}x{})",
                                  layer.weight.value.shape().str(), kdim, layer.spec.out_channels));
  }
}

}  // namespace

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const ConvLayer<T>& layer) {
  check_conv(input, layer);
  const LayerSpec& s = layer.spec;
  const int oh = s.out_extent(input.h());
  const int ow = s.out_extent(input.w());
  const int n = s.out_channels;
  const std::size_t kdim = static_cast<std::size_t>(s.kernel) * s.kernel * s.in_channels;
  const std::vector<T> cols = im2col(input, s, oh, ow);
  const T* wt = layer.weight.value.data();
  const T* b = layer.bias.value.data();

  BasicTensor<T> out(oh, ow, n);
  const std::size_t pixels = static_cast<std::size_t>(oh) * ow;
  for (std::size_t p = 0; p < pixels; ++p) {
    T* o = out.data() + p * n;
    std::copy(b, b + n, o);
    const T* row = cols.data() + p * kdim;
    for (std::size_t k = 0; k < kdim; ++k) {
      const T a = row[k];
      const T* wrow = wt + k * n;
      for (int j = 0; j < n; ++j) o[j] += a * wrow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> conv2d_backward(const BasicTensor<T>& input, ConvLayer<T>& layer,
                               const BasicTensor<T>& grad_out, bool want_input_grad) {
  check_conv(input, layer);
  const LayerSpec& s = layer.spec;
  const int oh = s.out_extent(input.h());
  const int ow = s.out_extent(input.w());
  const int n = s.out_channels;
  if (!(grad_out.shape() == Shape{oh, ow, n})) {
    throw ConfigError(fmt::format("conv backward: grad shape {} expected {}x{}x{}",
                                  grad_out.shape().str(), oh, ow, n));
  }
  const std::size_t kdim = static_cast<std::size_t>(s.kernel) * s.kernel * s.in_channels;
  const std::size_t pixels = static_cast<std::size_t>(oh) * ow;
  const std::vector<T> cols = im2col(input, s, oh, ow);

  T* gw = layer.weight.grad.data();
  T* gb = layer.bias.grad.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* g = grad_out.data() + p * n;
    for (int j = 0; j < n; ++j) gb[j] += g[j];
    const T* row = cols.data() + p * kdim;
    for (std::size_t k = 0; k < kdim; ++k) {
      const T a = row[k];
      T* gwrow = gw + k * n;
      for (int j = 0; j < n; ++j) gwrow[j] += a * g[j];
    }
  }
  if (!want_input_grad) return {};

  BasicTensor<T> grad_in(input.shape());
  const T* wt = layer.weight.value.data();
  const int k = s.kernel;
  const int cin = s.in_channels;
  std::vector<T> gcol(kdim);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const T* g = grad_out.data() + (static_cast<std::size_t>(oy) * ow + ox) * n;
      for (std::size_t kk = 0; kk < kdim; ++kk) {
        const T* wrow = wt + kk * n;
        T acc = T(0);
        for (int j = 0; j < n; ++j) acc += g[j] * wrow[j];
        gcol[kk] = acc;
      }
      for (int ky = 0; ky < k; ++ky) {
        const int iy = oy * s.stride - s.padding + ky * s.dilation;
        if (iy < 0 || iy >= input.h()) continue;
        for (int kx = 0; kx < k; ++kx) {
          const int ix = ox * s.stride - s.padding + kx * s.dilation;
          if (ix < 0 || ix >= input.w()) continue;
          T* dst = grad_in.pixel(iy, ix);
          const T* src = gcol.data() + (static_cast<std::size_t>(ky) * k + kx) * cin;
          for (int c = 0; c < cin; ++c) dst[c] += src[c];
        }
      }
    }
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> maxpool(const BasicTensor<T>& input, int kernel, int stride, int padding, PoolIndex* index) {
  if (kernel < 1 || stride < 1 || padding < 0) {
    throw ConfigError(fmt::format("maxpool: invalid kernel={} stride={} padding={}", kernel, stride, padding));
  }
  if (input.h() < kernel || input.w() < kernel) {
    throw ConfigError(fmt::format("maxpool: input {}x{} smaller than kernel {}", input.h(), input.w(), kernel));
  }
  LayerSpec s;
  s.kind = LayerKind::kMaxPool;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  const int oh = s.out_extent(input.h());
  const int ow = s.out_extent(input.w());
  const int c = input.c();
  BasicTensor<T> out(oh, ow, c);
  if (index) {
    index->input_shape = input.shape();
    index->argmax.assign(out.size(), -1);
  }
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      for (int ch = 0; ch < c; ++ch) {
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t best_idx = -1;
        for (int ky = 0; ky < kernel; ++ky) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= input.h()) continue;
          for (int kx = 0; kx < kernel; ++kx) {
            const int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= input.w()) continue;
            const T v = input.at(iy, ix, ch);
            if (best_idx < 0 || v > best) {
              best = v;
              best_idx = static_cast<std::int32_t>(input.index(iy, ix, ch));
            }
          }
        }
        out.at(oy, ox, ch) = best;
        if (index) index->argmax[out.index(oy, ox, ch)] = best_idx;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> maxpool_backward(const PoolIndex& index, const BasicTensor<T>& grad_out) {
  if (grad_out.size() != index.argmax.size()) {
    throw ConfigError("maxpool backward: gradient does not match the recorded pooling");
  }
  BasicTensor<T> grad_in(index.input_shape);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    if (index.argmax[i] >= 0) grad_in[static_cast<std::size_t>(index.argmax[i])] += grad_out[i];
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> affine(const BasicTensor<T>& input, const AffineLayer<T>& layer) {
  if (input.c() != layer.in_features) {
    throw ConfigError(fmt::format("affine: input has {} channels, layer expects {}", input.c(),
                                  layer.in_features));
  }
  const int n = layer.out_features;
  const int m = layer.in_features;
  BasicTensor<T> out(input.h(), input.w(), n);
  const T* wt = layer.weight.value.data();
  const T* b = layer.bias.value.data();
  const std::size_t pixels = static_cast<std::size_t>(input.h()) * input.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = input.data() + p * m;
    T* o = out.data() + p * n;
    std::copy(b, b + n, o);
    for (int i = 0; i < m; ++i) {
      const T a = x[i];
      const T* wrow = wt + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) o[j] += a * wrow[j];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> affine_backward(const BasicTensor<T>& input, AffineLayer<T>& layer,
                               const BasicTensor<T>& grad_out) {
  const int n = layer.out_features;
  const int m = layer.in_features;
  if (!(grad_out.shape() == Shape{input.h(), input.w(), n})) {
    throw ConfigError(fmt::format("affine backward: grad shape {}", grad_out.shape().str()));
  }
  BasicTensor<T> grad_in(input.shape());
  const T* wt = layer.weight.value.data();
  T* gw = layer.weight.grad.data();
  T* gb = layer.bias.grad.data();
  const std::size_t pixels = static_cast<std::size_t>(input.h()) * input.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = input.data() + p * m;
    const T* g = grad_out.data() + p * n;
    T* gx = grad_in.data() + p * m;
    for (int j = 0; j < n; ++j) gb[j] += g[j];
    for (int i = 0; i < m; ++i) {
      const T* wrow = wt + static_cast<std::size_t>(i) * n;
      T* gwrow = gw + static_cast<std::size_t>(i) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) {
        gwrow[j] += x[i] * g[j];
        acc += g[j] * wrow[j];
      }
      gx[i] = acc;
    }
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  return out;
}

template <typename T>
BasicTensor<T> relu_backward(const BasicTensor<T>& output, const BasicTensor<T>& grad_out) {
  BasicTensor<T> grad_in(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) grad_in[i] = output[i] > T(0) ? grad_out[i] : T(0);
  return grad_in;
}

template <typename T>
BasicTensor<T> sigmoid(const BasicTensor<T>& input) {
  BasicTensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    out[i] = static_cast<T>(1.0 / (1.0 + std::exp(-static_cast<double>(input[i]))));
  }
  return out;
}

template <typename T>
BasicTensor<T> batchnorm(const BasicTensor<T>& input, BatchNormLayer<T>& layer, bool training,
                         BatchNormCache<T>* cache) {
  const int c = input.c();
  if (c != layer.channels) {
    throw ConfigError(fmt::format("batchnorm: input has {} channels, layer expects {}", c, layer.channels));
  }
  const std::size_t pixels = static_cast<std::size_t>(input.h()) * input.w();
  if (pixels == 0) throw ConfigError("batchnorm: empty spatial extent");
  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (training) {
    std::vector<double> var(c, 0.0);
    for (std::size_t p = 0; p < pixels; ++p) {
      const T* x = input.data() + p * c;
      for (int ch = 0; ch < c; ++ch) mean[ch] += x[ch];
    }
    for (int ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
      const T* x = input.data() + p * c;
      for (int ch = 0; ch < c; ++ch) {
        const double d = x[ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    for (int ch = 0; ch < c; ++ch) {
      const double biased = var[ch] / static_cast<double>(pixels);
      const double unbiased = pixels > 1 ? var[ch] / static_cast<double>(pixels - 1) : biased;
      inv_std[ch] = 1.0 / std::sqrt(biased + layer.eps);
      layer.running_mean[ch] = static_cast<T>((1.0 - layer.momentum) * layer.running_mean[ch] + layer.momentum * mean[ch]);
      layer.running_var[ch] = static_cast<T>((1.0 - layer.momentum) * layer.running_var[ch] + layer.momentum * unbiased);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = layer.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(static_cast<double>(layer.running_var[ch]) + layer.eps);
    }
  }
  BasicTensor<T> normalized(input.shape());
  BasicTensor<T> out(input.shape());
  const T* gamma = layer.gamma.value.data();
  const T* beta = layer.beta.value.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = input.data() + p * c;
    T* xn = normalized.data() + p * c;
    T* o = out.data() + p * c;
    for (int ch = 0; ch < c; ++ch) {
      xn[ch] = static_cast<T>((x[ch] - mean[ch]) * inv_std[ch]);
      o[ch] = gamma[ch] * xn[ch] + beta[ch];
    }
  }
  if (cache) {
    cache->training = training;
    cache->mean = std::move(mean);
    cache->inv_std = std::move(inv_std);
    cache->normalized = std::move(normalized);
  }
  return out;
}

template <typename T>
BasicTensor<T> batchnorm_backward(const BatchNormCache<T>& cache, BatchNormLayer<T>& layer,
                                  const BasicTensor<T>& grad_out) {
  const BasicTensor<T>& xn = cache.normalized;
  if (!(grad_out.shape() == xn.shape())) {
    throw ConfigError(fmt::format("batchnorm backward: grad shape {} vs {}", grad_out.shape().str(),
                                  xn.shape().str()));
  }
  const int c = xn.c();
  const std::size_t pixels = static_cast<std::size_t>(xn.h()) * xn.w();
  std::vector<double> sum_g(c, 0.0), sum_gx(c, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* g = grad_out.data() + p * c;
    const T* x = xn.data() + p * c;
    for (int ch = 0; ch < c; ++ch) {
      sum_g[ch] += g[ch];
      sum_gx[ch] += static_cast<double>(g[ch]) * x[ch];
    }
  }
  T* ggamma = layer.gamma.grad.data();
  T* gbeta = layer.beta.grad.data();
  for (int ch = 0; ch < c; ++ch) {
    ggamma[ch] += static_cast<T>(sum_gx[ch]);
    gbeta[ch] += static_cast<T>(sum_g[ch]);
  }
  const T* gamma = layer.gamma.value.data();
  BasicTensor<T> grad_in(xn.shape());
  const double inv_n = 1.0 / static_cast<double>(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* g = grad_out.data() + p * c;
    const T* x = xn.data() + p * c;
    T* gi = grad_in.data() + p * c;
    for (int ch = 0; ch < c; ++ch) {
      const double scale = static_cast<double>(gamma[ch]) * cache.inv_std[ch];
      if (cache.training) {
        gi[ch] = static_cast<T>(scale * (g[ch] - inv_n * sum_g[ch] - x[ch] * inv_n * sum_gx[ch]));
      } else {
        gi[ch] = static_cast<T>(scale * g[ch]);
      }
    }
  }
  return grad_in;
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  BasicTensor<T> out(logits.shape());
  const int c = logits.c();
  const std::size_t pixels = static_cast<std::size_t>(logits.h()) * logits.w();
  std::vector<double> e(c);
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = logits.data() + p * c;
    double m = x[0];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, static_cast<double>(x[ch]));
    double sum = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      e[ch] = std::exp(x[ch] - m);
      sum += e[ch];
    }
    T* o = out.data() + p * c;
    for (int ch = 0; ch < c; ++ch) o[ch] = static_cast<T>(e[ch] / sum);
  }
  return out;
}

template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, const LabelMap& labels,
                                            std::uint8_t ignore_index) {
  if (labels.h != logits.h() || labels.w != logits.w()) {
    throw ConfigError(fmt::format("cross entropy: logits {} vs labels {}x{}", logits.shape().str(),
                                  labels.h, labels.w));
  }
  const int c = logits.c();
  const std::size_t pixels = static_cast<std::size_t>(logits.h()) * logits.w();
  CrossEntropyResult<T> r;
  r.grad = BasicTensor<T>(logits.shape());
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::uint8_t y = labels.data[p];
    if (y == ignore_index) continue;
    if (y >= c) {
      throw ConfigError(fmt::format("cross entropy: label {} out of range for {} classes", int(y), c));
    }
    ++r.counted;
  }
  if (r.counted == 0) {
    r.all_ignored = true;
    return r;
  }
  const double inv = 1.0 / static_cast<double>(r.counted);
  std::vector<double> e(c);
  double total = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::uint8_t y = labels.data[p];
    if (y == ignore_index) continue;
    const T* x = logits.data() + p * c;
    double m = x[0];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, static_cast<double>(x[ch]));
    double sum = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      e[ch] = std::exp(x[ch] - m);
      sum += e[ch];
    }
    total += std::log(sum) - (x[y] - m);
    T* g = r.grad.data() + p * c;
    for (int ch = 0; ch < c; ++ch) {
      const double prob = e[ch] / sum;
      g[ch] = static_cast<T>((prob - (ch == y ? 1.0 : 0.0)) * inv);
    }
  }
  r.loss = total * inv;
  return r;
}

namespace {

struct BilinearTap {
  int i0 = 0;
  int i1 = 0;
  double frac = 0.0;
};

std::vector<BilinearTap> bilinear_taps(int in, int factor) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(in) * factor);
  for (int o = 0; o < in * factor; ++o) {
    double src = (o + 0.5) / factor - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}

}  // namespace

template <typename T>
BasicTensor<T> upsample_bilinear(const BasicTensor<T>& input, int factor) {
  if (factor < 1) throw ConfigError("upsample: factor must be >= 1");
  const auto ty = bilinear_taps(input.h(), factor);
  const auto tx = bilinear_taps(input.w(), factor);
  const int c = input.c();
  BasicTensor<T> out(input.h() * factor, input.w() * factor, c);
  for (int oy = 0; oy < out.h(); ++oy) {
    const auto& a = ty[oy];
    for (int ox = 0; ox < out.w(); ++ox) {
      const auto& b = tx[ox];
      const T* p00 = input.pixel(a.i0, b.i0);
      const T* p01 = input.pixel(a.i0, b.i1);
      const T* p10 = input.pixel(a.i1, b.i0);
      const T* p11 = input.pixel(a.i1, b.i1);
      const double w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
      T* o = out.pixel(oy, ox);
      for (int ch = 0; ch < c; ++ch) {
        o[ch] = static_cast<T>(w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch]);
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>& grad_out, const Shape& input_shape, int factor) {
  if (!(grad_out.shape() == Shape{input_shape.h * factor, input_shape.w * factor, input_shape.c})) {
    throw ConfigError(fmt::format("upsample backward: grad {} for input {} x{}", grad_out.shape().str(),
                                  input_shape.str(), factor));
  }
  const auto ty = bilinear_taps(input_shape.h, factor);
  const auto tx = bilinear_taps(input_shape.w, factor);
  const int c = input_shape.c;
  BasicTensor<double> acc(input_shape);
  for (int oy = 0; oy < grad_out.h(); ++oy) {
    const auto& a = ty[oy];
    for (int ox = 0; ox < grad_out.w(); ++ox) {
      const auto& b = tx[ox];
      const double w00 = (1 - a.frac) * (1 - b.frac), w01 = (1 - a.frac) * b.frac;
      const double w10 = a.frac * (1 - b.frac), w11 = a.frac * b.frac;
      const T* g = grad_out.pixel(oy, ox);
      double* p00 = acc.pixel(a.i0, b.i0);
      double* p01 = acc.pixel(a.i0, b.i1);
      double* p10 = acc.pixel(a.i1, b.i0);
      double* p11 = acc.pixel(a.i1, b.i1);
      for (int ch = 0; ch < c; ++ch) {
        p00[ch] += w00 * g[ch];
        p01[ch] += w01 * g[ch];
        p10[ch] += w10 * g[ch];
        p11[ch] += w11 * g[ch];
      }
    }
  }
  return acc.template cast<T>();
}

template <typename T>
BasicTensor<T> concat_channels(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.h() != b.h() || a.w() != b.w()) {
    throw ConfigError(fmt::format("concat: spatial mismatch {} vs {}", a.shape().str(), b.shape().str()));
  }
  BasicTensor<T> out(a.h(), a.w(), a.c() + b.c());
  const std::size_t pixels = static_cast<std::size_t>(a.h()) * a.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    T* o = out.data() + p * out.c();
    std::copy(a.data() + p * a.c(), a.data() + (p + 1) * a.c(), o);
    std::copy(b.data() + p * b.c(), b.data() + (p + 1) * b.c(), o + a.c());
  }
  return out;
}

template <typename T>
std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>& grad, int a_channels) {
  const int bc = grad.c() - a_channels;
  if (a_channels < 0 || bc < 0) throw ConfigError("split_channels: bad channel split");
  BasicTensor<T> a(grad.h(), grad.w(), a_channels);
  BasicTensor<T> b(grad.h(), grad.w(), bc);
  const std::size_t pixels = static_cast<std::size_t>(grad.h()) * grad.w();
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* g = grad.data() + p * grad.c();
    std::copy(g, g + a_channels, a.data() + p * a_channels);
    std::copy(g + a_channels, g + grad.c(), b.data() + p * bc);
  }
  return {std::move(a), std::move(b)};
}

template <typename T>
BasicTensor<T> global_mean_pool(const BasicTensor<T>& input) {
  const int c = input.c();
  const std::size_t pixels = static_cast<std::size_t>(input.h()) * input.w();
  if (pixels == 0) throw ConfigError("global_mean_pool: empty spatial extent");
  std::vector<double> acc(c, 0.0);
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* x = input.data() + p * c;
    for (int ch = 0; ch < c; ++ch) acc[ch] += x[ch];
  }
  BasicTensor<T> out(1, 1, c);
  for (int ch = 0; ch < c; ++ch) out[ch] = static_cast<T>(acc[ch] / static_cast<double>(pixels));
  return out;
}

template <typename T>
BasicTensor<T> global_mean_pool_backward(const BasicTensor<T>& grad_out, const Shape& input_shape) {
  BasicTensor<T> grad_in(input_shape);
  const std::size_t pixels = static_cast<std::size_t>(input_shape.h) * input_shape.w;
  const int c = input_shape.c;
  for (std::size_t p = 0; p < pixels; ++p) {
    T* g = grad_in.data() + p * c;
    for (int ch = 0; ch < c; ++ch) g[ch] = static_cast<T>(grad_out[ch] / static_cast<double>(pixels));
  }
  return grad_in;
}

double GroupRates::for_group(ParamGroup g) const {
  switch (g) {
    case ParamGroup::kBase:
      return base;
    case ParamGroup::kEmbedding:
      return embedding;
    case ParamGroup::kFusion:
      return fusion;
  }
  return base;
}

template <typename T>
void sgd_step(std::span<BasicParam<T>* const> params, const GroupRates& rates, double momentum) {
  for (const BasicParam<T>* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError(fmt::format("non-finite gradient in parameter '{}'", p->name));
    }
  }
  for (BasicParam<T>* p : params) {
    const T lr = static_cast<T>(rates.for_group(p->group));
    const T mu = static_cast<T>(momentum);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      p->momentum[i] = mu * p->momentum[i] + p->grad[i];
      p->value[i] -= lr * p->momentum[i];
    }
  }
}

template <typename T>
void sgd_step(std::span<BasicParam<T>* const> params, double lr, double momentum) {
  sgd_step(params, GroupRates{lr, lr, lr}, momentum);
}

#define SINF_INSTANTIATE_LAYERS(T)                                                                       \
  template struct ConvLayer<T>;                                                                          \
  template struct AffineLayer<T>;                                                                        \
  template struct BatchNormLayer<T>;                                                                     \
  template void init_uniform_fan_in(BasicParam<T>&, int, std::mt19937_64&);                              \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const ConvLayer<T>&);                           \
  template BasicTensor<T> conv2d_backward(const BasicTensor<T>&, ConvLayer<T>&, const BasicTensor<T>&,  \
                                          bool);                                                         \
  template BasicTensor<T> maxpool(const BasicTensor<T>&, int, int, int, PoolIndex*);                    \
  template BasicTensor<T> maxpool_backward(const PoolIndex&, const BasicTensor<T>&);                    \
  template BasicTensor<T> affine(const BasicTensor<T>&, const AffineLayer<T>&);                         \
  template BasicTensor<T> affine_backward(const BasicTensor<T>&, AffineLayer<T>&, const BasicTensor<T>&); \
  template BasicTensor<T> relu(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> relu_backward(const BasicTensor<T>&, const BasicTensor<T>&);                  \
  template BasicTensor<T> sigmoid(const BasicTensor<T>&);                                                \
  template BasicTensor<T> batchnorm(const BasicTensor<T>&, BatchNormLayer<T>&, bool, BatchNormCache<T>*); \
  template BasicTensor<T> batchnorm_backward(const BatchNormCache<T>&, BatchNormLayer<T>&,              \
                                             const BasicTensor<T>&);                                     \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                \
  template CrossEntropyResult<T> softmax_cross_entropy(const BasicTensor<T>&, const LabelMap&,          \
                                                       std::uint8_t);                                    \
  template BasicTensor<T> upsample_bilinear(const BasicTensor<T>&, int);                                \
  template BasicTensor<T> upsample_bilinear_backward(const BasicTensor<T>&, const Shape&, int);         \
  template BasicTensor<T> concat_channels(const BasicTensor<T>&, const BasicTensor<T>&);                \
  template std::pair<BasicTensor<T>, BasicTensor<T>> split_channels(const BasicTensor<T>&, int);        \
  template BasicTensor<T> global_mean_pool(const BasicTensor<T>&);                                       \
  template BasicTensor<T> global_mean_pool_backward(const BasicTensor<T>&, const Shape&);               \
  template void sgd_step(std::span<BasicParam<T>* const>, const GroupRates&, double);                   \
  template void sgd_step(std::span<BasicParam<T>* const>, double, double);

SINF_INSTANTIATE_LAYERS(float)
SINF_INSTANTIATE_LAYERS(double)

#undef SINF_INSTANTIATE_LAYERS

}  // namespace sinet::nn
