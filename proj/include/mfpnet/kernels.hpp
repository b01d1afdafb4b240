#pragma once

// Forward and backward kernels on plain tensors. Everything differentiable in
// the library is a composition of these; autograd.hpp only records which
// backward to call.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "mfpnet/error.hpp"
#include "mfpnet/flops.hpp"
#include "mfpnet/kinks.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet::kernels {

namespace detail {

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw ShapeError(msg);
}

inline std::string dim_msg(const char* op, const char* what, std::size_t found,
                           std::size_t expected) {
  return std::string(op) + ": " + what + " is " + std::to_string(found) + ", expected " +
         std::to_string(expected);
}

// Output indices o in [lo, hi) whose input tap o*stride + offset lands inside [0, extent).
struct Range {
  std::size_t lo = 0;
  std::size_t hi = 0;
};

inline Range valid_outputs(std::size_t out_extent, std::size_t in_extent, long long offset,
                           std::size_t stride) {
  const auto s = static_cast<long long>(stride);
  long long lo = 0;
  if (offset < 0) lo = (-offset + s - 1) / s;
  long long hi_incl = (static_cast<long long>(in_extent) - 1 - offset);
  if (hi_incl < 0) return {0, 0};
  hi_incl /= s;
  long long hi = std::min<long long>(hi_incl + 1, static_cast<long long>(out_extent));
  if (hi <= lo) return {0, 0};
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution

inline Shape conv2d_output_shape(const Shape& in, const ConvSpec& spec) {
  spec.validate();
  detail::require(in.c == spec.in_channels,
                  detail::dim_msg("conv2d", "input channel dimension C", in.c, spec.in_channels));
  const auto oh = spec.out_extent(in.h, 0);
  const auto ow = spec.out_extent(in.w, 1);
  if (!oh || *oh == 0) {
    throw ShapeError("conv2d: non-positive output height for input height " +
                     std::to_string(in.h));
  }
  if (!ow || *ow == 0) {
    throw ShapeError("conv2d: non-positive output width for input width " + std::to_string(in.w));
  }
  return Shape{in.n, spec.out_channels, *oh, *ow};
}

inline std::uint64_t conv2d_flops(const Shape& out, const ConvSpec& spec) {
  const std::uint64_t per_out = 2ULL * spec.kernel[0] * spec.kernel[1] * spec.in_channels;
  const std::uint64_t outputs = out.numel();
  return per_out * outputs + (spec.has_bias ? outputs : 0);
}

/// Direct zero-padded convolution. `bias` may be null when spec.has_bias is false.
inline Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor* bias,
                     const ConvSpec& spec) {
  const Shape os = conv2d_output_shape(x.shape(), spec);
  const Shape ws = spec.weight_shape();
  const Shape& wgot = weight.shape();
  detail::require(wgot.n == ws.n, detail::dim_msg("conv2d", "weight out_channels", wgot.n, ws.n));
  detail::require(wgot.c == ws.c, detail::dim_msg("conv2d", "weight in_channels", wgot.c, ws.c));
  detail::require(wgot.h == ws.h, detail::dim_msg("conv2d", "weight kernel height", wgot.h, ws.h));
  detail::require(wgot.w == ws.w, detail::dim_msg("conv2d", "weight kernel width", wgot.w, ws.w));
  if (spec.has_bias) {
    detail::require(bias != nullptr, "conv2d: spec has bias but no bias tensor given");
    detail::require(bias->numel() == spec.out_channels,
                    detail::dim_msg("conv2d", "bias length", bias->numel(), spec.out_channels));
  }

  const Shape& is = x.shape();
  Tensor out(os);
  const auto [kh, kw] = spec.kernel;
  const auto [sh, sw] = spec.stride;
  const auto [dh, dw] = spec.dilation;
  const auto ph = static_cast<long long>(spec.padding[0]);
  const auto pw = static_cast<long long>(spec.padding[1]);
  const double* in = x.data().data();
  const double* wt = weight.data().data();
  double* o = out.data().data();

  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      double* oplane = o + (n * os.c + co) * os.plane();
      if (spec.has_bias) std::fill(oplane, oplane + os.plane(), (*bias)[co]);
      for (std::size_t ci = 0; ci < is.c; ++ci) {
        const double* iplane = in + (n * is.c + ci) * is.plane();
        const double* wk = wt + (co * is.c + ci) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long long yoff = static_cast<long long>(ky * dh) - ph;
          const auto yr = detail::valid_outputs(os.h, is.h, yoff, sh);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wv = wk[ky * kw + kx];
            const long long xoff = static_cast<long long>(kx * dw) - pw;
            const auto xr = detail::valid_outputs(os.w, is.w, xoff, sw);
            for (std::size_t oy = yr.lo; oy < yr.hi; ++oy) {
              const double* irow = iplane + static_cast<std::size_t>(
                                                static_cast<long long>(oy * sh) + yoff) * is.w;
              double* orow = oplane + oy * os.w;
              if (sw == 1) {
                const double* src = irow + xoff;
                for (std::size_t ox = xr.lo; ox < xr.hi; ++ox) orow[ox] += wv * src[ox];
              } else {
                for (std::size_t ox = xr.lo; ox < xr.hi; ++ox) {
                  orow[ox] += wv * irow[static_cast<long long>(ox * sw) + xoff];
                }
              }
            }
          }
        }
      }
    }
  }
  flops::add(conv2d_flops(os, spec));
  return out;
}

struct ConvSaved {
  const Tensor* input = nullptr;
  const Tensor* weight = nullptr;
  ConvSpec spec;
};

struct ConvGrads {
  Tensor input;
  Tensor weight;
  Tensor bias;  // empty when the conv has no bias
};

/// Transposed direct summation: same index mapping as the forward loop.
inline ConvGrads conv2d_backward(const Tensor& output_grad, const ConvSaved& saved) {
  if (saved.input == nullptr) throw Error("conv2d_backward: missing saved input activation");
  if (saved.weight == nullptr) throw Error("conv2d_backward: missing saved weight");
  const ConvSpec& spec = saved.spec;
  const Tensor& x = *saved.input;
  const Tensor& weight = *saved.weight;
  const Shape os = conv2d_output_shape(x.shape(), spec);
  detail::require(output_grad.shape() == os, "conv2d_backward: output_grad shape " +
                                                 output_grad.shape().str() +
                                                 " does not match forward output " + os.str());
  const Shape& is = x.shape();
  ConvGrads g{Tensor(is), Tensor(spec.weight_shape()),
              spec.has_bias ? Tensor(Shape{1, spec.out_channels, 1, 1}) : Tensor()};

  const auto [kh, kw] = spec.kernel;
  const auto [sh, sw] = spec.stride;
  const auto [dh, dw] = spec.dilation;
  const auto ph = static_cast<long long>(spec.padding[0]);
  const auto pw = static_cast<long long>(spec.padding[1]);
  const double* in = x.data().data();
  const double* wt = weight.data().data();
  const double* go = output_grad.data().data();
  double* gi = g.input.data().data();
  double* gw = g.weight.data().data();

  for (std::size_t n = 0; n < os.n; ++n) {
    for (std::size_t co = 0; co < os.c; ++co) {
      const double* gplane = go + (n * os.c + co) * os.plane();
      if (spec.has_bias) {
        double s = 0.0;
        for (std::size_t i = 0; i < os.plane(); ++i) s += gplane[i];
        g.bias[co] += s;
      }
      for (std::size_t ci = 0; ci < is.c; ++ci) {
        const double* iplane = in + (n * is.c + ci) * is.plane();
        double* giplane = gi + (n * is.c + ci) * is.plane();
        const double* wk = wt + (co * is.c + ci) * kh * kw;
        double* gwk = gw + (co * is.c + ci) * kh * kw;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long long yoff = static_cast<long long>(ky * dh) - ph;
          const auto yr = detail::valid_outputs(os.h, is.h, yoff, sh);
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const double wv = wk[ky * kw + kx];
            const long long xoff = static_cast<long long>(kx * dw) - pw;
            const auto xr = detail::valid_outputs(os.w, is.w, xoff, sw);
            double acc = 0.0;
            for (std::size_t oy = yr.lo; oy < yr.hi; ++oy) {
              const std::size_t iy =
                  static_cast<std::size_t>(static_cast<long long>(oy * sh) + yoff);
              const double* irow = iplane + iy * is.w;
              double* girow = giplane + iy * is.w;
              const double* grow = gplane + oy * os.w;
              for (std::size_t ox = xr.lo; ox < xr.hi; ++ox) {
                const auto ix = static_cast<std::size_t>(static_cast<long long>(ox * sw) + xoff);
                acc += grow[ox] * irow[ix];
                girow[ix] += wv * grow[ox];
              }
            }
            gwk[ky * kw + kx] += acc;
          }
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { train, eval };

struct RunningStats {
  std::vector<double> mean;
  std::vector<double> var;

  explicit RunningStats(std::size_t channels = 0) : mean(channels, 0.0), var(channels, 1.0) {}
};

struct BatchNormSaved {
  Mode mode = Mode::eval;
  std::vector<double> inv_std;
  Tensor normalized;  // x-hat
};

inline constexpr double kBatchNormEps = 1e-5;
inline constexpr double kBatchNormMomentum = 0.1;

inline Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         RunningStats& stats, Mode mode, BatchNormSaved* saved = nullptr) {
  const Shape& s = x.shape();
  detail::require(gamma.numel() == s.c, detail::dim_msg("batch_norm", "gamma length",
                                                        gamma.numel(), s.c));
  detail::require(beta.numel() == s.c,
                  detail::dim_msg("batch_norm", "beta length", beta.numel(), s.c));
  detail::require(stats.mean.size() == s.c && stats.var.size() == s.c,
                  detail::dim_msg("batch_norm", "running stats length", stats.mean.size(), s.c));
  if (s.n == 0 || s.h == 0 || s.w == 0) throw ShapeError("batch_norm: zero-size input " + s.str());
  const std::size_t count = s.n * s.h * s.w;
  if (mode == Mode::train && count < 2) {
    throw ShapeError("batch_norm: train mode needs N*H*W >= 2 per channel, got " +
                     std::to_string(count));
  }

  Tensor out(s);
  Tensor xhat(s);
  std::vector<double> inv_std(s.c);
  const std::size_t plane = s.plane();
  for (std::size_t c = 0; c < s.c; ++c) {
    double mean = 0.0;
    double var = 0.0;
    if (mode == Mode::train) {
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* p = x.data().data() + (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) mean += p[i];
      }
      mean /= static_cast<double>(count);
      for (std::size_t n = 0; n < s.n; ++n) {
        const double* p = x.data().data() + (n * s.c + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) var += (p[i] - mean) * (p[i] - mean);
      }
      const double biased = var / static_cast<double>(count);
      const double unbiased = var / static_cast<double>(count - 1);
      stats.mean[c] = (1.0 - kBatchNormMomentum) * stats.mean[c] + kBatchNormMomentum * mean;
      stats.var[c] = (1.0 - kBatchNormMomentum) * stats.var[c] + kBatchNormMomentum * unbiased;
      var = biased;
    } else {
      mean = stats.mean[c];
      var = stats.var[c];
    }
    const double is = 1.0 / std::sqrt(var + kBatchNormEps);
    inv_std[c] = is;
    const double g = gamma[c];
    const double b = beta[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x[base + i] - mean) * is;
        xhat[base + i] = xh;
        out[base + i] = g * xh + b;
      }
    }
  }
  flops::add(2ULL * s.numel());
  if (saved != nullptr) {
    saved->mode = mode;
    saved->inv_std = std::move(inv_std);
    saved->normalized = std::move(xhat);
  }
  return out;
}

struct BatchNormGrads {
  Tensor input;
  Tensor gamma;
  Tensor beta;
};

inline BatchNormGrads batch_norm_backward(const Tensor& output_grad, const Tensor& gamma,
                                          const BatchNormSaved& saved) {
  const Shape& s = saved.normalized.shape();
  detail::require(output_grad.shape() == s, "batch_norm_backward: output_grad shape mismatch");
  BatchNormGrads g{Tensor(s), Tensor(Shape{1, s.c, 1, 1}), Tensor(Shape{1, s.c, 1, 1})};
  const std::size_t plane = s.plane();
  const auto count = static_cast<double>(s.n * plane);
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum_dy = 0.0;
    double sum_dy_xhat = 0.0;
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += output_grad[base + i];
        sum_dy_xhat += output_grad[base + i] * saved.normalized[base + i];
      }
    }
    g.gamma[c] = sum_dy_xhat;
    g.beta[c] = sum_dy;
    const double k = gamma[c] * saved.inv_std[c];
    for (std::size_t n = 0; n < s.n; ++n) {
      const std::size_t base = (n * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double dy = output_grad[base + i];
        if (saved.mode == Mode::train) {
          g.input[base + i] =
              k * (dy - sum_dy / count - saved.normalized[base + i] * sum_dy_xhat / count);
        } else {
          g.input[base + i] = k * dy;
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class Activation { relu, sigmoid };

inline double sigmoid_scalar(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Tensor activation(const Tensor& x, Activation kind) {
  Tensor out(x.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
    flops::add(x.numel());
    kinks::record(x.numel(), [&](std::uint64_t i) { return x[i] > 0.0; });
  } else {
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = sigmoid_scalar(x[i]);
    flops::add(4ULL * x.numel());
  }
  return out;
}

/// relu needs the forward input, sigmoid the forward output.
inline Tensor activation_backward(const Tensor& output_grad, const Tensor& input,
                                  const Tensor& output, Activation kind) {
  detail::require(output_grad.shape() == input.shape(), "activation_backward: shape mismatch");
  Tensor g(input.shape());
  if (kind == Activation::relu) {
    for (std::size_t i = 0; i < g.numel(); ++i) g[i] = input[i] > 0.0 ? output_grad[i] : 0.0;
  } else {
    for (std::size_t i = 0; i < g.numel(); ++i) {
      g[i] = output_grad[i] * output[i] * (1.0 - output[i]);
    }
  }
  return g;
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require(a.shape() == b.shape(),
                  "add: shapes " + a.shape().str() + " and " + b.shape().str() + " differ");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] + b[i];
  flops::add(a.numel());
  return out;
}

inline Tensor scale(const Tensor& a, double k) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * k;
  flops::add(a.numel());
  return out;
}

/// x (N,C,H,W) times per-channel gate (N,C,1,1).
inline Tensor channel_scale(const Tensor& x, const Tensor& gate) {
  const Shape& s = x.shape();
  detail::require(gate.shape() == Shape{s.n, s.c, 1, 1},
                  "channel_scale: gate shape " + gate.shape().str() + " does not match " +
                      s.str());
  Tensor out(s);
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double g = gate[nc];
    for (std::size_t i = 0; i < s.plane(); ++i) out[nc * s.plane() + i] = x[nc * s.plane() + i] * g;
  }
  flops::add(s.numel());
  return out;
}

inline std::pair<Tensor, Tensor> channel_scale_backward(const Tensor& output_grad, const Tensor& x,
                                                        const Tensor& gate) {
  const Shape& s = x.shape();
  Tensor gx(s);
  Tensor gg(gate.shape());
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.plane(); ++i) {
      const std::size_t k = nc * s.plane() + i;
      gx[k] = output_grad[k] * gate[nc];
      acc += output_grad[k] * x[k];
    }
    gg[nc] = acc;
  }
  return {std::move(gx), std::move(gg)};
}

inline Tensor concat_channels(std::span<const Tensor* const> parts) {
  detail::require(!parts.empty(), "concat_channels: no inputs");
  Shape s = parts.front()->shape();
  std::size_t channels = 0;
  for (const Tensor* p : parts) {
    const Shape& ps = p->shape();
    detail::require(ps.n == s.n && ps.h == s.h && ps.w == s.w,
                    "concat_channels: part shape " + ps.str() + " incompatible with " + s.str());
    channels += ps.c;
  }
  Shape os{s.n, channels, s.h, s.w};
  Tensor out(os);
  for (std::size_t n = 0; n < s.n; ++n) {
    std::size_t c0 = 0;
    for (const Tensor* p : parts) {
      const std::size_t len = p->shape().c * s.plane();
      std::copy_n(p->data().data() + n * len, len, out.data().data() + (n * channels + c0) * s.plane());
      c0 += p->shape().c;
    }
  }
  return out;
}

// Slice of channels [begin, begin+count) of an (N,C,H,W) tensor.
inline Tensor slice_channels(const Tensor& x, std::size_t begin, std::size_t count) {
  const Shape& s = x.shape();
  detail::require(begin + count <= s.c, "slice_channels: range out of bounds");
  Tensor out(Shape{s.n, count, s.h, s.w});
  for (std::size_t n = 0; n < s.n; ++n) {
    std::copy_n(x.data().data() + (n * s.c + begin) * s.plane(), count * s.plane(),
                out.data().data() + n * count * s.plane());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Pooling and resize

inline Tensor global_avg_pool(const Tensor& x) {
  const Shape& s = x.shape();
  detail::require(s.plane() > 0, "global_avg_pool: empty spatial extent");
  Tensor out(Shape{s.n, s.c, 1, 1});
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    double acc = 0.0;
    for (std::size_t i = 0; i < s.plane(); ++i) acc += x[nc * s.plane() + i];
    out[nc] = acc / static_cast<double>(s.plane());
  }
  flops::add(s.numel());
  return out;
}

inline Tensor global_avg_pool_backward(const Tensor& output_grad, const Shape& in) {
  Tensor g(in);
  const double inv = 1.0 / static_cast<double>(in.plane());
  for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
    for (std::size_t i = 0; i < in.plane(); ++i) g[nc * in.plane() + i] = output_grad[nc] * inv;
  }
  return g;
}

/// Adaptive average pooling bin [begin, end) for output index i.
inline std::pair<std::size_t, std::size_t> adaptive_bin(std::size_t i, std::size_t in,
                                                        std::size_t bins) {
  const std::size_t begin = (i * in) / bins;
  const std::size_t end = ((i + 1) * in + bins - 1) / bins;
  return {begin, end};
}

inline Tensor adaptive_avg_pool(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  detail::require(out_h >= 1 && out_w >= 1, "adaptive_avg_pool: output size must be positive");
  detail::require(s.h >= 1 && s.w >= 1, "adaptive_avg_pool: empty input");
  Tensor out(Shape{s.n, s.c, out_h, out_w});
  std::uint64_t reads = 0;
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double* p = x.data().data() + nc * s.plane();
    for (std::size_t oy = 0; oy < out_h; ++oy) {
      const auto [y0, y1] = adaptive_bin(oy, s.h, out_h);
      for (std::size_t ox = 0; ox < out_w; ++ox) {
        const auto [x0, x1] = adaptive_bin(ox, s.w, out_w);
        double acc = 0.0;
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t xx = x0; xx < x1; ++xx) acc += p[y * s.w + xx];
        }
        const auto area = (y1 - y0) * (x1 - x0);
        reads += area;
        out[(nc * out_h + oy) * out_w + ox] = acc / static_cast<double>(area);
      }
    }
  }
  flops::add(reads);
  return out;
}

inline Tensor adaptive_avg_pool_backward(const Tensor& output_grad, const Shape& in) {
  const Shape& os = output_grad.shape();
  Tensor g(in);
  for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
    double* p = g.data().data() + nc * in.plane();
    for (std::size_t oy = 0; oy < os.h; ++oy) {
      const auto [y0, y1] = adaptive_bin(oy, in.h, os.h);
      for (std::size_t ox = 0; ox < os.w; ++ox) {
        const auto [x0, x1] = adaptive_bin(ox, in.w, os.w);
        const double v = output_grad[(nc * os.h + oy) * os.w + ox] /
                         static_cast<double>((y1 - y0) * (x1 - x0));
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t xx = x0; xx < x1; ++xx) p[y * in.w + xx] += v;
        }
      }
    }
  }
  return g;
}

/// Non-overlapping k×k average pooling; H and W must be multiples of k.
inline Tensor avg_pool(const Tensor& x, std::size_t k) {
  const Shape& s = x.shape();
  if (k == 0 || s.h % k != 0 || s.w % k != 0) {
    throw ShapeError("avg_pool: spatial dims " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " not divisible by pool factor " + std::to_string(k));
  }
  return adaptive_avg_pool(x, s.h / k, s.w / k);
}

inline Tensor avg_pool_backward(const Tensor& output_grad, const Shape& in) {
  return adaptive_avg_pool_backward(output_grad, in);
}

namespace detail {

struct Tap {
  std::size_t i0;
  std::size_t i1;
  double frac;
};

// Half-pixel source coordinate, clamped to [0, in-1].
inline Tap bilinear_tap(std::size_t t, std::size_t in, std::size_t out) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  double src = (static_cast<double>(t) + 0.5) * scale - 0.5;
  src = std::clamp(src, 0.0, static_cast<double>(in - 1));
  const auto i0 = static_cast<std::size_t>(std::floor(src));
  const std::size_t i1 = std::min(i0 + 1, in - 1);
  return {i0, i1, src - static_cast<double>(i0)};
}

}  // namespace detail

/// Bilinear resize, half-pixel centers, no corner alignment. Interpolates in
/// a + t(b - a) form so constant inputs come back bit-exact.
inline Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w) {
  const Shape& s = x.shape();
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: target dims must be >= 1");
  detail::require(s.h > 0 && s.w > 0, "bilinear_resize: empty input");
  const Shape os{s.n, s.c, out_h, out_w};
  flops::add(2ULL * os.numel());
  if (out_h == s.h && out_w == s.w) {
    Tensor copy(os, x.storage());
    return copy;
  }
  Tensor out(os);
  std::vector<detail::Tap> ty(out_h);
  std::vector<detail::Tap> tx(out_w);
  for (std::size_t y = 0; y < out_h; ++y) ty[y] = detail::bilinear_tap(y, s.h, out_h);
  for (std::size_t xx = 0; xx < out_w; ++xx) tx[xx] = detail::bilinear_tap(xx, s.w, out_w);
  for (std::size_t nc = 0; nc < s.n * s.c; ++nc) {
    const double* p = x.data().data() + nc * s.plane();
    double* o = out.data().data() + nc * os.plane();
    for (std::size_t y = 0; y < out_h; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < out_w; ++xx) {
        const auto& b = tx[xx];
        const double v00 = p[a.i0 * s.w + b.i0];
        const double v01 = p[a.i0 * s.w + b.i1];
        const double v10 = p[a.i1 * s.w + b.i0];
        const double v11 = p[a.i1 * s.w + b.i1];
        const double top = v00 + b.frac * (v01 - v00);
        const double bottom = v10 + b.frac * (v11 - v10);
        o[y * out_w + xx] = top + a.frac * (bottom - top);
      }
    }
  }
  return out;
}

inline Tensor bilinear_resize_backward(const Tensor& output_grad, const Shape& in) {
  const Shape& os = output_grad.shape();
  if (os.h == in.h && os.w == in.w) {
    Tensor copy(in, output_grad.storage());
    return copy;
  }
  Tensor g(in);
  std::vector<detail::Tap> ty(os.h);
  std::vector<detail::Tap> tx(os.w);
  for (std::size_t y = 0; y < os.h; ++y) ty[y] = detail::bilinear_tap(y, in.h, os.h);
  for (std::size_t xx = 0; xx < os.w; ++xx) tx[xx] = detail::bilinear_tap(xx, in.w, os.w);
  for (std::size_t nc = 0; nc < in.n * in.c; ++nc) {
    double* p = g.data().data() + nc * in.plane();
    const double* go = output_grad.data().data() + nc * os.plane();
    for (std::size_t y = 0; y < os.h; ++y) {
      const auto& a = ty[y];
      for (std::size_t xx = 0; xx < os.w; ++xx) {
        const auto& b = tx[xx];
        const double v = go[y * os.w + xx];
        p[a.i0 * in.w + b.i0] += v * (1.0 - a.frac) * (1.0 - b.frac);
        p[a.i0 * in.w + b.i1] += v * (1.0 - a.frac) * b.frac;
        p[a.i1 * in.w + b.i0] += v * a.frac * (1.0 - b.frac);
        p[a.i1 * in.w + b.i1] += v * a.frac * b.frac;
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Batched matrix algebra on (batch, 1, rows, cols) tensors.

namespace detail {

inline void require_matrix(const Tensor& m, const char* op) {
  require(m.shape().c == 1, std::string(op) + ": matrix tensors must have C == 1, got " +
                                m.shape().str());
}

inline std::size_t batch_of(const Tensor& a, const Tensor& b, const char* op) {
  const std::size_t na = a.shape().n;
  const std::size_t nb = b.shape().n;
  require(na == nb || na == 1 || nb == 1, std::string(op) + ": batch sizes " +
                                              std::to_string(na) + " and " + std::to_string(nb) +
                                              " cannot broadcast");
  return std::max(na, nb);
}

}  // namespace detail

/// Batched product; a batch of 1 broadcasts against the other operand.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_matrix(a, "matmul");
  detail::require_matrix(b, "matmul");
  const std::size_t m = a.shape().h;
  const std::size_t k = a.shape().w;
  const std::size_t n = b.shape().w;
  detail::require(b.shape().h == k, detail::dim_msg("matmul", "rows of right operand",
                                                    b.shape().h, k));
  const std::size_t batch = detail::batch_of(a, b, "matmul");
  Tensor out(Shape{batch, 1, m, n});
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* pa = a.data().data() + (a.shape().n == 1 ? 0 : bi) * m * k;
    const double* pb = b.data().data() + (b.shape().n == 1 ? 0 : bi) * k * n;
    double* po = out.data().data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double av = pa[i * k + p];
        const double* brow = pb + p * n;
        double* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  }
  flops::add(2ULL * batch * m * k * n);
  return out;
}

inline std::pair<Tensor, Tensor> matmul_backward(const Tensor& output_grad, const Tensor& a,
                                                 const Tensor& b) {
  const std::size_t m = a.shape().h;
  const std::size_t k = a.shape().w;
  const std::size_t n = b.shape().w;
  const std::size_t batch = output_grad.shape().n;
  Tensor ga(a.shape());
  Tensor gb(b.shape());
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const std::size_t ia = a.shape().n == 1 ? 0 : bi;
    const std::size_t ib = b.shape().n == 1 ? 0 : bi;
    const double* pa = a.data().data() + ia * m * k;
    const double* pb = b.data().data() + ib * k * n;
    const double* g = output_grad.data().data() + bi * m * n;
    double* pga = ga.data().data() + ia * m * k;
    double* pgb = gb.data().data() + ib * k * n;
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * pb[p * n + j];
        pga[i * k + p] += acc;
        const double av = pa[i * k + p];
        for (std::size_t j = 0; j < n; ++j) pgb[p * n + j] += av * g[i * n + j];
      }
    }
  }
  return {std::move(ga), std::move(gb)};
}

inline Tensor transpose(const Tensor& a) {
  detail::require_matrix(a, "transpose");
  const Shape& s = a.shape();
  Tensor out(Shape{s.n, 1, s.w, s.h});
  for (std::size_t bi = 0; bi < s.n; ++bi) {
    for (std::size_t i = 0; i < s.h; ++i) {
      for (std::size_t j = 0; j < s.w; ++j) {
        out[(bi * s.w + j) * s.h + i] = a[(bi * s.h + i) * s.w + j];
      }
    }
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline Tensor softmax_rows(const Tensor& m) {
  const Shape& s = m.shape();
  detail::require(s.w > 0, "softmax_rows: empty rows");
  Tensor out(s);
  const std::size_t rows = s.n * s.c * s.h;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = m.data().data() + r * s.w;
    double* o = out.data().data() + r * s.w;
    const double mx = *std::max_element(in, in + s.w);
    double total = 0.0;
    for (std::size_t j = 0; j < s.w; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < s.w; ++j) o[j] /= total;
  }
  flops::add(4ULL * s.numel());
  return out;
}

inline Tensor softmax_rows_backward(const Tensor& output_grad, const Tensor& output) {
  const Shape& s = output.shape();
  Tensor g(s);
  const std::size_t rows = s.n * s.c * s.h;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0;
    for (std::size_t j = 0; j < s.w; ++j) dot += output_grad[r * s.w + j] * output[r * s.w + j];
    for (std::size_t j = 0; j < s.w; ++j) {
      g[r * s.w + j] = output[r * s.w + j] * (output_grad[r * s.w + j] - dot);
    }
  }
  return g;
}

/// (A + Aᵀ) / 2 per batch; the result is exactly symmetric.
inline Tensor symmetrize(const Tensor& a) {
  detail::require_matrix(a, "symmetrize");
  const Shape& s = a.shape();
  detail::require(s.h == s.w, "symmetrize: matrix must be square, got " + s.str());
  Tensor out(s);
  const std::size_t n = s.h;
  for (std::size_t bi = 0; bi < s.n; ++bi) {
    const double* p = a.data().data() + bi * n * n;
    double* o = out.data().data() + bi * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] = 0.5 * (p[i * n + j] + p[j * n + i]);
    }
  }
  flops::add(2ULL * s.numel());
  return out;
}

inline Tensor symmetrize_backward(const Tensor& output_grad) {
  const Shape& s = output_grad.shape();
  const std::size_t n = s.h;
  Tensor g(s);
  for (std::size_t bi = 0; bi < s.n; ++bi) {
    const double* p = output_grad.data().data() + bi * n * n;
    double* o = g.data().data() + bi * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) o[i * n + j] = 0.5 * (p[i * n + j] + p[j * n + i]);
    }
  }
  return g;
}

/// D^{-1/2} (A + I) D^{-1/2}, with D_ii the row sums of A + I.
inline Tensor normalize_adjacency(const Tensor& a) {
  detail::require_matrix(a, "normalize_adjacency");
  const Shape& s = a.shape();
  detail::require(s.h == s.w, "normalize_adjacency: adjacency must be square, got " +
                                  std::to_string(s.h) + "x" + std::to_string(s.w));
  const std::size_t n = s.h;
  Tensor out(s);
  std::vector<double> inv_sqrt(n);
  for (std::size_t bi = 0; bi < s.n; ++bi) {
    const double* p = a.data().data() + bi * n * n;
    double* o = out.data().data() + bi * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      double deg = 1.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (!(p[i * n + j] >= 0.0) || !std::isfinite(p[i * n + j])) {
          throw NumericError("normalize_adjacency: entry (" + std::to_string(i) + "," +
                             std::to_string(j) + ") is negative or non-finite");
        }
        deg += p[i * n + j];
      }
      inv_sqrt[i] = 1.0 / std::sqrt(deg);
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double b = p[i * n + j] + (i == j ? 1.0 : 0.0);
        o[i * n + j] = (inv_sqrt[i] * inv_sqrt[j]) * b;
      }
    }
  }
  flops::add(3ULL * s.numel());
  return out;
}

inline Tensor normalize_adjacency_backward(const Tensor& output_grad, const Tensor& a) {
  const Shape& s = a.shape();
  const std::size_t n = s.h;
  Tensor g(s);
  std::vector<double> deg(n);
  std::vector<double> inv_sqrt(n);
  std::vector<double> d_inv_sqrt(n);
  for (std::size_t bi = 0; bi < s.n; ++bi) {
    const double* p = a.data().data() + bi * n * n;
    const double* go = output_grad.data().data() + bi * n * n;
    double* pg = g.data().data() + bi * n * n;
    for (std::size_t i = 0; i < n; ++i) {
      deg[i] = 1.0;
      for (std::size_t j = 0; j < n; ++j) deg[i] += p[i * n + j];
      inv_sqrt[i] = 1.0 / std::sqrt(deg[i]);
      d_inv_sqrt[i] = 0.0;
    }
    // dL/ds_k, s = D^{-1/2}
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double b = p[i * n + j] + (i == j ? 1.0 : 0.0);
        d_inv_sqrt[i] += go[i * n + j] * b * inv_sqrt[j];
        d_inv_sqrt[j] += go[i * n + j] * b * inv_sqrt[i];
      }
    }
    for (std::size_t i = 0; i < n; ++i) {
      // ds/dd = -1/2 d^{-3/2}; every entry in row i feeds d_i.
      const double via_degree = d_inv_sqrt[i] * (-0.5) * inv_sqrt[i] / deg[i];
      for (std::size_t j = 0; j < n; ++j) {
        pg[i * n + j] = go[i * n + j] * inv_sqrt[i] * inv_sqrt[j] + via_degree;
      }
    }
  }
  return g;
}

}  // namespace mfpnet::kernels
