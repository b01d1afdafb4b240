#pragma once

// Brute-force reference implementations used as independent oracles.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include "mfpnet/tensor.hpp"

namespace oracle {

using mfpnet::ConvSpec;
using mfpnet::Shape;
using mfpnet::Tensor;

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* b, const ConvSpec& s) {
  const Shape in = x.shape();
  const long long ph = static_cast<long long>(s.padding[0]);
  const long long pw = static_cast<long long>(s.padding[1]);
  const std::size_t oh = (in.h + 2 * s.padding[0] - s.dilation[0] * (s.kernel[0] - 1) - 1) / s.stride[0] + 1;
  const std::size_t ow = (in.w + 2 * s.padding[1] - s.dilation[1] * (s.kernel[1] - 1) - 1) / s.stride[1] + 1;
  Tensor out(Shape{in.n, s.out_channels, oh, ow});
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t o = 0; o < s.out_channels; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx) {
          double acc = b ? b->data()[o] : 0.0;
          for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t ky = 0; ky < s.kernel[0]; ++ky)
              for (std::size_t kx = 0; kx < s.kernel[1]; ++kx) {
                const long long iy = static_cast<long long>(y * s.stride[0] + ky * s.dilation[0]) - ph;
                const long long ix = static_cast<long long>(xx * s.stride[1] + kx * s.dilation[1]) - pw;
                if (iy < 0 || ix < 0 || iy >= static_cast<long long>(in.h) || ix >= static_cast<long long>(in.w)) continue;
                acc += x.at(n, c, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix)) * w.at(o, c, ky, kx);
              }
          out.at(n, o, y, xx) = acc;
        }
  return out;
}

// (rows x inner) * (inner x cols), matrices stored as (1,1,r,c).
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const std::size_t r = a.shape().h, k = a.shape().w, c = b.shape().w;
  Tensor out = Tensor::matrix(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double acc = 0.0;
      for (std::size_t t = 0; t < k; ++t) acc += a.data()[i * k + t] * b.data()[t * c + j];
      out.data()[i * c + j] = acc;
    }
  return out;
}

// Half-pixel bilinear sample of plane (n,c) at output pixel (y,x).
inline double bilinear_at(const Tensor& in, std::size_t n, std::size_t c, std::size_t oh, std::size_t ow,
                          std::size_t y, std::size_t x) {
  const Shape s = in.shape();
  auto src = [](std::size_t o, std::size_t in_extent, std::size_t out_extent) {
    double v = (static_cast<double>(o) + 0.5) * static_cast<double>(in_extent) / static_cast<double>(out_extent) - 0.5;
    return std::min(std::max(v, 0.0), static_cast<double>(in_extent - 1));
  };
  const double sy = src(y, s.h, oh), sx = src(x, s.w, ow);
  const auto y0 = static_cast<std::size_t>(sy), x0 = static_cast<std::size_t>(sx);
  const std::size_t y1 = std::min(y0 + 1, s.h - 1), x1 = std::min(x0 + 1, s.w - 1);
  const double fy = sy - static_cast<double>(y0), fx = sx - static_cast<double>(x0);
  return (1 - fy) * ((1 - fx) * in.at(n, c, y0, x0) + fx * in.at(n, c, y0, x1)) +
         fy * ((1 - fx) * in.at(n, c, y1, x0) + fx * in.at(n, c, y1, x1));
}

// Dominant |eigenvalue| estimate of a symmetric n x n matrix by power iteration.
inline double spectral_radius(const std::vector<double>& m, std::size_t n, int iters = 2000) {
  std::vector<double> v(n), nv(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.37 * static_cast<double>(i % 5) - 0.11 * static_cast<double>(i);
  double lambda = 0.0;
  for (int it = 0; it < iters; ++it) {
    double norm = 0.0;
    for (double e : v) norm += e * e;
    norm = std::sqrt(norm);
    for (double& e : v) e /= norm;
    for (std::size_t i = 0; i < n; ++i) {
      nv[i] = 0.0;
      for (std::size_t j = 0; j < n; ++j) nv[i] += m[i * n + j] * v[j];
    }
    double nn = 0.0;
    for (double e : nv) nn += e * e;
    lambda = std::max(lambda, std::sqrt(nn));
    v = nv;
    if (nn == 0.0) break;
  }
  return lambda;
}

// Random symmetric non-negative adjacency with zero diagonal.
inline Tensor random_graph(std::size_t n, std::uint64_t seed) {
  mfpnet::Rng rng(seed);
  const double density = rng.uniform(0.1, 1.0);
  Tensor a = Tensor::matrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = rng.uniform() < density ? rng.uniform() : 0.0;
      a.data()[i * n + j] = v;
      a.data()[j * n + i] = v;
    }
  return a;
}

inline std::vector<std::size_t> random_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  mfpnet::Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    std::swap(p[i - 1], p[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i - 1)))]);
  }
  return p;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace oracle
