#pragma once

// Multi-scale simple graph convolution: a feature map is pooled and projected
// to d×n node features, a dense learned adjacency is built over the n nodes,
// normalized, used for one-hop propagation, and the result is reprojected to
// the feature map's extent.
//
// Node features use a (d, n) layout stored as (batch, 1, d, n) tensors, which is
// the same memory as the (batch, d, h, w) map it came from.

#include <cmath>
#include <string>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/blocks.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/registry.hpp"

namespace mfpnet {

struct Graph {
  Var nodes;      // (N, 1, d, n)
  Var adjacency;  // (N, 1, n, n), entries in [0, 1], symmetric
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t dim() const { return nodes.shape().h; }
  std::size_t count() const { return nodes.shape().w; }
};

struct SgcnParams {
  std::string name;
  std::size_t channels = 0;
  std::size_t dim = 0;
  std::size_t pool_factor = 2;
  Conv2d proj;  // 1×1, C -> d
  Var delta;    // d×d
  Var psi;      // d×d
  std::vector<Var> theta;  // one d×d weight per graph layer
  Var q;                   // d×d output weight
  Conv2d reproj;           // 1×1, d -> C

  static SgcnParams create(ParamStore& store, const std::string& name, std::size_t channels,
                           std::size_t dim, std::size_t num_layers = 1,
                           std::size_t pool_factor = 2) {
    if (dim == 0) throw ConfigError(name + ": graph dimension must be >= 1");
    if (pool_factor == 0) throw ConfigError(name + ": pool factor must be >= 1");
    SgcnParams p;
    p.name = name;
    p.channels = channels;
    p.dim = dim;
    p.pool_factor = pool_factor;
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    const Shape sq{1, 1, dim, dim};
    p.proj = Conv2d::create(store, name + ".proj", ConvSpec::same(channels, dim, 1, 1));
    p.delta = store.uniform(name + ".delta.weight", sq, {dim, dim}, bound);
    p.psi = store.uniform(name + ".psi.weight", sq, {dim, dim}, bound);
    for (std::size_t l = 0; l < num_layers; ++l) {
      p.theta.push_back(
          store.uniform(name + ".theta" + std::to_string(l) + ".weight", sq, {dim, dim}, bound));
    }
    p.q = store.uniform(name + ".q.weight", sq, {dim, dim}, bound);
    p.reproj = Conv2d::create(store, name + ".reproj", ConvSpec::same(dim, channels, 1, 1));
    return p;
  }

  std::vector<Var> all_params() const {
    std::vector<Var> out{proj.weight, proj.bias, delta, psi};
    out.insert(out.end(), theta.begin(), theta.end());
    out.push_back(q);
    out.push_back(reproj.weight);
    out.push_back(reproj.bias);
    return out;
  }
};

/// A = sym(softmax_rows((δX)ᵀ(ψX) / √d)), sym(M) = (M + Mᵀ)/2.
inline Var build_adjacency(const Var& nodes, const Var& delta, const Var& psi) {
  const std::size_t d = nodes.shape().h;
  if (d == 0) throw ShapeError("build_adjacency: node dimension d is 0");
  Var scores = matmul(transpose(matmul(delta, nodes)), matmul(psi, nodes));
  scores = scale(scores, 1.0 / std::sqrt(static_cast<double>(d)));
  return symmetrize(softmax_rows(scores));
}

/// One-hop graph convolution H' = relu(Θᵀ H Âᵀ): Â mixes nodes, Θ mixes features.
inline Var gcn_layer(const Var& prev, const Var& norm_adjacency, const Var& theta) {
  return relu(matmul(matmul(transpose(theta), prev), transpose(norm_adjacency)));
}

/// Average-pool by the pool factor, 1×1-project to d channels, flatten to nodes.
inline Graph project(const Var& features, const SgcnParams& p) {
  const Shape& s = features.shape();
  if (s.c != p.channels) {
    throw ShapeError(p.name + ": input has " + std::to_string(s.c) + " channels, expected " +
                     std::to_string(p.channels));
  }
  if (s.h % p.pool_factor != 0 || s.w % p.pool_factor != 0) {
    throw ShapeError(p.name + ": feature map " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                     " not divisible by pool factor " + std::to_string(p.pool_factor));
  }
  Graph g;
  g.h = s.h / p.pool_factor;
  g.w = s.w / p.pool_factor;
  Var pooled = p.pool_factor == 1 ? features : avg_pool(features, p.pool_factor);
  Var mapped = p.proj(pooled);
  g.nodes = reshape(mapped, Shape{s.n, 1, p.dim, g.h * g.w});
  g.adjacency = build_adjacency(g.nodes, p.delta, p.psi);
  return g;
}

/// Graph-space part of propagation: normalize, graph layers, then the Q mix.
/// Returns (N, 1, d, n) node features.
inline Var propagate_graph(const Graph& g, const SgcnParams& p) {
  Var norm = normalize_adjacency(g.adjacency);
  Var h = g.nodes;
  for (std::size_t l = 0; l < p.theta.size(); ++l) {
    h = gcn_layer(h, norm, p.theta[l]);
    if (!h.value().all_finite()) {
      throw NumericError(p.name + ": non-finite node features after graph layer " +
                         std::to_string(l));
    }
  }
  return matmul(transpose(p.q), h);
}

/// Full propagator: returns M with the same shape as the input feature map.
inline Var propagate(const Var& features, const SgcnParams& p) {
  const Shape s = features.shape();
  Graph g = project(features, p);
  Var h = propagate_graph(g, p);
  Var grid = reshape(h, Shape{s.n, p.dim, g.h, g.w});
  Var out = p.reproj(bilinear_resize(grid, s.h, s.w));
  return check_finite(std::move(out), p.name);
}

}  // namespace mfpnet
