#pragma once

// Composite layers: conv/norm/activation units, SE attention, the bottleneck
// residual module (BRM), BRM blocks, the initial block, resampling units,
// segmentation heads and the classifier.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/registry.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

inline Var check_finite(Var v, const std::string& layer) {
  if (!v.value().all_finite()) {
    throw NumericError("non-finite values produced by layer '" + layer + "'");
  }
  return v;
}

// ---------------------------------------------------------------------------

struct Conv2d {
  std::string name;
  ConvSpec spec;
  Var weight;
  Var bias;

  static Conv2d create(ParamStore& store, const std::string& name, const ConvSpec& spec) {
    spec.validate();
    Conv2d c;
    c.name = name;
    c.spec = spec;
    const auto fan_in = static_cast<double>(spec.in_channels * spec.kernel[0] * spec.kernel[1]);
    const double bound = 1.0 / std::sqrt(fan_in);
    c.weight = store.uniform(name + ".weight", spec.weight_shape(),
                             {spec.out_channels, spec.in_channels, spec.kernel[0], spec.kernel[1]},
                             bound);
    if (spec.has_bias) {
      c.bias = store.uniform(name + ".bias", Shape{1, spec.out_channels, 1, 1},
                             {spec.out_channels}, bound);
    }
    return c;
  }

  Var operator()(const Var& x) const { return conv2d(x, weight, bias, spec); }
};

/// conv -> batch norm -> optional ReLU, registered as one layer.
struct ConvBnAct {
  std::string name;
  Conv2d conv;
  Var gamma;
  Var beta;
  std::shared_ptr<RunningStats> stats;
  bool relu = true;

  static ConvBnAct create(ParamStore& store, const std::string& name, const ConvSpec& spec,
                          bool relu = true) {
    ConvBnAct u;
    u.name = name;
    u.conv = Conv2d::create(store, name, spec);
    const std::size_t c = spec.out_channels;
    u.gamma = store.constant(name + ".bn_gamma", Shape{1, c, 1, 1}, {c}, 1.0);
    u.beta = store.constant(name + ".bn_beta", Shape{1, c, 1, 1}, {c}, 0.0);
    u.stats = store.running_stats(name + ".bn", c);
    u.relu = relu;
    return u;
  }

  Var forward(const Var& x, Mode mode) const {
    Var y = batch_norm(conv(x), gamma, beta, *stats, mode);
    if (relu) y = mfpnet::relu(y);
    return check_finite(std::move(y), name);
  }
};

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

struct SeParams {
  std::string name;
  std::size_t channels = 0;
  std::size_t reduction = 4;
  Conv2d fc1;
  Conv2d fc2;

  std::size_t hidden() const { return channels / reduction; }

  static SeParams create(ParamStore& store, const std::string& name, std::size_t channels,
                         std::size_t reduction) {
    if (reduction == 0 || channels / reduction < 1) {
      throw ConfigError(name + ": SE reduction " + std::to_string(reduction) +
                        " leaves no hidden channels for C=" + std::to_string(channels));
    }
    SeParams p;
    p.name = name;
    p.channels = channels;
    p.reduction = reduction;
    p.fc1 = Conv2d::create(store, name + ".fc1", ConvSpec::same(channels, p.hidden(), 1, 1));
    p.fc2 = Conv2d::create(store, name + ".fc2", ConvSpec::same(p.hidden(), channels, 1, 1));
    return p;
  }
};

/// y = x * sigmoid(fc2(relu(fc1(gap(x))))), gate broadcast over H×W.
inline Var se_attention(const Var& x, const SeParams& p) {
  if (x.shape().c != p.channels) {
    throw ShapeError(p.name + ": input has " + std::to_string(x.shape().c) + " channels, expected " +
                     std::to_string(p.channels));
  }
  Var gate = sigmoid(p.fc2(relu(p.fc1(global_avg_pool(x)))));
  return check_finite(channel_scale(x, gate), p.name);
}

// ---------------------------------------------------------------------------
// Bottleneck residual module

struct BrmParams {
  std::string name;
  std::size_t channels = 0;
  std::size_t reduction_ratio = 2;
  std::size_t dilation = 1;
  ConvBnAct bottleneck;  // 3×3, C -> C/ratio
  ConvBnAct fact_a1;     // 3×1
  ConvBnAct fact_a2;     // 1×3
  SeParams se;
  ConvBnAct fact_b1;  // 3×1, dilated
  ConvBnAct fact_b2;  // 1×3, dilated
  ConvBnAct recover;  // 1×1, C/ratio -> C, no activation

  std::size_t internal() const { return channels / reduction_ratio; }

  static BrmParams create(ParamStore& store, const std::string& name, std::size_t channels,
                          std::size_t dilation, std::size_t reduction_ratio = 2,
                          std::size_t se_reduction = 4) {
    if (reduction_ratio == 0 || channels / reduction_ratio < 1) {
      throw ConfigError(name + ": reduction ratio " + std::to_string(reduction_ratio) +
                        " leaves no internal channels for C=" + std::to_string(channels));
    }
    if (dilation == 0) throw ConfigError(name + ": dilation must be >= 1");
    BrmParams p;
    p.name = name;
    p.channels = channels;
    p.reduction_ratio = reduction_ratio;
    p.dilation = dilation;
    const std::size_t ci = p.internal();
    p.bottleneck = ConvBnAct::create(store, name + ".bottleneck", ConvSpec::same(channels, ci, 3, 3));
    p.fact_a1 = ConvBnAct::create(store, name + ".fact_a1", ConvSpec::same(ci, ci, 3, 1));
    p.fact_a2 = ConvBnAct::create(store, name + ".fact_a2", ConvSpec::same(ci, ci, 1, 3));
    p.se = SeParams::create(store, name + ".se", ci, se_reduction);
    p.fact_b1 = ConvBnAct::create(store, name + ".fact_b1",
                                  ConvSpec::same(ci, ci, 3, 1, dilation, dilation));
    p.fact_b2 = ConvBnAct::create(store, name + ".fact_b2",
                                  ConvSpec::same(ci, ci, 1, 3, dilation, dilation));
    p.recover = ConvBnAct::create(store, name + ".recover", ConvSpec::same(ci, channels, 1, 1),
                                  /*relu=*/false);
    return p;
  }

  // Every conv, norm-affine and SE weight outside the skip path.
  std::vector<Var> branch_params() const {
    std::vector<Var> out;
    for (const ConvBnAct* u : {&bottleneck, &fact_a1, &fact_a2, &fact_b1, &fact_b2, &recover}) {
      out.push_back(u->conv.weight);
      out.push_back(u->conv.bias);
      out.push_back(u->gamma);
      out.push_back(u->beta);
    }
    for (const Conv2d* c : {&se.fc1, &se.fc2}) {
      out.push_back(c->weight);
      out.push_back(c->bias);
    }
    return out;
  }
};

/// y = x + recover(fact_b(se(fact_a(bottleneck(x))))).
inline Var brm_forward(const Var& x, const BrmParams& p, Mode mode) {
  if (x.shape().c != p.channels) {
    throw ShapeError(p.name + ": input has " + std::to_string(x.shape().c) +
                     " channels, expected " + std::to_string(p.channels));
  }
  Var h = p.bottleneck.forward(x, mode);
  h = p.fact_a1.forward(h, mode);
  h = p.fact_a2.forward(h, mode);
  h = se_attention(h, p.se);
  h = p.fact_b1.forward(h, mode);
  h = p.fact_b2.forward(h, mode);
  h = p.recover.forward(h, mode);
  return check_finite(add(x, h), p.name);
}

/// A chain of BRMs wrapped in one residual connection.
struct BrmBlock {
  std::string name;
  std::vector<BrmParams> units;

  static BrmBlock create(ParamStore& store, const std::string& name, std::size_t channels,
                         const std::vector<std::size_t>& dilations, std::size_t reduction_ratio,
                         std::size_t se_reduction) {
    BrmBlock b;
    b.name = name;
    for (std::size_t i = 0; i < dilations.size(); ++i) {
      b.units.push_back(BrmParams::create(store, name + ".brm" + std::to_string(i), channels,
                                          dilations[i], reduction_ratio, se_reduction));
    }
    return b;
  }

  Var forward(const Var& x, Mode mode) const {
    Var h = x;
    for (const auto& u : units) h = brm_forward(h, u, mode);
    return check_finite(add(x, h), name);
  }
};

// ---------------------------------------------------------------------------
// Initial block and resampling

struct InitialBlockParams {
  ConvBnAct conv1;  // stride 2
  ConvBnAct conv2;
  ConvBnAct conv3;

  static InitialBlockParams create(ParamStore& store, const std::string& name, std::size_t c0) {
    return {ConvBnAct::create(store, name + ".conv1", ConvSpec::strided(3, c0, 3, 2)),
            ConvBnAct::create(store, name + ".conv2", ConvSpec::same(c0, c0, 3, 3)),
            ConvBnAct::create(store, name + ".conv3", ConvSpec::same(c0, c0, 3, 3))};
  }
};

inline Var initial_block(const Var& x, const InitialBlockParams& p, Mode mode) {
  if (x.shape().c != 3) {
    throw ShapeError("initial block: expected a 3-channel image, got " + x.shape().str());
  }
  return p.conv3.forward(p.conv2.forward(p.conv1.forward(x, mode), mode), mode);
}

/// Stride-2 3×3 conv + norm + ReLU.
inline ConvBnAct make_downsample(ParamStore& store, const std::string& name, std::size_t in_channels,
                                 std::size_t out_channels) {
  return ConvBnAct::create(store, name, ConvSpec::strided(in_channels, out_channels, 3, 2));
}

inline Var downsample_unit(const Var& x, const ConvBnAct& unit, Mode mode) {
  return unit.forward(x, mode);
}

/// Bilinear resize followed by a 1×1 channel-matching conv + norm + ReLU.
struct UpsampleParams {
  ConvBnAct proj;

  static UpsampleParams create(ParamStore& store, const std::string& name, std::size_t in_channels,
                               std::size_t out_channels) {
    return {ConvBnAct::create(store, name, ConvSpec::same(in_channels, out_channels, 1, 1))};
  }
};

inline Var upsample_unit(const Var& x, const UpsampleParams& p, std::size_t out_h,
                         std::size_t out_w, Mode mode) {
  return p.proj.forward(bilinear_resize(x, out_h, out_w), mode);
}

// ---------------------------------------------------------------------------
// Segmentation heads

enum class HeadType { none, se, psp, aspp };

inline constexpr std::array<std::size_t, 4> kPspBins{1, 2, 3, 6};

struct HeadKind {
  HeadType type = HeadType::aspp;
  std::vector<std::size_t> rates{2, 4, 8};  // aspp only
  std::size_t reduction = 4;
};

inline HeadType parse_head_type(const std::string& s) {
  if (s == "none") return HeadType::none;
  if (s == "se") return HeadType::se;
  if (s == "psp") return HeadType::psp;
  if (s == "aspp") return HeadType::aspp;
  throw ConfigError("unknown head kind '" + s + "' (expected none, se, psp or aspp)");
}

inline std::string head_type_name(HeadType t) {
  switch (t) {
    case HeadType::none: return "none";
    case HeadType::se: return "se";
    case HeadType::psp: return "psp";
    case HeadType::aspp: return "aspp";
  }
  throw ConfigError("unknown head kind");
}

struct HeadParams {
  HeadKind kind;
  std::size_t channels = 0;
  SeParams se;                      // se
  std::vector<ConvBnAct> branches;  // aspp: 1×1 then one 3×3 per rate
  Conv2d pool_conv;                 // aspp image-pool branch
  std::vector<Conv2d> bin_convs;    // psp, one per bin
  ConvBnAct fuse;                   // aspp, psp

  std::size_t reduced() const { return channels / kind.reduction; }

  static HeadParams create(ParamStore& store, const std::string& name, std::size_t channels,
                           const HeadKind& kind) {
    HeadParams p;
    p.kind = kind;
    p.channels = channels;
    if (kind.type == HeadType::none) return p;
    if (kind.reduction == 0 || channels / kind.reduction < 1) {
      throw ConfigError(name + ": head reduction " + std::to_string(kind.reduction) +
                        " too large for C=" + std::to_string(channels));
    }
    const std::size_t cr = p.reduced();
    switch (kind.type) {
      case HeadType::se:
        p.se = SeParams::create(store, name + ".se", channels, kind.reduction);
        break;
      case HeadType::aspp: {
        if (kind.rates.empty()) throw ConfigError(name + ": aspp needs at least one rate");
        p.branches.push_back(
            ConvBnAct::create(store, name + ".branch0", ConvSpec::same(channels, cr, 1, 1)));
        for (std::size_t r : kind.rates) {
          if (r == 0) throw ConfigError(name + ": aspp rates must be >= 1");
          p.branches.push_back(ConvBnAct::create(store, name + ".rate" + std::to_string(r),
                                                 ConvSpec::same(channels, cr, 3, 3, r, r)));
        }
        p.pool_conv = Conv2d::create(store, name + ".pool", ConvSpec::same(channels, cr, 1, 1));
        const std::size_t concat = cr * (p.branches.size() + 1);
        p.fuse = ConvBnAct::create(store, name + ".fuse", ConvSpec::same(concat, channels, 1, 1));
        break;
      }
      case HeadType::psp: {
        for (std::size_t b : kPspBins) {
          p.bin_convs.push_back(Conv2d::create(store, name + ".bin" + std::to_string(b),
                                               ConvSpec::same(channels, cr, 1, 1)));
        }
        const std::size_t concat = channels + cr * kPspBins.size();
        p.fuse = ConvBnAct::create(store, name + ".fuse", ConvSpec::same(concat, channels, 1, 1));
        break;
      }
      case HeadType::none: break;
    }
    return p;
  }
};

/// Output has the same shape as the input for every head kind.
inline Var head_forward(const Var& x, const HeadParams& p, Mode mode) {
  const Shape s = x.shape();
  switch (p.kind.type) {
    case HeadType::none: return x;
    case HeadType::se: return se_attention(x, p.se);
    case HeadType::aspp: {
      std::vector<Var> parts;
      for (const auto& b : p.branches) parts.push_back(b.forward(x, mode));
      Var pooled = relu(p.pool_conv(global_avg_pool(x)));
      parts.push_back(bilinear_resize(pooled, s.h, s.w));
      return p.fuse.forward(concat_channels(parts), mode);
    }
    case HeadType::psp: {
      std::vector<Var> parts{x};
      for (std::size_t i = 0; i < kPspBins.size(); ++i) {
        Var pooled = relu(p.bin_convs[i](adaptive_avg_pool(x, kPspBins[i], kPspBins[i])));
        parts.push_back(bilinear_resize(pooled, s.h, s.w));
      }
      return p.fuse.forward(concat_channels(parts), mode);
    }
  }
  throw ConfigError("unknown head kind");
}

// ---------------------------------------------------------------------------

struct ClassifierParams {
  std::size_t num_classes = 0;
  Conv2d conv;

  static ClassifierParams create(ParamStore& store, const std::string& name,
                                 std::size_t in_channels, std::size_t num_classes) {
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    return {num_classes,
            Conv2d::create(store, name, ConvSpec::same(in_channels, num_classes, 1, 1))};
  }
};

/// 1×1 conv to class logits, then bilinear resize to the requested extent.
inline Var classifier(const Var& x, const ClassifierParams& p, std::size_t target_h,
                      std::size_t target_w) {
  return check_finite(bilinear_resize(p.conv(x), target_h, target_w), "classifier");
}

}  // namespace mfpnet
