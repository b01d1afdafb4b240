#pragma once

// Exact parameter and FLOP accounting.
//
// FLOP convention (printed in every report header): one multiply-accumulate
// is 2 FLOPs; conv bias adds 1 per output element; batch norm and bilinear
// resize 2 per output element; ReLU, residual add, channel gating and scalar
// scaling 1 per element; sigmoid and softmax 4 per element; average pooling 1
// per input element read; adjacency symmetrization 2 and normalization 3 per
// matrix entry; reshape, transpose and concatenation are free. Counts are for a
// single image in inference mode.

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "mfpnet/blocks.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/network.hpp"

namespace mfpnet {

inline constexpr const char* kFlopConvention =
    "FLOPs: 1 MAC = 2; conv bias 1/output; norm, bilinear 2/element; relu, add, gate, scale "
    "1/element; sigmoid, softmax 4/element; pooling 1/input read; adjacency sym 2, norm 3/entry";

struct CostRow {
  std::string layer;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
};

struct CostTable {
  std::vector<CostRow> rows;

  std::uint64_t total_params() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.params;
    return t;
  }
  std::uint64_t total_flops() const {
    std::uint64_t t = 0;
    for (const auto& r : rows) t += r.flops;
    return t;
  }

  CostRow& row(const std::string& layer) {
    auto it = index_.find(layer);
    if (it != index_.end()) return rows[it->second];
    index_.emplace(layer, rows.size());
    rows.push_back({layer, 0, 0});
    return rows.back();
  }

  const CostRow* find(const std::string& layer) const {
    auto it = index_.find(layer);
    return it == index_.end() ? nullptr : &rows[it->second];
  }

 private:
  std::unordered_map<std::string, std::size_t> index_;
};

/// One row per layer; a layer's count is the number of scalars in its registered tensors.
inline CostTable count_params(const Model& model) {
  CostTable t;
  for (const auto& p : model.registry().params()) {
    t.row(layer_of(p.name)).params += p.var.numel();
  }
  return t;
}

namespace detail {

struct Extent {
  std::uint64_t h = 0;
  std::uint64_t w = 0;
  std::uint64_t area() const { return h * w; }
};

/// Walks the architecture analytically, one row per layer or op group.
class FlopPlanner {
 public:
  explicit FlopPlanner(CostTable& table) : t_(table) {}

  static std::uint64_t conv_out(std::uint64_t in, std::uint64_t k, std::uint64_t s,
                                std::uint64_t p, std::uint64_t d) {
    return (in + 2 * p - d * (k - 1) - 1) / s + 1;
  }

  // kh×kw conv with 'same' padding for the given dilation and stride.
  Extent conv(const std::string& name, std::uint64_t cin, std::uint64_t cout, std::uint64_t kh,
              std::uint64_t kw, Extent in, std::uint64_t stride = 1, std::uint64_t dil = 1,
              bool bias = true) {
    const Extent out{conv_out(in.h, kh, stride, dil * (kh - 1) / 2, dil),
                     conv_out(in.w, kw, stride, dil * (kw - 1) / 2, dil)};
    std::uint64_t f = 2 * kh * kw * cin * cout * out.area();
    if (bias) f += cout * out.area();
    t_.row(name).flops += f;
    return out;
  }

  Extent conv_bn_act(const std::string& name, std::uint64_t cin, std::uint64_t cout,
                     std::uint64_t kh, std::uint64_t kw, Extent in, std::uint64_t stride = 1,
                     std::uint64_t dil = 1, bool relu = true) {
    const Extent out = conv(name, cin, cout, kh, kw, in, stride, dil);
    t_.row(name).flops += 2 * cout * out.area() + (relu ? cout * out.area() : 0);
    return out;
  }

  void se(const std::string& name, std::uint64_t c, std::uint64_t hidden, Extent in) {
    t_.row(name + ".pool").flops += c * in.area();
    conv(name + ".fc1", c, hidden, 1, 1, {1, 1});
    t_.row(name + ".fc1").flops += hidden;  // relu
    conv(name + ".fc2", hidden, c, 1, 1, {1, 1});
    t_.row(name + ".fc2").flops += 4 * c;  // sigmoid
    t_.row(name + ".gate").flops += c * in.area();
  }

  void brm(const std::string& name, std::uint64_t c, std::uint64_t ratio, std::uint64_t se_red,
           std::uint64_t dil, Extent in) {
    const std::uint64_t ci = c / ratio;
    conv_bn_act(name + ".bottleneck", c, ci, 3, 3, in);
    conv_bn_act(name + ".fact_a1", ci, ci, 3, 1, in);
    conv_bn_act(name + ".fact_a2", ci, ci, 1, 3, in);
    se(name + ".se", ci, ci / se_red, in);
    conv_bn_act(name + ".fact_b1", ci, ci, 3, 1, in, 1, dil);
    conv_bn_act(name + ".fact_b2", ci, ci, 1, 3, in, 1, dil);
    conv_bn_act(name + ".recover", ci, c, 1, 1, in, 1, 1, false);
    t_.row(name + ".residual").flops += c * in.area();
  }

  void block(const std::string& name, std::uint64_t c, const std::vector<std::size_t>& dilations,
             std::uint64_t ratio, std::uint64_t se_red, Extent in) {
    for (std::size_t i = 0; i < dilations.size(); ++i) {
      brm(name + ".brm" + std::to_string(i), c, ratio, se_red, dilations[i], in);
    }
    t_.row(name + ".residual").flops += c * in.area();
  }

  void sgcn(const std::string& name, std::uint64_t c, std::uint64_t d, std::uint64_t pool,
            std::uint64_t layers, Extent in) {
    if (pool > 1) t_.row(name + ".pool").flops += c * in.area();
    const Extent g{in.h / pool, in.w / pool};
    const std::uint64_t n = g.area();
    conv(name + ".proj", c, d, 1, 1, g);
    t_.row(name + ".delta").flops += 2 * d * d * n;
    t_.row(name + ".psi").flops += 2 * d * d * n;
    // scores, 1/sqrt(d) scale, row softmax, symmetrize, normalize
    t_.row(name + ".adjacency").flops += 2 * n * d * n + n * n + 4 * n * n + 2 * n * n + 3 * n * n;
    for (std::uint64_t l = 0; l < layers; ++l) {
      t_.row(name + ".theta" + std::to_string(l)).flops += 2 * d * d * n + 2 * d * n * n + d * n;
    }
    t_.row(name + ".q").flops += 2 * d * d * n;
    t_.row(name + ".upsample").flops += 2 * d * in.area();
    conv(name + ".reproj", d, c, 1, 1, in);
  }

  void head(const std::string& name, const HeadKind& kind, std::uint64_t c, Extent in) {
    const std::uint64_t cr = c / kind.reduction;
    switch (kind.type) {
      case HeadType::none: return;
      case HeadType::se: se(name + ".se", c, cr, in); return;
      case HeadType::aspp: {
        conv_bn_act(name + ".branch0", c, cr, 1, 1, in);
        for (std::size_t r : kind.rates) {
          conv_bn_act(name + ".rate" + std::to_string(r), c, cr, 3, 3, in, 1, r);
        }
        t_.row(name + ".pool").flops += c * in.area();
        conv(name + ".pool", c, cr, 1, 1, {1, 1});
        t_.row(name + ".pool").flops += cr + 2 * cr * in.area();  // relu, broadcast resize
        const std::uint64_t concat = cr * (kind.rates.size() + 2);
        conv_bn_act(name + ".fuse", concat, c, 1, 1, in);
        return;
      }
      case HeadType::psp: {
        for (std::size_t b : kPspBins) {
          const std::string bn = name + ".bin" + std::to_string(b);
          std::uint64_t reads = 0;
          for (std::size_t i = 0; i < b; ++i) {
            const auto [y0, y1] = kernels::adaptive_bin(i, in.h, b);
            for (std::size_t j = 0; j < b; ++j) {
              const auto [x0, x1] = kernels::adaptive_bin(j, in.w, b);
              reads += (y1 - y0) * (x1 - x0);
            }
          }
          t_.row(bn).flops += c * reads;
          conv(bn, c, cr, 1, 1, {b, b});
          t_.row(bn).flops += cr * b * b + 2 * cr * in.area();
        }
        conv_bn_act(name + ".fuse", c + cr * kPspBins.size(), c, 1, 1, in);
        return;
      }
    }
  }

  void add(const std::string& name, std::uint64_t flops) { t_.row(name).flops += flops; }

 private:
  CostTable& t_;
};

}  // namespace detail

/// Analytic FLOPs for one image of size input_hw.
inline CostTable count_flops(const ModelConfig& cfg, std::array<std::size_t, 2> input_hw) {
  if (input_hw[0] % 16 != 0 || input_hw[1] % 16 != 0 || input_hw[0] == 0 || input_hw[1] == 0) {
    throw ShapeError("count_flops: input " + std::to_string(input_hw[0]) + "x" +
                     std::to_string(input_hw[1]) + " must be a positive multiple of 16");
  }
  cfg.check_input_hw(input_hw[0], input_hw[1]);
  CostTable t;
  detail::FlopPlanner plan(t);
  using detail::Extent;
  const auto& ch = cfg.stage_channels;
  const std::array<std::uint64_t, 4> widths{cfg.c0, ch[0], ch[1], ch[2]};

  Extent x{input_hw[0], input_hw[1]};
  x = plan.conv_bn_act("initial.conv1", 3, cfg.c0, 3, 3, x, 2);
  x = plan.conv_bn_act("initial.conv2", cfg.c0, cfg.c0, 3, 3, x);
  x = plan.conv_bn_act("initial.conv3", cfg.c0, cfg.c0, 3, 3, x);
  const Extent f = x;
  std::array<Extent, 3> e;
  for (std::size_t i = 0; i < 3; ++i) {
    const std::string idx = std::to_string(i + 1);
    x = plan.conv_bn_act("encoder.down" + idx, widths[i], widths[i + 1], 3, 3, x, 2);
    plan.block("encoder.block" + idx, ch[i], cfg.dilations[i], cfg.brm_reduction,
               cfg.se_reduction, x);
    e[i] = x;
  }
  if (cfg.sgcn_enabled) {
    for (std::size_t i = 0; i < 3; ++i) {
      plan.sgcn("sgcn" + std::to_string(i + 1), ch[i], cfg.sgcn_dims[i], cfg.sgcn_pool,
                cfg.gcn_layers, e[i]);
    }
  }
  for (std::size_t j = 0; j < 3; ++j) {
    const std::size_t scale = 2 - j;
    const Extent here = e[scale];
    if (cfg.sgcn_enabled) plan.add("decoder.fuse" + std::to_string(scale + 1), ch[scale] * here.area());
    plan.block("decoder.block" + std::to_string(j + 4), ch[scale], cfg.dilations[3 + j],
               cfg.brm_reduction, cfg.se_reduction, here);
    const Extent target = scale == 0 ? f : e[scale - 1];
    const std::string up = "decoder.up" + std::to_string(j + 1);
    plan.add(up, 2 * ch[scale] * target.area());
    plan.conv_bn_act(up, ch[scale], widths[scale], 1, 1, target);
  }
  plan.head("head", cfg.head, cfg.c0, f);
  plan.conv("classifier", cfg.c0, cfg.num_classes, 1, 1, f);
  plan.add("classifier", 2 * cfg.num_classes * input_hw[0] * input_hw[1]);
  return t;
}

inline CostTable count_flops(const Model& model, std::array<std::size_t, 2> input_hw) {
  return count_flops(model.config(), input_hw);
}

/// Params and FLOPs merged per layer, in forward order.
inline CostTable cost_table(const Model& model, std::array<std::size_t, 2> input_hw) {
  CostTable t = count_flops(model, input_hw);
  for (const auto& r : count_params(model).rows) t.row(r.layer).params += r.params;
  return t;
}

enum class ReportFormat { text, csv };

namespace detail {

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

inline std::string pct_str(std::uint64_t part, std::uint64_t total) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2)
     << (total == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(total));
  return os.str();
}

}  // namespace detail

/// Columns layer, params, flops, pct (share of total FLOPs), then a total row.
inline std::string report(const CostTable& table, ReportFormat format) {
  const std::uint64_t tf = table.total_flops();
  std::ostringstream os;
  if (format == ReportFormat::csv) {
    os << "layer,params,flops,pct\r\n";
    for (const auto& r : table.rows) {
      os << detail::csv_field(r.layer) << ',' << r.params << ',' << r.flops << ','
         << detail::pct_str(r.flops, tf) << "\r\n";
    }
    os << "total," << table.total_params() << ',' << tf << ",100.00\r\n";
    return os.str();
  }
  std::size_t width = 5;
  for (const auto& r : table.rows) width = std::max(width, r.layer.size());
  os << "# " << kFlopConvention << "\n";
  os << std::left << std::setw(static_cast<int>(width)) << "layer" << std::right << std::setw(14)
     << "params" << std::setw(18) << "flops" << std::setw(9) << "pct" << "\n";
  for (const auto& r : table.rows) {
    os << std::left << std::setw(static_cast<int>(width)) << r.layer << std::right
       << std::setw(14) << r.params << std::setw(18) << r.flops << std::setw(9)
       << detail::pct_str(r.flops, tf) << "\n";
  }
  os << std::left << std::setw(static_cast<int>(width)) << "total" << std::right << std::setw(14)
     << table.total_params() << std::setw(18) << tf << std::setw(9) << "100.00" << "\n";
  return os.str();
}

inline std::string report(const Model& model, std::array<std::size_t, 2> input_hw,
                          ReportFormat format) {
  return report(cost_table(model, input_hw), format);
}

}  // namespace mfpnet
