#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/blocks.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/registry.hpp"
#include "mfpnet/sgcn.hpp"

namespace mfpnet {

/// Full architecture description. Blocks are indexed 1..6 in the arrays as
/// 0..5: encoder blocks 1-3 then decoder blocks 4-6; decoder block 7-i mirrors
/// encoder block i.
struct ModelConfig {
  std::size_t num_classes = 19;
  std::size_t c0 = 32;
  std::array<std::size_t, 3> stage_channels{32, 64, 128};
  std::array<std::size_t, 6> brm_counts{3, 3, 3, 3, 3, 3};
  std::array<std::vector<std::size_t>, 6> dilations{};
  bool sgcn_enabled = true;
  std::array<std::size_t, 3> sgcn_dims{16, 32, 64};
  std::size_t sgcn_pool = 2;
  std::size_t gcn_layers = 1;
  HeadKind head;
  std::array<std::size_t, 2> input_hw{64, 64};
  std::size_t brm_reduction = 2;
  std::size_t se_reduction = 4;

  void validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
      throw ConfigError("model." + field + ": " + why);
    };
    if (num_classes < 1) fail("num_classes", "must be >= 1");
    if (c0 < 1) fail("c0", "must be >= 1");
    for (std::size_t i = 0; i < 3; ++i) {
      if (stage_channels[i] < 1) fail("channels", "stage " + std::to_string(i + 1) + " is 0");
      if (sgcn_enabled && sgcn_dims[i] < 1) {
        fail("sgcn_dims", "scale " + std::to_string(i + 1) + " is 0");
      }
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (brm_counts[i] != brm_counts[5 - i]) {
        fail("brm_counts", "L" + std::to_string(i + 1) + " (" + std::to_string(brm_counts[i]) +
                               ") must equal L" + std::to_string(6 - i) + " (" +
                               std::to_string(brm_counts[5 - i]) + ")");
      }
    }
    for (std::size_t b = 0; b < 6; ++b) {
      if (brm_counts[b] < 1) fail("brm_counts", "L" + std::to_string(b + 1) + " must be >= 1");
      if (dilations[b].size() != brm_counts[b]) {
        fail("dilations", "block " + std::to_string(b + 1) + " lists " +
                              std::to_string(dilations[b].size()) + " rates for " +
                              std::to_string(brm_counts[b]) + " BRMs");
      }
      for (std::size_t r : dilations[b]) {
        if (r < 1) fail("dilations", "block " + std::to_string(b + 1) + " has a rate < 1");
      }
    }
    if (brm_reduction < 1) fail("brm_reduction", "must be >= 1");
    if (se_reduction < 1) fail("se_reduction", "must be >= 1");
    if (sgcn_pool < 1) fail("sgcn_pool", "must be >= 1");
    if (gcn_layers < 1) fail("gcn_layers", "must be >= 1");
    check_input_hw(input_hw[0], input_hw[1]);
  }

  /// Spatial contract for any forward input; throws ShapeError.
  void check_input_hw(std::size_t h, std::size_t w) const {
    if (h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0) {
      throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) +
                       " must be a positive multiple of 16");
    }
    if (sgcn_enabled && ((h / 16) % sgcn_pool != 0 || (w / 16) % sgcn_pool != 0)) {
      throw ShapeError("input " + std::to_string(h) + "x" + std::to_string(w) +
                       " leaves a 1/16-scale map not divisible by the graph pool factor " +
                       std::to_string(sgcn_pool));
    }
  }
};

/// Mirrored config from per-encoder-block dilation schedules; decoder block
/// 7-i reuses encoder block i's schedule and graph dims default to C_i / 2.
inline ModelConfig make_config(std::size_t num_classes, std::size_t c0,
                               std::array<std::size_t, 3> channels,
                               const std::array<std::vector<std::size_t>, 3>& encoder_dilations,
                               std::array<std::size_t, 2> input_hw) {
  ModelConfig c;
  c.num_classes = num_classes;
  c.c0 = c0;
  c.stage_channels = channels;
  for (std::size_t i = 0; i < 3; ++i) {
    c.dilations[i] = encoder_dilations[i];
    c.dilations[5 - i] = encoder_dilations[i];
    c.brm_counts[i] = c.brm_counts[5 - i] = encoder_dilations[i].size();
    c.sgcn_dims[i] = std::max<std::size_t>(1, channels[i] / 2);
  }
  c.input_hw = input_hw;
  return c;
}

/// Three BRMs per block with rates (2,2,2), (4,8,16), (4,8,16); ASPP head with
/// reduction 4. Channel widths are sized for about one million parameters.
inline ModelConfig default_config() {
  return make_config(19, 24, {32, 64, 112}, {{{2, 2, 2}, {4, 8, 16}, {4, 8, 16}}}, {512, 1024});
}

/// Smallest config used for whole-model gradient checks (32×32 input).
inline ModelConfig tiny_config() {
  return make_config(3, 8, {8, 16, 16}, {{{2}, {4}, {4}}}, {32, 32});
}

/// Desk-scale training config: 64×64 input, 3 classes, two BRMs per block.
inline ModelConfig desk_config() {
  return make_config(3, 16, {16, 32, 64}, {{{2, 2}, {4, 8}, {4, 8}}}, {64, 64});
}

using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

class Model {
 public:
  explicit Model(ModelConfig cfg, std::uint64_t seed = 0) : config_(std::move(cfg)), store_(seed) {
    config_.validate();
    const auto& c = config_;
    const auto& ch = c.stage_channels;
    initial_ = InitialBlockParams::create(store_, "initial", c.c0);
    const std::array<std::size_t, 4> widths{c.c0, ch[0], ch[1], ch[2]};
    for (std::size_t i = 0; i < 3; ++i) {
      down_[i] = make_downsample(store_, "encoder.down" + std::to_string(i + 1), widths[i],
                                 widths[i + 1]);
      encoder_[i] = BrmBlock::create(store_, "encoder.block" + std::to_string(i + 1), ch[i],
                                     c.dilations[i], c.brm_reduction, c.se_reduction);
    }
    if (c.sgcn_enabled) {
      for (std::size_t i = 0; i < 3; ++i) {
        sgcn_.push_back(SgcnParams::create(store_, "sgcn" + std::to_string(i + 1), ch[i],
                                           c.sgcn_dims[i], c.gcn_layers, c.sgcn_pool));
      }
    }
    // Decoder block 4 runs at encoder scale 3, block 5 at 2, block 6 at 1.
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t scale = 2 - j;
      decoder_[j] = BrmBlock::create(store_, "decoder.block" + std::to_string(j + 4), ch[scale],
                                     c.dilations[3 + j], c.brm_reduction, c.se_reduction);
      up_[j] = UpsampleParams::create(store_, "decoder.up" + std::to_string(j + 1), ch[scale],
                                      widths[scale]);
    }
    head_ = HeadParams::create(store_, "head", c.c0, c.head);
    classifier_ = ClassifierParams::create(store_, "classifier", c.c0, c.num_classes);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParamStore& registry() { return store_; }
  const ParamStore& registry() const { return store_; }

  const InitialBlockParams& initial() const { return initial_; }
  const ConvBnAct& down(std::size_t i) const { return down_.at(i); }
  const BrmBlock& encoder_block(std::size_t i) const { return encoder_.at(i); }
  const BrmBlock& decoder_block(std::size_t j) const { return decoder_.at(j); }
  const UpsampleParams& up(std::size_t j) const { return up_.at(j); }
  const std::vector<SgcnParams>& sgcn() const { return sgcn_; }
  const HeadParams& head() const { return head_; }
  const ClassifierParams& classifier_params() const { return classifier_; }

  /// image (N,3,H,W) -> logits (N,K,H,W).
  Var forward(const Var& image, Mode mode, ShapeTrace* trace = nullptr) const {
    const Shape& s = image.shape();
    if (s.c != 3) throw ShapeError("forward: expected a 3-channel image, got " + s.str());
    config_.check_input_hw(s.h, s.w);
    if (!image.value().all_finite()) throw NumericError("non-finite values in layer 'input'");
    auto record = [&](const char* name, const Var& v) {
      if (trace != nullptr) trace->emplace_back(name, v.shape());
    };

    Var f = initial_block(image, initial_, mode);
    record("initial", f);
    std::array<Var, 3> e;
    Var x = f;
    static constexpr const char* kEnc[] = {"encoder.block1", "encoder.block2", "encoder.block3"};
    for (std::size_t i = 0; i < 3; ++i) {
      x = encoder_[i].forward(downsample_unit(x, down_[i], mode), mode);
      e[i] = x;
      record(kEnc[i], x);
    }

    static constexpr const char* kDec[] = {"decoder.block4", "decoder.block5", "decoder.block6"};
    static constexpr const char* kUp[] = {"decoder.up1", "decoder.up2", "decoder.up3"};
    static constexpr const char* kFuse[] = {"decoder.fuse3", "decoder.fuse2", "decoder.fuse1"};
    Var d = e[2];
    for (std::size_t j = 0; j < 3; ++j) {
      const std::size_t scale = 2 - j;
      if (config_.sgcn_enabled) {
        Var m = propagate(e[scale], sgcn_[scale]);
        d = check_finite(add(d, m), kFuse[j]);
      }
      d = decoder_[j].forward(d, mode);
      record(kDec[j], d);
      const Shape& target = scale == 0 ? f.shape() : e[scale - 1].shape();
      d = upsample_unit(d, up_[j], target.h, target.w, mode);
      record(kUp[j], d);
    }
    Var h = head_forward(d, head_, mode);
    record("head", h);
    Var logits = classifier(h, classifier_, s.h, s.w);
    record("logits", logits);
    return logits;
  }

  Var forward(const Tensor& image, Mode mode, ShapeTrace* trace = nullptr) const {
    return forward(Var(image), mode, trace);
  }

  void zero_grad() { store_.zero_grad(); }

 private:
  ModelConfig config_;
  ParamStore store_;
  InitialBlockParams initial_;
  std::array<ConvBnAct, 3> down_;
  std::array<BrmBlock, 3> encoder_;
  std::vector<SgcnParams> sgcn_;
  std::array<BrmBlock, 3> decoder_;
  std::array<UpsampleParams, 3> up_;
  HeadParams head_;
  ClassifierParams classifier_;
};

inline Model build(const ModelConfig& config, std::uint64_t seed = 0) { return Model(config, seed); }

}  // namespace mfpnet
