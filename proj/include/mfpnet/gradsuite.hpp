#pragma once

// Finite-difference suite over every differentiable op, every composite block
// and a whole model. Composite parameter checks run in eval mode; train mode is
// checked with respect to inputs.

#include <chrono>
#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/blocks.hpp"
#include "mfpnet/gradcheck.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/sgcn.hpp"
#include "mfpnet/train.hpp"

namespace mfpnet {

inline constexpr double kGradTolerance = 1e-4;

struct SuiteCase {
  std::string name;
  GradCheckResult result;
  double seconds = 0.0;
  bool passed(double tol = kGradTolerance) const { return result.max_rel_error < tol; }
};

namespace detail {

// Values bounded away from zero so ReLU kinks stay outside the probe interval.
inline Tensor away_from_zero(Shape s, std::uint64_t seed) {
  Tensor t = random_tensor(s, seed, -1.0, 1.0);
  for (auto& v : t.data()) v = v < 0 ? v - 0.1 : v + 0.1;
  return t;
}

inline std::vector<Var> leaves_of(std::initializer_list<std::vector<Var>> groups) {
  std::vector<Var> out;
  for (const auto& g : groups) out.insert(out.end(), g.begin(), g.end());
  return out;
}

}  // namespace detail

class GradientSuite {
 public:
  using Reporter = std::function<void(const SuiteCase&)>;

  explicit GradientSuite(Reporter report = {}) : report_(std::move(report)) {}

  const std::vector<SuiteCase>& cases() const { return cases_; }

  bool all_passed(double tol = kGradTolerance) const {
    for (const auto& c : cases_) {
      if (!c.passed(tol)) return false;
    }
    return !cases_.empty();
  }

  double worst() const {
    double w = 0.0;
    for (const auto& c : cases_) w = std::max(w, c.result.max_rel_error);
    return w;
  }

  void run_ops() {
    using K = std::span<const Var>;
    const GradCheckOptions o{1e-5, 11, 0};

    op("conv2d 3x3 dilation 2", {random_tensor({2, 3, 6, 7}, 1), random_tensor({4, 3, 3, 3}, 2),
                                 random_tensor({1, 4, 1, 1}, 3)},
       [](K v) { return conv2d(v[0], v[1], v[2], ConvSpec::same(3, 4, 3, 3, 2, 2)); }, o);
    op("conv2d 3x3 stride 2", {random_tensor({1, 2, 7, 6}, 4), random_tensor({3, 2, 3, 3}, 5),
                               random_tensor({1, 3, 1, 1}, 6)},
       [](K v) { return conv2d(v[0], v[1], v[2], ConvSpec::strided(2, 3, 3, 2)); }, o);
    op("conv2d 3x1 dilation 3", {random_tensor({1, 2, 8, 5}, 7), random_tensor({2, 2, 3, 1}, 8),
                                 random_tensor({1, 2, 1, 1}, 9)},
       [](K v) { return conv2d(v[0], v[1], v[2], ConvSpec::same(2, 2, 3, 1, 3, 3)); }, o);
    op("conv2d 1x3 no bias", {random_tensor({1, 3, 4, 6}, 10), random_tensor({2, 3, 1, 3}, 11)},
       [](K v) { return conv2d(v[0], v[1], Var(), ConvSpec::same(3, 2, 1, 3, 1, 1, false)); }, o);

    op("batch_norm train", {random_tensor({2, 3, 3, 4}, 12), random_tensor({1, 3, 1, 1}, 13, 0.5, 1.5),
                            random_tensor({1, 3, 1, 1}, 14)},
       [](K v) {
         RunningStats stats(3);
         return batch_norm(v[0], v[1], v[2], stats, Mode::train);
       }, o);
    op("batch_norm eval", {random_tensor({2, 3, 3, 4}, 15), random_tensor({1, 3, 1, 1}, 16),
                           random_tensor({1, 3, 1, 1}, 17)},
       [](K v) {
         RunningStats stats(3);
         for (std::size_t c = 0; c < 3; ++c) {
           stats.mean[c] = 0.1 * static_cast<double>(c);
           stats.var[c] = 0.5 + static_cast<double>(c);
         }
         return batch_norm(v[0], v[1], v[2], stats, Mode::eval);
       }, o);

    op("relu", {detail::away_from_zero({2, 2, 3, 3}, 18)}, [](K v) { return relu(v[0]); }, o);
    op("sigmoid", {random_tensor({2, 2, 3, 3}, 19, -3, 3)}, [](K v) { return sigmoid(v[0]); }, o);
    op("add", {random_tensor({1, 2, 3, 3}, 20), random_tensor({1, 2, 3, 3}, 21)},
       [](K v) { return add(v[0], v[1]); }, o);
    op("scale", {random_tensor({1, 2, 3, 3}, 22)}, [](K v) { return scale(v[0], -0.7); }, o);
    op("channel_scale", {random_tensor({2, 3, 4, 4}, 23), random_tensor({2, 3, 1, 1}, 24)},
       [](K v) { return channel_scale(v[0], v[1]); }, o);
    op("concat_channels", {random_tensor({1, 2, 3, 3}, 25), random_tensor({1, 3, 3, 3}, 26)},
       [](K v) { return concat_channels({v[0], v[1]}); }, o);
    op("reshape", {random_tensor({1, 2, 3, 4}, 27)},
       [](K v) { return reshape(v[0], Shape{1, 1, 2, 12}); }, o);
    op("global_avg_pool", {random_tensor({2, 3, 4, 5}, 28)}, [](K v) { return global_avg_pool(v[0]); }, o);
    op("avg_pool 2", {random_tensor({1, 2, 6, 4}, 29)}, [](K v) { return avg_pool(v[0], 2); }, o);
    op("adaptive_avg_pool 3x3 from 7x8", {random_tensor({1, 2, 7, 8}, 30)},
       [](K v) { return adaptive_avg_pool(v[0], 3, 3); }, o);
    op("bilinear up 3x4 to 7x9", {random_tensor({1, 2, 3, 4}, 31)},
       [](K v) { return bilinear_resize(v[0], 7, 9); }, o);
    op("bilinear down 8x6 to 3x4", {random_tensor({1, 2, 8, 6}, 32)},
       [](K v) { return bilinear_resize(v[0], 3, 4); }, o);
    op("matmul", {random_tensor({2, 1, 3, 4}, 33), random_tensor({2, 1, 4, 5}, 34)},
       [](K v) { return matmul(v[0], v[1]); }, o);
    op("matmul broadcast", {random_tensor({1, 1, 3, 3}, 35), random_tensor({2, 1, 3, 5}, 36)},
       [](K v) { return matmul(v[0], v[1]); }, o);
    op("transpose", {random_tensor({2, 1, 3, 5}, 37)}, [](K v) { return transpose(v[0]); }, o);
    op("softmax_rows", {random_tensor({2, 1, 4, 5}, 38, -2, 2)}, [](K v) { return softmax_rows(v[0]); }, o);
    op("symmetrize", {random_tensor({1, 1, 5, 5}, 39)}, [](K v) { return symmetrize(v[0]); }, o);
    op("normalize_adjacency", {random_tensor({2, 1, 6, 6}, 40, 0.05, 1.0)},
       [](K v) { return normalize_adjacency(v[0]); }, o);
    op("weighted_sum", {random_tensor({1, 2, 3, 3}, 41)},
       [](K v) { return weighted_sum(v[0], random_tensor({1, 2, 3, 3}, 42)); }, o);
    op("sum_squares", {random_tensor({1, 2, 3, 3}, 43)}, [](K v) { return sum_squares(v[0]); }, o);

    std::vector<std::uint8_t> labels{0, 2, 1, 255, 1, 0, 2, 2};
    op("cross_entropy", {random_tensor({2, 3, 2, 2}, 44, -2, 2)},
       [labels](K v) { return cross_entropy(v[0], labels); }, o);
  }

  void run_blocks() {
    const GradCheckOptions o{1e-5, 5, 0};
    {
      ParamStore store(5);
      auto se = SeParams::create(store, "se", 8, 4);
      Var x(random_tensor({2, 8, 4, 4}, 50), true);
      leaves("se attention", [&] { return se_attention(x, se); },
             detail::leaves_of({{x}, store.vars()}), o);
    }
    {
      ParamStore store(3);
      auto brm = BrmParams::create(store, "brm", 8, 2);
      Var x(random_tensor({1, 8, 6, 6}, 51), true);
      warm_stats(store);
      leaves("brm eval, input and params", [&] { return brm_forward(x, brm, Mode::eval); },
             detail::leaves_of({{x}, brm.branch_params()}), o);
      leaves("brm train, input", [&] { return brm_forward(x, brm, Mode::train); }, {x}, o);
    }
    {
      ParamStore store(13);
      auto block = BrmBlock::create(store, "block", 8, {2, 4}, 2, 4);
      Var x(random_tensor({1, 8, 8, 8}, 52), true);
      warm_stats(store);
      leaves("brm block eval", [&] { return block.forward(x, Mode::eval); }, {x}, o);
    }
    {
      ParamStore store(7);
      auto sg = SgcnParams::create(store, "sgcn", 6, 3, 1, 2);
      Var x(random_tensor({2, 6, 4, 6}, 53), true);
      leaves("sgcn propagate", [&] { return propagate(x, sg); },
             detail::leaves_of({{x}, sg.all_params()}), o);
    }
    {
      ParamStore store(9);
      auto sg = SgcnParams::create(store, "sgcn", 4, 4, 2, 1);
      Var x(random_tensor({1, 4, 3, 3}, 54), true);
      leaves("sgcn propagate, two layers, no pooling", [&] { return propagate(x, sg); },
             detail::leaves_of({{x}, sg.all_params()}), o);
    }
    for (HeadType t : {HeadType::aspp, HeadType::psp, HeadType::se}) {
      ParamStore store(17);
      HeadKind kind;
      kind.type = t;
      kind.rates = {1, 2};
      auto head = HeadParams::create(store, "head", 8, kind);
      warm_stats(store);
      Var x(random_tensor({1, 8, 6, 6}, 55), true);
      leaves("head " + head_type_name(t) + " eval",
             [&] { return head_forward(x, head, Mode::eval); },
             detail::leaves_of({{x}, store.vars()}), o);
    }
    {
      ParamStore store(19);
      auto up = UpsampleParams::create(store, "up", 4, 3);
      warm_stats(store);
      Var x(random_tensor({1, 4, 3, 3}, 56), true);
      leaves("upsample unit eval", [&] { return upsample_unit(x, up, 6, 6, Mode::eval); },
             detail::leaves_of({{x}, store.vars()}), o);
    }
  }

  /// Whole-model check; params are probed at most `per_leaf` times each. Norm
  /// statistics are first calibrated with train-mode passes so eval-mode
  /// activations have unit scale.
  void run_model(const ModelConfig& cfg, std::size_t per_leaf = 3) {
    Model model(cfg, 3);
    const auto [h, w] = cfg.input_hw;
    {
      NoGradGuard g;
      for (std::uint64_t s = 0; s < 40; ++s) {
        model.forward(random_tensor({4, 3, h, w}, 100 + s), Mode::train);
      }
    }
    Var x(random_tensor({1, 3, h, w}, 62), true);
    leaves("model eval, input and params", [&] { return model.forward(x, Mode::eval); },
           detail::leaves_of({{x}, model.registry().vars()}), {1e-5, 3, per_leaf});
    Var xb(random_tensor({2, 3, h, w}, 63), true);
    leaves("model train, input", [&] { return model.forward(xb, Mode::train); }, {xb},
           {1e-5, 13, 64});
  }

  void run_all(const ModelConfig& model_cfg) {
    run_ops();
    run_blocks();
    run_model(model_cfg);
  }

 private:
  void record(std::string name, const std::function<GradCheckResult()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    SuiteCase c{std::move(name), fn(), 0.0};
    c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    cases_.push_back(c);
    if (report_) report_(cases_.back());
  }

  void op(std::string name, std::vector<Tensor> inputs,
          std::function<Var(std::span<const Var>)> fn, const GradCheckOptions& o) {
    record(std::move(name), [&] { return grad_check(fn, inputs, o); });
  }

  void leaves(std::string name, const std::function<Var()>& fn, std::vector<Var> ls,
              const GradCheckOptions& o) {
    record(std::move(name), [&] { return grad_check_leaves(fn, ls, o); });
  }

  // Non-trivial running statistics so eval-mode norm is a real affine map.
  static void warm_stats(ParamStore& store) {
    Rng rng(77);
    for (const auto& b : store.buffers()) {
      for (auto& v : b.values()) v = b.is_mean ? rng.uniform(-0.2, 0.2) : rng.uniform(0.5, 1.5);
    }
  }

  Reporter report_;
  std::vector<SuiteCase> cases_;
};

}  // namespace mfpnet
