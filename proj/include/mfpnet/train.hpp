#pragma once

// Pixel-wise cross-entropy, poly learning-rate schedule, SGD/Adam with
// decoupled weight decay, the training loop and mIoU evaluation.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/data.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // d loss / d logits
  std::size_t counted = 0;
};

/// Mean over non-ignored pixels of -log softmax(logits)[label]. `labels` holds
/// N·H·W entries in (n, y, x) order.
inline LossResult cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                                std::uint8_t ignore = kIgnoreLabel) {
  const Shape& s = logits.shape();
  if (labels.size() != s.n * s.h * s.w) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     s.str());
  }
  LossResult r;
  r.grad = Tensor(s);
  const std::size_t plane = s.plane();
  std::vector<double> prob(s.c);
  double total = 0.0;
  for (std::size_t n = 0; n < s.n; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const std::uint8_t t = labels[n * plane + i];
      if (t == ignore) continue;
      if (t >= s.c) {
        throw FormatError("cross_entropy: label " + std::to_string(t) + " outside [0, " +
                          std::to_string(s.c) + ")");
      }
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < s.c; ++k) mx = std::max(mx, logits[(n * s.c + k) * plane + i]);
      double z = 0.0;
      for (std::size_t k = 0; k < s.c; ++k) {
        prob[k] = std::exp(logits[(n * s.c + k) * plane + i] - mx);
        z += prob[k];
      }
      total += std::log(z) - (logits[(n * s.c + t) * plane + i] - mx);
      for (std::size_t k = 0; k < s.c; ++k) {
        r.grad[(n * s.c + k) * plane + i] = prob[k] / z - (k == t ? 1.0 : 0.0);
      }
      ++r.counted;
    }
  }
  if (r.counted == 0) throw NumericError("cross_entropy: every pixel is ignored");
  const double inv = 1.0 / static_cast<double>(r.counted);
  r.loss = total * inv;
  for (auto& g : r.grad.data()) g *= inv;
  return r;
}

/// Scalar loss node; backward scales the cached logits gradient by the upstream seed.
inline Var cross_entropy(const Var& logits, std::span<const std::uint8_t> labels,
                         std::uint8_t ignore = kIgnoreLabel) {
  LossResult r = cross_entropy(logits.value(), labels, ignore);
  Tensor out(Shape{1, 1, 1, 1});
  out[0] = r.loss;
  auto grad = std::make_shared<Tensor>(std::move(r.grad));
  return detail::make_op(std::move(out), {logits}, [grad](Node& self) {
    const double seed = detail::grad_of(self)[0];
    Tensor g = *grad;
    for (auto& v : g.data()) v *= seed;
    detail::accumulate(*self.parents[0], g);
  });
}

inline std::vector<std::uint8_t> stack_labels(std::span<const LabelMap* const> maps) {
  std::vector<std::uint8_t> out;
  for (const LabelMap* m : maps) out.insert(out.end(), m->labels.begin(), m->labels.end());
  return out;
}

// ---------------------------------------------------------------------------
// Schedule and optimizers

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("train.optimizer: unknown optimizer '" + s + "' (expected sgd or adam)");
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::sgd;
  double lr_in = 4.5e-2;
  double weight_decay = 2e-5;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t total_iter = 500;
  std::size_t batch = 4;
  std::uint64_t seed = 0;
  double poly_power = 0.9;

  void validate(bool allow_zero_lr = true) const {
    auto fail = [](const std::string& f, const std::string& why) {
      throw ConfigError("train." + f + ": " + why);
    };
    if (!(lr_in > 0.0) && !(allow_zero_lr && lr_in == 0.0)) fail("lr", "must be > 0");
    if (!(weight_decay >= 0.0)) fail("weight_decay", "must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum", "must be in [0, 1)");
    if (!(beta1 >= 0.0 && beta1 < 1.0)) fail("beta1", "must be in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) fail("beta2", "must be in [0, 1)");
    if (!(eps > 0.0)) fail("eps", "must be > 0");
    if (total_iter < 1) fail("total_iter", "must be >= 1");
    if (batch < 1) fail("batch", "must be >= 1");
    if (!(poly_power > 0.0)) fail("poly_power", "must be > 0");
  }
};

inline double poly_lr(std::size_t iter, double lr_in, std::size_t total_iter, double power = 0.9) {
  if (total_iter == 0) throw ConfigError("poly_lr: total_iter must be >= 1");
  if (iter >= total_iter) return 0.0;
  return lr_in * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(total_iter), power);
}

inline double poly_lr(std::size_t iter, const TrainConfig& cfg) {
  return poly_lr(iter, cfg.lr_in, cfg.total_iter, cfg.poly_power);
}

namespace detail {
inline void require_same(const Tensor& p, const Tensor& g, const char* op) {
  if (p.shape() != g.shape()) {
    throw ShapeError(std::string(op) + ": parameter " + p.shape().str() + " vs gradient " +
                     g.shape().str());
  }
}
}  // namespace detail

/// p <- p - lr·wd·p; v <- μ·v + g; p <- p - lr·v.
inline void sgd_step(Tensor& param, const Tensor& grad, Tensor& velocity, double lr,
                     double momentum = 0.9, double wd = 0.0) {
  detail::require_same(param, grad, "sgd_step");
  if (velocity.shape() != param.shape()) velocity = Tensor(param.shape());
  auto p = param.data();
  auto g = grad.data();
  auto v = velocity.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * wd * p[i];
    v[i] = momentum * v[i] + g[i];
    p[i] -= lr * v[i];
  }
}

struct AdamState {
  Tensor m;
  Tensor v;
  std::uint64_t t = 0;
};

/// Decoupled decay, then the bias-corrected Adam update.
inline void adam_step(Tensor& param, const Tensor& grad, AdamState& st, double lr,
                      double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8,
                      double wd = 0.0) {
  detail::require_same(param, grad, "adam_step");
  if (st.m.shape() != param.shape()) {
    st.m = Tensor(param.shape());
    st.v = Tensor(param.shape());
    st.t = 0;
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(st.t));
  auto p = param.data();
  auto g = grad.data();
  auto m = st.m.data();
  auto v = st.v.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] -= lr * wd * p[i];
    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
    p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps);
  }
}

/// Optimizer state for a fixed parameter list; parameters without a gradient
/// are stepped with a zero gradient.
class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::vector<Var> params)
      : cfg_(cfg), params_(std::move(params)), sgd_(params_.size()), adam_(params_.size()) {}

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var& p = params_[i];
      Tensor& value = p.mutable_value();
      Tensor g(value.shape());
      if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), g.data().begin());
      if (cfg_.optimizer == OptimizerKind::sgd) {
        sgd_step(value, g, sgd_[i], lr, cfg_.momentum, cfg_.weight_decay);
      } else {
        adam_step(value, g, adam_[i], lr, cfg_.beta1, cfg_.beta2, cfg_.eps, cfg_.weight_decay);
      }
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<Var> params_;
  std::vector<Tensor> sgd_;
  std::vector<AdamState> adam_;
};

// ---------------------------------------------------------------------------
// Training loop

struct LogRow {
  std::size_t iter = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  std::vector<LogRow> log;
  double seconds = 0.0;
};

inline std::string log_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "iter,lr,loss\n";
  for (const auto& r : log) os << r.iter << ',' << r.lr << ',' << r.loss << '\n';
  return os.str();
}

/// Epoch-wise shuffled sample order; epoch e is a permutation seeded by (seed, e).
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::uint64_t seed) : count_(count), seed_(seed) {
    if (count == 0) throw ConfigError("train: empty dataset");
  }

  std::vector<std::size_t> next(std::size_t batch) {
    std::vector<std::size_t> out;
    while (out.size() < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(count_);
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(mix_seed(seed_, 0x5A3D0000ULL + epoch_++));
    for (std::size_t i = count_; i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order_[i - 1], order_[j]);
    }
    pos_ = 0;
  }

  std::size_t count_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

using ProgressFn = std::function<void(const LogRow&)>;

inline TrainResult train(Model& model, const std::vector<SegmentationSample>& data,
                         const TrainConfig& cfg, const ProgressFn& progress = {}) {
  cfg.validate();
  for (const auto& s : data) s.validate(model.config().num_classes);
  TrainResult result;
  const auto t0 = std::chrono::steady_clock::now();
  Optimizer opt(cfg, model.registry().vars());
  BatchSampler sampler(data.size(), cfg.seed);
  for (std::size_t iter = 0; iter < cfg.total_iter; ++iter) {
    const auto idx = sampler.next(cfg.batch);
    std::vector<const Image*> images;
    std::vector<const LabelMap*> labels;
    for (std::size_t i : idx) {
      images.push_back(&data[i].image);
      labels.push_back(&data[i].label);
    }
    const auto y = stack_labels(labels);
    model.zero_grad();
    Var logits = model.forward(images_to_tensor(images), Mode::train);
    Var loss = cross_entropy(logits, y);
    const double l = loss.value()[0];
    if (!std::isfinite(l)) {
      throw NumericError("train: non-finite loss at iteration " + std::to_string(iter));
    }
    backward(loss);
    const double lr = poly_lr(iter, cfg);
    opt.step(lr);
    result.log.push_back({iter, lr, l});
    if (progress) progress(result.log.back());
  }
  result.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation

using Predictor = std::function<LabelMap(const SegmentationSample&)>;

struct EvalResult {
  ConfusionMatrix confusion;
  IouResult iou;
};

inline LabelMap predict(const Model& model, const Image& image) {
  NoGradGuard guard;
  Var logits = model.forward(image_to_tensor(image), Mode::eval);
  return argmax_labels(logits.value()).front();
}

inline EvalResult evaluate(const Predictor& predictor, const std::vector<SegmentationSample>& data,
                           std::size_t num_classes) {
  ConfusionMatrix conf(num_classes);
  for (const auto& s : data) conf.accumulate(predictor(s), s.label);
  IouResult iou = conf.miou();
  return {std::move(conf), std::move(iou)};
}

inline EvalResult evaluate(const Model& model, const std::vector<SegmentationSample>& data) {
  return evaluate([&](const SegmentationSample& s) { return predict(model, s.image); }, data,
                  model.config().num_classes);
}

inline std::string iou_table(const IouResult& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "class,iou\n";
  for (std::size_t k = 0; k < r.per_class.size(); ++k) {
    os << k << ',';
    if (r.per_class[k]) {
      os << *r.per_class[k];
    } else {
      os << "n/a";
    }
    os << '\n';
  }
  os << "mean," << r.mean << '\n';
  return os.str();
}

}  // namespace mfpnet
