#include <gtest/gtest.h>

#include <cmath>

#include "mfpnet/train.hpp"
#include "mfpnet/weights.hpp"
#include "oracles.hpp"

using namespace mfpnet;

namespace {

std::vector<SegmentationSample> tiny_data(std::size_t count, std::size_t k) {
  return synth_dataset(0, count, {32, 32}, k);
}

TrainConfig short_run(std::size_t iters) {
  TrainConfig cfg;
  cfg.optimizer = OptimizerKind::adam;
  cfg.lr_in = 1e-2;
  cfg.total_iter = iters;
  cfg.batch = 2;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogK) {
  for (std::size_t k : {2u, 3u, 19u}) {
    const Tensor logits(Shape{2, k, 3, 4}, 0.7);
    std::vector<std::uint8_t> labels(24);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<std::uint8_t>(i % k);
    EXPECT_NEAR(cross_entropy(logits, labels).loss, std::log(double(k)), 1e-12);
  }
}

TEST(CrossEntropy, ConfidentCorrectLogitsGiveNearZero) {
  Tensor logits(Shape{1, 3, 2, 2});
  const std::vector<std::uint8_t> labels{0, 1, 2, 1};
  for (std::size_t i = 0; i < 4; ++i) logits[labels[i] * 4 + i] = 50.0;
  EXPECT_LT(cross_entropy(logits, labels).loss, 1e-9);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  const Tensor logits = random_tensor({1, 3, 2, 2}, 1, -2.0, 2.0);
  const std::vector<std::uint8_t> labels{2, 0, kIgnoreLabel, 1};
  const auto r = cross_entropy(logits, labels);
  EXPECT_EQ(r.counted, 3u);
  const double h = 1e-6;
  for (std::size_t i = 0; i < logits.numel(); ++i) {
    Tensor up = logits, down = logits;
    up[i] += h;
    down[i] -= h;
    const double fd = (cross_entropy(up, labels).loss - cross_entropy(down, labels).loss) / (2 * h);
    EXPECT_NEAR(r.grad[i], fd, 1e-7) << i;
  }
  for (std::size_t px = 0; px < 4; ++px) {
    double s = 0.0;
    for (std::size_t k = 0; k < 3; ++k) s += r.grad[k * 4 + px];
    EXPECT_NEAR(s, 0.0, 1e-12);
  }
  EXPECT_EQ(r.grad[0 * 4 + 2], 0.0);
}

TEST(CrossEntropy, RejectsIgnoredOnlyAndBadLabels) {
  const Tensor logits(Shape{1, 2, 1, 2});
  EXPECT_THROW(cross_entropy(logits, std::vector<std::uint8_t>{kIgnoreLabel, kIgnoreLabel}), NumericError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::uint8_t>{0, 2}), FormatError);
  EXPECT_THROW(cross_entropy(logits, std::vector<std::uint8_t>{0}), ShapeError);
}

TEST(CrossEntropy, VarNodeScalesBySeed) {
  Var logits(random_tensor({1, 2, 2, 2}, 2), true);
  const std::vector<std::uint8_t> labels{0, 1, 1, 0};
  Var loss = cross_entropy(logits, labels);
  Tensor seed(Shape{1, 1, 1, 1}, 3.0);
  backward(loss, &seed);
  const auto ref = cross_entropy(logits.value(), labels);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(logits.grad()[i], 3.0 * ref.grad[i], 1e-15);
}

TEST(Schedule, PolyEndpointsAndMonotone) {
  EXPECT_EQ(poly_lr(0, 4.5e-2, 500), 4.5e-2);
  EXPECT_EQ(poly_lr(500, 4.5e-2, 500), 0.0);
  EXPECT_NEAR(poly_lr(250, 4.5e-2, 500), 4.5e-2 * std::pow(0.5, 0.9), 1e-15);
  EXPECT_NEAR(poly_lr(250, 4.5e-2, 500), 2.4115e-2, 1e-5);
  for (std::size_t i = 1; i < 500; ++i) EXPECT_LT(poly_lr(i, 4.5e-2, 500), poly_lr(i - 1, 4.5e-2, 500));
  EXPECT_THROW(poly_lr(0, 1.0, 0), ConfigError);
}

TEST(Optimizer, SgdFirstStepIsPlainGradientDescent) {
  Tensor p = random_tensor({1, 1, 2, 3}, 4);
  const Tensor p0 = p, g = random_tensor({1, 1, 2, 3}, 5);
  Tensor v;
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p[i], p0[i] - 0.1 * g[i], 1e-15);
  sgd_step(p, g, v, 0.1, 0.9, 0.0);
  for (std::size_t i = 0; i < p.numel(); ++i) EXPECT_NEAR(p[i], p0[i] - 0.1 * g[i] - 0.1 * 1.9 * g[i], 1e-15);
}

TEST(Optimizer, ZeroLearningRateIsIdentity) {
  const Tensor p0 = random_tensor({1, 2, 2, 2}, 6), g = random_tensor({1, 2, 2, 2}, 7);
  Tensor a = p0, b = p0, v;
  AdamState st;
  for (int i = 0; i < 3; ++i) {
    sgd_step(a, g, v, 0.0, 0.9, 1e-2);
    adam_step(b, g, st, 0.0, 0.9, 0.999, 1e-8, 1e-2);
  }
  EXPECT_EQ(a.storage(), p0.storage());
  EXPECT_EQ(b.storage(), p0.storage());
}

TEST(Optimizer, AdamMatchesScalarReferenceAndConverges) {
  Tensor p(Shape{1, 1, 1, 1}, 1.0);
  AdamState st;
  double q = 1.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 200; ++t) {
    Tensor g(Shape{1, 1, 1, 1}, 2.0 * p[0]);
    adam_step(p, g, st, 0.1);
    const double gq = 2.0 * q;
    m = 0.9 * m + 0.1 * gq;
    v = 0.999 * v + 0.001 * gq * gq;
    q -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    ASSERT_NEAR(p[0], q, 1e-12) << "step " << t;
  }
  EXPECT_LT(std::abs(p[0]), 0.05);
}

TEST(Optimizer, ShapeMismatchThrows) {
  Tensor p(Shape{1, 1, 1, 2}), g(Shape{1, 1, 1, 3}), v;
  AdamState st;
  EXPECT_THROW(sgd_step(p, g, v, 0.1), ShapeError);
  EXPECT_THROW(adam_step(p, g, st, 0.1), ShapeError);
}

TEST(Optimizer, ParseNames) {
  EXPECT_EQ(parse_optimizer("sgd"), OptimizerKind::sgd);
  EXPECT_EQ(optimizer_name(parse_optimizer("adam")), "adam");
  EXPECT_THROW(parse_optimizer("rmsprop"), ConfigError);
}

TEST(Sampler, EachEpochIsAPermutation) {
  BatchSampler s(7, 1);
  for (int epoch = 0; epoch < 4; ++epoch) {
    auto idx = s.next(7);
    std::sort(idx.begin(), idx.end());
    for (std::size_t i = 0; i < 7; ++i) EXPECT_EQ(idx[i], i);
  }
  EXPECT_THROW(BatchSampler(0, 1), ConfigError);
}

TEST(Train, ZeroLearningRateLeavesWeightsUnchanged) {
  Model m(tiny_config(), 1);
  const auto before = collect_weights(m);
  auto cfg = short_run(3);
  cfg.lr_in = 0.0;
  cfg.weight_decay = 1e-2;
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    cfg.optimizer = kind;
    train(m, tiny_data(4, m.config().num_classes), cfg);
    const auto after = collect_weights(m);
    for (std::size_t i = 0; i < before.size(); ++i) {
      if (before[i].name.find("running_") != std::string::npos) continue;
      EXPECT_EQ(before[i].values, after[i].values) << before[i].name;
    }
  }
}

TEST(Train, LossDecreasesOnTinyProblem) {
  Model m(tiny_config(), 2);
  const auto res = train(m, tiny_data(8, m.config().num_classes), short_run(120));
  ASSERT_EQ(res.log.size(), 120u);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += res.log[i].loss;
    tail += res.log[110 + i].loss;
  }
  EXPECT_LT(tail, 0.7 * head);
  EXPECT_EQ(res.log.front().lr, 1e-2);
  EXPECT_NE(log_csv(res.log).find("iter,lr,loss\n0,0.01,"), std::string::npos);
}

TEST(Train, SameSeedGivesBitIdenticalWeights) {
  const auto data = tiny_data(6, tiny_config().num_classes);
  Model a(tiny_config(), 5), b(tiny_config(), 5);
  const auto ra = train(a, data, short_run(6));
  const auto rb = train(b, data, short_run(6));
  EXPECT_EQ(encode_weights(collect_weights(a)), encode_weights(collect_weights(b)));
  for (std::size_t i = 0; i < ra.log.size(); ++i) EXPECT_EQ(ra.log[i].loss, rb.log[i].loss);
}

TEST(Train, RejectsInvalidData) {
  Model m(tiny_config(), 1);
  auto data = tiny_data(2, m.config().num_classes);
  data[1].label.at(0, 0) = static_cast<std::uint8_t>(m.config().num_classes);
  EXPECT_THROW(train(m, data, short_run(1)), FormatError);
  auto cfg = short_run(1);
  cfg.batch = 0;
  EXPECT_THROW(train(m, tiny_data(2, m.config().num_classes), cfg), ConfigError);
}

TEST(Evaluate, OraclePredictorScoresOne) {
  const auto data = tiny_data(4, 5);
  const auto r = evaluate([](const SegmentationSample& s) { return s.label; }, data, 5);
  EXPECT_EQ(r.iou.mean, 1.0);
}

TEST(Evaluate, ModelMatchesManualConfusion) {
  const Model m(tiny_config(), 8);
  const auto data = tiny_data(3, m.config().num_classes);
  const auto r = evaluate(m, data);
  ConfusionMatrix manual(m.config().num_classes);
  for (const auto& s : data) {
    NoGradGuard guard;
    const Tensor logits = m.forward(image_to_tensor(s.image), Mode::eval).value();
    manual.accumulate(argmax_labels(logits).front(), s.label);
  }
  EXPECT_EQ(r.confusion, manual);
  EXPECT_EQ(r.iou.mean, manual.miou().mean);
  EXPECT_NE(iou_table(r.iou).find("\nmean,"), std::string::npos);
}
