#include <gtest/gtest.h>

#include "mfpnet/gradsuite.hpp"

using namespace mfpnet;

namespace {

void expect_all_pass(const GradientSuite& suite) {
  EXPECT_FALSE(suite.cases().empty());
  for (const auto& c : suite.cases()) {
    EXPECT_TRUE(c.passed()) << c.name << " rel=" << c.result.max_rel_error;
    EXPECT_GT(c.result.checked, 0u) << c.name;
  }
  EXPECT_LT(suite.worst(), kGradTolerance);
}

}  // namespace

TEST(GradientSuite, Operators) {
  GradientSuite suite;
  suite.run_ops();
  expect_all_pass(suite);
}

TEST(GradientSuite, Blocks) {
  GradientSuite suite;
  suite.run_blocks();
  expect_all_pass(suite);
}

TEST(GradientSuite, TinyModelEndToEnd) {
  GradientSuite suite;
  suite.run_model(tiny_config());
  expect_all_pass(suite);
}

TEST(GradientSuite, ReporterSeesEveryCase) {
  std::size_t seen = 0;
  GradientSuite suite([&](const SuiteCase&) { ++seen; });
  suite.run_ops();
  EXPECT_EQ(seen, suite.cases().size());
}
