#include <gtest/gtest.h>

#include <sstream>

#include "mfpnet/accounting.hpp"
#include "mfpnet/flops.hpp"
#include "random_config.hpp"

using namespace mfpnet;

namespace {

std::uint64_t enumerate_scalars(const Model& m) {
  std::uint64_t n = 0;
  for (const auto& p : m.registry().params()) {
    std::uint64_t k = 1;
    for (std::size_t d : p.dims) k *= d;
    EXPECT_EQ(k, p.var.numel()) << p.name;
    n += k;
  }
  return n;
}

std::uint64_t instrumented_flops(const Model& m, std::array<std::size_t, 2> hw) {
  flops::Scope scope;
  NoGradGuard guard;
  m.forward(random_tensor({1, 3, hw[0], hw[1]}, 1), Mode::eval);
  return scope.total();
}

std::uint64_t prefix_params(const CostTable& t, const std::string& prefix) {
  std::uint64_t s = 0;
  for (const auto& r : t.rows) {
    if (r.layer.rfind(prefix, 0) == 0) s += r.params;
  }
  return s;
}

}  // namespace

TEST(Params, ClosedFormLayers) {
  ParamStore a(0);
  Conv2d::create(a, "c", ConvSpec::same(3, 4, 1, 1));
  EXPECT_EQ(a.total_scalars(), 16u);
  ParamStore b(0);
  ConvBnAct::create(b, "u", ConvSpec::same(32, 32, 3, 3));
  EXPECT_EQ(b.total_scalars(), 9312u);
}

TEST(Params, DefaultTotalEqualsEnumerationAndIsNearOneMillion) {
  const Model m(default_config());
  const CostTable t = count_params(m);
  EXPECT_EQ(t.total_params(), enumerate_scalars(m));
  EXPECT_EQ(t.total_params(), m.registry().total_scalars());
  EXPECT_GE(t.total_params(), 900000u);
  EXPECT_LE(t.total_params(), 1100000u);
}

TEST(Params, RandomConfigsMatchEnumeration) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Model m(fixture::random_config(s));
    EXPECT_EQ(count_params(m).total_params(), enumerate_scalars(m)) << "config " << s;
  }
}

TEST(Params, SgcnDeltaEqualsSgcnRows) {
  for (auto base : {default_config(), desk_config(), tiny_config()}) {
    auto off = base;
    off.sgcn_enabled = false;
    const CostTable on_t = count_params(Model(base)), off_t = count_params(Model(off));
    EXPECT_EQ(on_t.total_params() - off_t.total_params(), prefix_params(on_t, "sgcn"));
  }
}

TEST(Params, AsppDeltaEqualsHeadRows) {
  auto aspp = desk_config();
  auto none = aspp;
  none.head.type = HeadType::none;
  const CostTable a = count_params(Model(aspp)), n = count_params(Model(none));
  EXPECT_EQ(a.total_params() - n.total_params(), prefix_params(a, "head."));
  EXPECT_EQ(prefix_params(n, "head."), 0u);
}

TEST(Flops, OneByOneConvClosedForm) {
  CostTable t;
  detail::FlopPlanner plan(t);
  plan.conv("c", 8, 8, 1, 1, {4, 4}, 1, 1, false);
  EXPECT_EQ(t.total_flops(), 2048u);
}

TEST(Flops, InstrumentedCounterMatchesAnalyticOnTiny) {
  const Model m(tiny_config());
  EXPECT_EQ(count_flops(m, {32, 32}).total_flops(), instrumented_flops(m, {32, 32}));
  EXPECT_EQ(count_flops(m, {64, 96}).total_flops(), instrumented_flops(m, {64, 96}));
}

TEST(Flops, InstrumentedCounterMatchesAnalyticOnRandomConfigs) {
  for (std::uint64_t s = 100; s < 108; ++s) {
    const Model m(fixture::random_config(s));
    EXPECT_EQ(count_flops(m, {32, 32}).total_flops(), instrumented_flops(m, {32, 32})) << "config " << s;
  }
}

TEST(Flops, ConvRowsScaleWithArea) {
  const auto c = desk_config();
  const CostTable a = count_flops(c, {64, 64}), b = count_flops(c, {128, 128});
  std::size_t checked = 0;
  for (const auto& r : a.rows) {
    const bool conv_like = r.layer.find("conv") != std::string::npos || r.layer.find("down") != std::string::npos ||
                           r.layer.find("bottleneck") != std::string::npos || r.layer.find("fact_") != std::string::npos ||
                           r.layer.find("recover") != std::string::npos || r.layer.find(".rate") != std::string::npos;
    if (!conv_like) continue;
    ASSERT_NE(b.find(r.layer), nullptr) << r.layer;
    EXPECT_EQ(4 * r.flops, b.find(r.layer)->flops) << r.layer;
    ++checked;
  }
  EXPECT_GT(checked, 20u);
}

TEST(Flops, RejectsBadExtent) {
  EXPECT_THROW(count_flops(desk_config(), {60, 64}), ShapeError);
  EXPECT_THROW(count_flops(desk_config(), {0, 64}), ShapeError);
}

TEST(Report, SingleRowTable) {
  CostTable t;
  t.row("classifier") = {"classifier", 16, 100};
  const std::string csv = report(t, ReportFormat::csv);
  EXPECT_EQ(csv, "layer,params,flops,pct\r\nclassifier,16,100,100.00\r\ntotal,16,100,100.00\r\n");
}

TEST(Report, CsvParseBackAndPercentages) {
  const Model m(default_config());
  const CostTable t = cost_table(m, {512, 1024});
  const std::string csv = report(t, ReportFormat::csv);
  std::istringstream is(csv);
  std::string line;
  std::getline(is, line);
  EXPECT_EQ(line, "layer,params,flops,pct\r");
  std::uint64_t params = 0, fl = 0;
  double pct = 0.0;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    ASSERT_EQ(line.back(), '\r');
    line.pop_back();
    std::vector<std::string> f;
    std::stringstream ls(line);
    for (std::string x; std::getline(ls, x, ',');) f.push_back(x);
    ASSERT_EQ(f.size(), 4u) << line;
    if (f[0] == "total") {
      EXPECT_EQ(std::stoull(f[1]), params);
      EXPECT_EQ(std::stoull(f[2]), fl);
      continue;
    }
    params += std::stoull(f[1]);
    fl += std::stoull(f[2]);
    pct += std::stod(f[3]);
    ++rows;
  }
  EXPECT_EQ(rows, t.rows.size());
  EXPECT_EQ(params, t.total_params());
  EXPECT_EQ(fl, t.total_flops());
  EXPECT_NEAR(pct, 100.0, 0.1);
}

TEST(Report, CsvQuotesAwkwardNames) {
  CostTable t;
  t.row("a,b") = {"a,b", 1, 1};
  t.row("q\"x") = {"q\"x", 1, 1};
  const std::string csv = report(t, ReportFormat::csv);
  EXPECT_NE(csv.find("\"a,b\",1,1,"), std::string::npos);
  EXPECT_NE(csv.find("\"q\"\"x\",1,1,"), std::string::npos);
}

TEST(Report, TextStartsWithConvention) {
  const std::string text = report(Model(tiny_config()), {32, 32}, ReportFormat::text);
  EXPECT_EQ(text.rfind(std::string("# ") + kFlopConvention, 0), 0u);
  EXPECT_NE(text.find("\ntotal"), std::string::npos);
}

TEST(Report, CostTableMergesEveryParamRow) {
  const Model m(desk_config());
  const CostTable merged = cost_table(m, {64, 64});
  EXPECT_EQ(merged.total_params(), count_params(m).total_params());
  EXPECT_EQ(merged.total_flops(), count_flops(m, {64, 64}).total_flops());
  for (const auto& r : merged.rows) EXPECT_TRUE(r.params > 0 || r.flops > 0) << r.layer;
}
