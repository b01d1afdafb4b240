#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>

#include "mfpnet/mfpnet.hpp"

using namespace mfpnet;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

const fs::path& work() {
  static const fs::path dir = [] {
    const auto d = fs::temp_directory_path() / "mfpnet_integration";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

Outcome cli(const std::string& args) {
  const auto out = work() / "stdout.txt", err = work() / "stderr.txt";
  const std::string cmd = std::string(MFPNET_CLI) + " " + args + " > " + out.string() + " 2> " + err.string();
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.out = binio::read_file(out.string());
  o.err = binio::read_file(err.string());
  return o;
}

std::string tiny_ini() {
  const auto p = work() / "tiny.ini";
  if (!fs::exists(p)) {
    binio::write_file(p.string(),
                      "[model]\npreset = tiny\nnum_classes = 4\n"
                      "[train]\noptimizer = adam\nlr = 0.01\ntotal_iter = 12\nbatch = 2\nseed = 1\n"
                      "[data]\nseed = 2\ntrain_count = 6\nval_count = 3\n");
  }
  return p.string();
}

double mean_iou(const std::string& table) {
  const auto pos = table.find("\nmean,");
  if (pos == std::string::npos) return -1.0;
  return std::stod(table.substr(pos + 6));
}

}  // namespace

TEST(Cli, CountPrintsTable) {
  const auto r = cli("count --config " + tiny_ini() + " --format csv --input 64x64");
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out.rfind("layer,params,flops,pct\r\n", 0), 0u);
  EXPECT_NE(r.out.find("\ntotal,"), std::string::npos);
  EXPECT_EQ(cli("count --config " + tiny_ini() + " --format xml").code, 1);
}

TEST(Cli, ExitCodes) {
  const auto missing = cli("count --config /nonexistent/run.ini");
  EXPECT_EQ(missing.code, 2);
  EXPECT_NE(missing.err.find("/nonexistent/run.ini"), std::string::npos);
  EXPECT_EQ(cli("count --config " + tiny_ini() + " --set model.depth=3").code, 1);
  EXPECT_EQ(cli("count --config " + tiny_ini() + " --bogus").code, 1);
  EXPECT_EQ(cli("").code, 1);
  const auto help = cli("--help");
  EXPECT_EQ(help.code, 0);
  for (const auto& k : config_keys()) EXPECT_NE(help.out.find(k.key), std::string::npos) << k.key;
  EXPECT_NE(help.out.find("MFPNET_SEED"), std::string::npos);
}

TEST(Cli, GradcheckTinyPasses) {
  const auto r = cli("gradcheck --tiny");
  EXPECT_EQ(r.code, 0) << r.out;
  EXPECT_NE(r.out.find("gradcheck PASS"), std::string::npos);
  EXPECT_EQ(r.out.find("FAIL"), std::string::npos);
}

TEST(Cli, SynthTrainInferEvalPipeline) {
  const auto data = work() / "data";
  ASSERT_EQ(cli("synth-data --config " + tiny_ini() + " --out " + data.string()).code, 0);
  const std::string val_manifest = (data / "val" / "manifest.tsv").string();
  ASSERT_TRUE(fs::exists(data / "train" / "manifest.tsv"));
  ASSERT_EQ(read_manifest(val_manifest).size(), 3u);

  const std::string manifests =
      " --set data.train_manifest=" + (data / "train" / "manifest.tsv").string() + " --set data.val_manifest=" + val_manifest;
  const auto run = work() / "run";
  const auto t = cli("train --config " + tiny_ini() + manifests + " --out " + run.string());
  ASSERT_EQ(t.code, 0) << t.err;
  for (const char* f : {"model.mfpw", "train_log.csv", "config.ini"}) EXPECT_TRUE(fs::exists(run / f)) << f;
  const double trained_miou = mean_iou(t.out);
  EXPECT_GE(trained_miou, 0.0);

  const std::string weights = (run / "model.mfpw").string();
  const auto ev = cli("eval --config " + (run / "config.ini").string() + " --weights " + weights);
  ASSERT_EQ(ev.code, 0) << ev.err;
  EXPECT_EQ(ev.out, t.out);

  const auto one = work() / "one";
  fs::create_directories(one);
  const auto entry = read_manifest(val_manifest).front();
  binio::write_file((one / "manifest.tsv").string(), entry.image_path + "\t" + entry.label_path + "\n");
  const auto ev1 = cli("eval --config " + tiny_ini() + " --set data.val_manifest=" + (one / "manifest.tsv").string() +
                       " --weights " + weights);
  ASSERT_EQ(ev1.code, 0) << ev1.err;
  const auto pred_path = work() / "pred.pgm", overlay = work() / "pred.ppm";
  const auto inf = cli("infer --config " + tiny_ini() + " --weights " + weights + " --image " + entry.image_path +
                       " --output " + pred_path.string() + " --overlay " + overlay.string());
  ASSERT_EQ(inf.code, 0) << inf.err;
  const LabelMap pred = load_pgm(pred_path.string());
  ConfusionMatrix c(4);
  c.accumulate(pred, load_pgm(entry.label_path));
  EXPECT_NEAR(c.miou().mean, mean_iou(ev1.out), 5e-5);
  EXPECT_EQ(load_ppm(overlay.string()), colorize(pred));

  EXPECT_EQ(cli("infer --config " + tiny_ini() + " --weights " + weights + " --image " + tiny_ini()).code, 2);
  EXPECT_EQ(cli("eval --config " + tiny_ini() + " --weights " + tiny_ini()).code, 2);
}

TEST(Cli, TrainingIsIdempotent) {
  const auto a = work() / "idem_a", b = work() / "idem_b";
  ASSERT_EQ(cli("train --config " + tiny_ini() + " --out " + a.string()).code, 0);
  ASSERT_EQ(cli("train --config " + tiny_ini() + " --out " + b.string()).code, 0);
  for (const char* f : {"model.mfpw", "train_log.csv", "config.ini"}) {
    EXPECT_EQ(binio::read_file((a / f).string()), binio::read_file((b / f).string())) << f;
  }
  const auto c = work() / "idem_c";
  ASSERT_EQ(cli("train --config " + tiny_ini() + " --set train.seed=9 --out " + c.string()).code, 0);
  EXPECT_NE(binio::read_file((a / "model.mfpw").string()), binio::read_file((c / "model.mfpw").string()));
}

TEST(Cli, EnvironmentSeedSitsBetweenFileAndSet) {
  const auto a = work() / "env_a", b = work() / "env_b";
  ASSERT_EQ(cli("train --config " + tiny_ini() + " --set train.seed=9 --out " + a.string()).code, 0);
  setenv("MFPNET_SEED", "9", 1);
  const auto r = cli("train --config " + tiny_ini() + " --out " + b.string());
  const auto s = cli("count --config " + tiny_ini() + " --set model.c0=0");
  unsetenv("MFPNET_SEED");
  ASSERT_EQ(r.code, 0);
  EXPECT_EQ(s.code, 1);
  EXPECT_EQ(binio::read_file((a / "model.mfpw").string()), binio::read_file((b / "model.mfpw").string()));
  EXPECT_NE(binio::read_file((b / "config.ini").string()).find("seed = 9"), std::string::npos);
}

TEST(Cli, ZeroClassifierPredictsClassZero) {
  const RunConfig rc = load_config(tiny_ini(), {}, nullptr);
  Model m(rc.model, 3);
  for (Var v : {m.classifier_params().conv.weight, m.classifier_params().conv.bias}) {
    for (auto& e : v.mutable_value().data()) e = 0.0;
  }
  const auto weights = work() / "zero.mfpw", image = work() / "img.ppm", out = work() / "zero.pgm";
  save_weights(m, weights.string());
  save_ppm(image.string(), synth_sample(4, 0, {32, 64}, 4).image);
  const auto r = cli("infer --config " + tiny_ini() + " --weights " + weights.string() + " --image " + image.string() +
                     " --output " + out.string());
  ASSERT_EQ(r.code, 0) << r.err;
  const LabelMap pred = load_pgm(out.string());
  EXPECT_EQ(pred.height, 32u);
  EXPECT_EQ(pred.width, 64u);
  for (auto v : pred.labels) EXPECT_EQ(v, 0);
}
