#pragma once

// mfpnet <train|eval|infer|count|gradcheck|synth-data> --config PATH [--set key=value]... [--out DIR]
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data/IO error,
// 3 numerical failure (non-finite loss, failed gradient check).

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mfpnet/accounting.hpp"
#include "mfpnet/config.hpp"
#include "mfpnet/data.hpp"
#include "mfpnet/gradsuite.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/train.hpp"
#include "mfpnet/weights.hpp"

namespace mfpnet {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumeric = 3 };

namespace cli_detail {

struct Options {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = ".";
  std::string weights;
  std::string image;
  std::string output;
  std::string overlay;
  std::string format = "text";
  std::string input;
  bool tiny = false;
};

inline std::string keys_help() {
  std::string s = "Config keys (INI [section] key = value, or --set section.key=value):\n";
  for (const auto& k : config_keys()) {
    std::string name = k.key;
    name.resize(std::max<std::size_t>(name.size() + 2, 24), ' ');
    s += "  " + name + k.help + "\n";
  }
  s += "Environment: MFPNET_SEED overrides train.seed (before --set).\n";
  return s;
}

inline RunConfig config_for(const Options& o) {
  return load_config(o.config_path, o.overrides);
}

inline std::filesystem::path out_dir(const Options& o) {
  std::filesystem::path p(o.out_dir);
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw IoError("cannot create output directory '" + o.out_dir + "': " + ec.message());
  return p;
}

inline void print_iou(std::ostream& os, const IouResult& iou) {
  os << iou_table(iou);
}

inline int cmd_train(const Options& o) {
  const RunConfig rc = config_for(o);
  auto [train_set, val_set] = load_datasets(rc);
  const auto dir = out_dir(o);
  Model model(rc.model, rc.train.seed);
  const std::size_t every = std::max<std::size_t>(1, rc.train.total_iter / 10);
  const TrainResult tr = train(model, train_set, rc.train, [&](const LogRow& r) {
    if (r.iter % every == 0 || r.iter + 1 == rc.train.total_iter) {
      std::cerr << "iter " << r.iter << " lr " << r.lr << " loss " << r.loss << "\n";
    }
  });
  save_weights(model, (dir / "model.mfpw").string());
  binio::write_file((dir / "train_log.csv").string(), log_csv(tr.log));
  binio::write_file((dir / "config.ini").string(), to_ini(rc));
  std::cerr << "trained " << rc.train.total_iter << " iterations in " << tr.seconds << " s\n";
  const EvalResult ev = evaluate(model, val_set);
  print_iou(std::cout, ev.iou);
  return kExitOk;
}

inline int cmd_eval(const Options& o) {
  const RunConfig rc = config_for(o);
  auto [unused, val_set] = load_datasets(rc, false);
  const Model model = load_model(rc.model, o.weights);
  print_iou(std::cout, evaluate(model, val_set).iou);
  return kExitOk;
}

inline int cmd_infer(const Options& o) {
  const RunConfig rc = config_for(o);
  const Model model = load_model(rc.model, o.weights);
  const Image img = load_ppm(o.image);
  const LabelMap pred = predict(model, img);
  const std::string out = o.output.empty() ? (out_dir(o) / "prediction.pgm").string() : o.output;
  save_pgm(out, pred);
  if (!o.overlay.empty()) save_ppm(o.overlay, colorize(pred));
  std::cout << out << "\n";
  return kExitOk;
}

inline int cmd_count(const Options& o) {
  const RunConfig rc = config_for(o);
  const auto hw = o.input.empty() ? rc.model.input_hw : detail::parse_extent("--input", o.input);
  ReportFormat fmt;
  if (o.format == "text") {
    fmt = ReportFormat::text;
  } else if (o.format == "csv") {
    fmt = ReportFormat::csv;
  } else {
    throw ConfigError("--format: expected text or csv, got '" + o.format + "'");
  }
  const Model model(rc.model, rc.train.seed);
  std::cout << report(model, hw, fmt);
  return kExitOk;
}

inline int cmd_gradcheck(const Options& o) {
  ModelConfig cfg = tiny_config();
  if (!o.tiny) {
    if (o.config_path.empty()) throw ConfigError("gradcheck: pass --tiny or --config PATH");
    cfg = config_for(o).model;
  }
  GradientSuite suite([](const SuiteCase& c) {
    std::cout << (c.passed() ? "PASS " : "FAIL ") << c.name << " max_rel=" << c.result.max_rel_error
              << " checked=" << c.result.checked << " skipped=" << c.result.skipped << "\n";
  });
  suite.run_all(cfg);
  std::cout << (suite.all_passed() ? "gradcheck PASS" : "gradcheck FAIL") << " worst=" << suite.worst()
            << " tol=" << kGradTolerance << "\n";
  return suite.all_passed() ? kExitOk : kExitNumeric;
}

inline int cmd_synth(const Options& o) {
  const RunConfig rc = config_for(o);
  auto [train_set, val_set] = load_datasets(rc);
  const auto dir = out_dir(o);
  std::cout << save_dataset((dir / "train").string(), train_set) << "\n";
  std::cout << save_dataset((dir / "val").string(), val_set) << "\n";
  return kExitOk;
}

}  // namespace cli_detail

inline int run(int argc, char** argv) {
  using namespace cli_detail;
  Options o;
  CLI::App app{"MFPNet segmentation engine"};
  app.require_subcommand(1);
  app.footer(keys_help());

  auto add_common = [&](CLI::App* sub, bool config_required) {
    auto* c = sub->add_option("--config", o.config_path, "INI run configuration");
    if (config_required) c->required();
    sub->add_option("--set", o.overrides, "override, section.key=value (repeatable)");
    sub->add_option("--out", o.out_dir, "output directory");
    sub->footer(keys_help());
  };

  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.mfpw, train_log.csv, config.ini");
  add_common(train_cmd, true);
  auto* eval_cmd = app.add_subcommand("eval", "per-class IoU and mIoU on the held-out set");
  add_common(eval_cmd, true);
  eval_cmd->add_option("--weights", o.weights, "weight file")->required();
  auto* infer_cmd = app.add_subcommand("infer", "label one PPM image; writes a P5 class map");
  add_common(infer_cmd, true);
  infer_cmd->add_option("--weights", o.weights, "weight file")->required();
  infer_cmd->add_option("--image", o.image, "input P6 image")->required();
  infer_cmd->add_option("--output", o.output, "output P5 label map (default OUT/prediction.pgm)");
  infer_cmd->add_option("--overlay", o.overlay, "optional P6 palette rendering");
  auto* count_cmd = app.add_subcommand("count", "per-layer parameter and FLOP table");
  add_common(count_cmd, true);
  count_cmd->add_option("--format", o.format, "text or csv");
  count_cmd->add_option("--input", o.input, "input extent HxW (default model.input)");
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  add_common(grad_cmd, false);
  grad_cmd->add_flag("--tiny", o.tiny, "use the tiny model preset");
  auto* synth_cmd = app.add_subcommand("synth-data", "write synthetic train/ and val/ sets with manifests");
  add_common(synth_cmd, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*train_cmd) return cmd_train(o);
    if (*eval_cmd) return cmd_eval(o);
    if (*infer_cmd) return cmd_infer(o);
    if (*count_cmd) return cmd_count(o);
    if (*grad_cmd) return cmd_gradcheck(o);
    if (*synth_cmd) return cmd_synth(o);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace mfpnet
