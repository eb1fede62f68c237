// chanssl command-line driver.
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "chanssl/commands.hpp"
#include "chanssl/config.hpp"
#include "chanssl/errors.hpp"

namespace {

enum ExitCode { kOk = 0, kInternal = 1, kIoConfig = 2, kModel = 3 };

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::string out;
  std::string data;
  std::string params;
  std::string split;
  std::string detector = "model";
  std::string run;
  bool no_svg = false;
};

chanssl::RunConfig build_config(const Options& o) {
  chanssl::RunConfig cfg = o.config.empty() ? chanssl::RunConfig{} : chanssl::load_config(o.config);
  if (o.seed) cfg.seed = *o.seed;
  if (o.threads) cfg.threads = *o.threads;
  if (!o.out.empty()) cfg.out_dir = o.out;
  if (!o.data.empty()) cfg.data_root = o.data;
  if (!o.params.empty()) cfg.params = o.params;
  if (!o.split.empty()) cfg.eval_split = o.split;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Channel-augmented teacher-student 3D detection at desk scale"};
  app.require_subcommand(1);
  Options o;
  app.add_option("--config", o.config, "key = value run configuration");
  app.add_option("--seed", o.seed, "master seed (overrides the config)");
  app.add_option("--threads", o.threads, "worker threads; results do not depend on it")->check(CLI::PositiveNumber);
  app.add_option("--out", o.out, "output directory (dataset root for gen-data)");

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset and splits");
  auto* pre = app.add_subcommand("pretrain", "supervised single-view training on the labeled split");
  auto* ssl = app.add_subcommand("ssl-train", "teacher-student training from pretrained parameters");
  auto* ev = app.add_subcommand("eval", "per-class AP and mAP on a split");
  auto* rep = app.add_subcommand("report", "per-topic CSVs and SVG charts from a run's metrics");
  for (auto* sub : {pre, ssl, ev}) sub->add_option("--data", o.data, "dataset root");
  for (auto* sub : {ssl, ev}) sub->add_option("--params", o.params, "parameter file");
  ev->add_option("--split", o.split, "split to score (default: val)");
  ev->add_option("--detector", o.detector, "model, oracle (echo ground truth) or empty")
      ->check(CLI::IsMember({"model", "oracle", "empty"}));
  rep->add_option("--run", o.run, "run directory holding metrics.csv (default: --out)");
  rep->add_flag("--no-svg", o.no_svg, "write CSVs only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kIoConfig;
  }

  try {
    if (rep->parsed()) {
      const std::string dir = !o.run.empty() ? o.run : o.out;
      if (dir.empty()) throw chanssl::ConfigError("report: pass --run or --out");
      chanssl::cmd_report({dir, !o.no_svg}, std::cout);
      return kOk;
    }
    chanssl::RunConfig cfg = build_config(o);
    if (gen->parsed()) {
      if (!o.out.empty()) cfg.data_root = o.out;
      chanssl::cmd_gen_data(cfg, std::cout);
    } else if (pre->parsed()) {
      chanssl::cmd_pretrain(cfg, std::cout);
    } else if (ssl->parsed()) {
      chanssl::cmd_ssl_train(cfg, std::cout);
    } else if (ev->parsed()) {
      const auto mode = o.detector == "oracle"  ? chanssl::EvalMode::Oracle
                        : o.detector == "empty" ? chanssl::EvalMode::Empty
                                                : chanssl::EvalMode::Model;
      chanssl::cmd_eval(cfg, mode, std::cout);
    }
    return kOk;
  } catch (const chanssl::ModelCompatibilityError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kModel;
  } catch (const chanssl::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoConfig;
  } catch (const chanssl::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoConfig;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoConfig;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}
