#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>

#include "chanssl/augment.hpp"
#include "chanssl/data.hpp"
#include "chanssl/detector.hpp"
#include "chanssl/eval.hpp"
#include "chanssl/ssl.hpp"

namespace chanssl {

/// Everything a run depends on. Stored as `key = value` lines; angles are in
/// degrees in the file and converted at the point of use.
struct RunConfig {
  std::optional<std::uint64_t> seed;
  std::filesystem::path data_root = "data";
  std::filesystem::path out_dir = "run";
  int threads = 1;

  // Dataset
  int n_train = 200;
  int n_val = 50;
  double label_fraction = 0.05;
  SynthConfig synth;

  DetectorConfig detector;

  // Channels
  int n_channels = 3;
  double weak_rot_deg = 22.5;
  double weak_scale_lo = 0.98;
  double weak_scale_hi = 1.02;
  double strong_rot_deg = 45.0;
  double strong_scale_min = 0.95;
  double strong_scale_max = 1.05;
  double strong_flip_prob = 0.5;

  // Training
  int pretrain_epochs = 80;
  double pretrain_lr = 0.05;
  int ssl_epochs = 10;
  double ssl_lr = 0.01;
  int threshold_period = 5;
  double ema_momentum = 0.999;
  double confident_min = 0.1;
  bool shuffle = true;
  int shuffle_grid = 4;

  EvalConfig eval;
  std::string eval_split = "val";

  /// Input parameters: pretrain output for ssl-train, model for eval.
  std::filesystem::path params;

  /// Throws ConfigError (also when the seed is missing).
  void validate() const;
  std::uint64_t require_seed() const;

  ChannelPolicy weak_policy() const;
  ChannelPolicy strong_policy() const;
  SslConfig ssl_config() const;
  PretrainConfig pretrain_config() const;
};

/// Parses `key = value` lines; `#` starts a comment. Unknown keys, repeated
/// keys and malformed values throw ConfigError naming the line.
RunConfig parse_config(std::string_view text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});

/// Canonical text of every key; parse_config(to_config_text(c)) == c.
std::string to_config_text(const RunConfig& cfg);

}  // namespace chanssl
