#include "chanssl/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <vector>

#include "chanssl/errors.hpp"

namespace chanssl {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

double to_double(const std::string& v) {
  std::size_t pos = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &pos);
  } catch (const std::exception&) {
    pos = 0;
  }
  if (pos != v.size() || v.empty() || !std::isfinite(out)) throw std::invalid_argument("not a number");
  return out;
}

long long to_int(const std::string& v) {
  long long out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not an integer");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) throw std::invalid_argument("not an unsigned integer");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("not a boolean");
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Key {
  std::string name;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define CHANSSL_DOUBLE(key, field) \
  Key{key, [](const RunConfig& c) { return fmt(c.field); }, [](RunConfig& c, const std::string& v) { c.field = to_double(v); }}
#define CHANSSL_INT(key, field)                                                \
  Key{key, [](const RunConfig& c) { return std::to_string(c.field); }, \
      [](RunConfig& c, const std::string& v) { c.field = static_cast<decltype(c.field)>(to_int(v)); }}
#define CHANSSL_BOOL(key, field)                                                          \
  Key{key, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
      [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }}
#define CHANSSL_PATH(key, field) \
  Key{key, [](const RunConfig& c) { return c.field.string(); }, [](RunConfig& c, const std::string& v) { c.field = v; }}

const std::vector<Key>& keys() {
  static const std::vector<Key> table = {
      Key{"seed", [](const RunConfig& c) { return c.seed ? std::to_string(*c.seed) : std::string(); },
          [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); }},
      CHANSSL_PATH("data_root", data_root),
      CHANSSL_PATH("out_dir", out_dir),
      CHANSSL_INT("threads", threads),
      CHANSSL_INT("n_train", n_train),
      CHANSSL_INT("n_val", n_val),
      CHANSSL_DOUBLE("label_fraction", label_fraction),
      CHANSSL_INT("max_per_class", synth.max_per_class),
      CHANSSL_INT("max_clutter", synth.max_clutter),
      CHANSSL_INT("n_ground", synth.n_ground),
      CHANSSL_DOUBLE("ground_range", synth.ground_range),
      CHANSSL_DOUBLE("ground_sigma", synth.ground_sigma),
      CHANSSL_DOUBLE("object_range_min", synth.object_range_min),
      CHANSSL_DOUBLE("object_range_max", synth.object_range_max),
      CHANSSL_DOUBLE("size_jitter", synth.size_jitter),
      CHANSSL_DOUBLE("surface_density", synth.surface_density),
      CHANSSL_INT("min_pts", synth.min_pts),
      CHANSSL_INT("max_pts", synth.max_pts),
      CHANSSL_DOUBLE("voxel_size", detector.voxel_size),
      CHANSSL_DOUBLE("grid_range", detector.range),
      CHANSSL_DOUBLE("z_min", detector.z_min),
      CHANSSL_DOUBLE("z_max", detector.z_max),
      CHANSSL_DOUBLE("min_occ", detector.min_occ),
      CHANSSL_INT("link_radius", detector.link_radius),
      CHANSSL_INT("min_cells", detector.min_cells),
      CHANSSL_DOUBLE("padding", detector.padding),
      CHANSSL_DOUBLE("proposal_nms_iou", detector.proposal_nms_iou),
      CHANSSL_DOUBLE("final_nms_iou", detector.final_nms_iou),
      CHANSSL_DOUBLE("roi_enlarge", detector.roi_enlarge),
      CHANSSL_DOUBLE("fg_iou", detector.fg_iou),
      CHANSSL_DOUBLE("bg_iou", detector.bg_iou),
      CHANSSL_INT("n_channels", n_channels),
      CHANSSL_DOUBLE("weak_rot_deg", weak_rot_deg),
      CHANSSL_DOUBLE("weak_scale_lo", weak_scale_lo),
      CHANSSL_DOUBLE("weak_scale_hi", weak_scale_hi),
      CHANSSL_DOUBLE("strong_rot_deg", strong_rot_deg),
      CHANSSL_DOUBLE("strong_scale_min", strong_scale_min),
      CHANSSL_DOUBLE("strong_scale_max", strong_scale_max),
      CHANSSL_DOUBLE("strong_flip_prob", strong_flip_prob),
      CHANSSL_INT("pretrain_epochs", pretrain_epochs),
      CHANSSL_DOUBLE("pretrain_lr", pretrain_lr),
      CHANSSL_INT("ssl_epochs", ssl_epochs),
      CHANSSL_DOUBLE("ssl_lr", ssl_lr),
      CHANSSL_INT("threshold_period", threshold_period),
      CHANSSL_DOUBLE("ema_momentum", ema_momentum),
      CHANSSL_DOUBLE("confident_min", confident_min),
      CHANSSL_BOOL("shuffle", shuffle),
      CHANSSL_INT("shuffle_grid", shuffle_grid),
      CHANSSL_DOUBLE("iou_car", eval.iou_thresholds[0]),
      CHANSSL_DOUBLE("iou_pedestrian", eval.iou_thresholds[1]),
      CHANSSL_DOUBLE("iou_cyclist", eval.iou_thresholds[2]),
      CHANSSL_INT("recall_positions", eval.recall_positions),
      Key{"eval_split", [](const RunConfig& c) { return c.eval_split; },
          [](RunConfig& c, const std::string& v) { c.eval_split = v; }},
      CHANSSL_PATH("params", params),
  };
  return table;
}

#undef CHANSSL_DOUBLE
#undef CHANSSL_INT
#undef CHANSSL_BOOL
#undef CHANSSL_PATH

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

}  // namespace

std::uint64_t RunConfig::require_seed() const {
  if (!seed) throw ConfigError("config: seed is required (set `seed` or pass --seed)");
  return *seed;
}

void RunConfig::validate() const {
  require_seed();
  require(threads >= 1, "threads must be >= 1");
  require(n_train >= 1 && n_val >= 0, "n_train must be >= 1 and n_val >= 0");
  require(label_fraction > 0.0 && label_fraction <= 1.0, "label_fraction must be in (0, 1]");
  require(synth.max_per_class >= 0 && synth.max_clutter >= 0 && synth.n_ground >= 0,
          "object and ground counts must be >= 0");
  require(synth.object_range_min > 0.0 && synth.object_range_min < synth.object_range_max,
          "object range must satisfy 0 < min < max");
  require(synth.min_pts >= 1 && synth.min_pts <= synth.max_pts, "point limits must satisfy 1 <= min_pts <= max_pts");
  require(detector.voxel_size > 0.0 && detector.range > 0.0 && detector.z_min < detector.z_max,
          "voxel grid extent is empty");
  require(detector.link_radius >= 1 && detector.min_cells >= 1, "link_radius and min_cells must be >= 1");
  require(detector.bg_iou <= detector.fg_iou, "bg_iou must not exceed fg_iou");
  require(n_channels >= 1, "n_channels must be >= 1");
  require(strong_scale_min > 0.0 && strong_scale_min <= strong_scale_max, "strong scale range is invalid");
  require(weak_scale_lo > 0.0 && weak_scale_hi > 0.0, "weak scales must be positive");
  require(strong_flip_prob >= 0.0 && strong_flip_prob <= 1.0, "strong_flip_prob must be in [0, 1]");
  require(pretrain_epochs >= 0 && ssl_epochs >= 0, "epochs must be >= 0");
  require(pretrain_lr > 0.0 && ssl_lr > 0.0, "learning rates must be positive");
  require(threshold_period >= 1, "threshold_period must be >= 1");
  require(ema_momentum >= 0.0 && ema_momentum <= 1.0, "ema_momentum must be in [0, 1]");
  require(shuffle_grid >= 1, "shuffle_grid must be >= 1");
  for (double t : eval.iou_thresholds) require(t > 0.0 && t <= 1.0, "IoU thresholds must be in (0, 1]");
  require(eval.recall_positions >= 1, "recall_positions must be >= 1");
  try {
    weak_policy().validate();
    strong_policy().validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

ChannelPolicy RunConfig::weak_policy() const {
  ChannelPolicy p = ChannelPolicy::weak_default(weak_rot_deg, weak_scale_lo, weak_scale_hi);
  if (n_channels < p.n_channels) {
    p.weak_transforms.resize(static_cast<std::size_t>(n_channels));
    p.n_channels = n_channels;
  } else if (n_channels > p.n_channels) {
    throw ConfigError("config: weak policy defines at most 3 channels");
  }
  return p;
}

ChannelPolicy RunConfig::strong_policy() const {
  StrongRanges r;
  r.rot_min = deg_to_rad(-strong_rot_deg);
  r.rot_max = deg_to_rad(strong_rot_deg);
  r.scale_min = strong_scale_min;
  r.scale_max = strong_scale_max;
  r.flip_prob = strong_flip_prob;
  return ChannelPolicy::strong_default(n_channels, r);
}

SslConfig RunConfig::ssl_config() const {
  SslConfig c;
  c.detector = detector;
  c.teacher_policy = weak_policy();
  c.student_policy = strong_policy();
  c.eval_policy = weak_policy();
  c.eval = eval;
  c.momentum = ema_momentum;
  c.threshold_period = threshold_period;
  c.confident_min = confident_min;
  c.shuffle = shuffle;
  c.shuffle_grid = shuffle_grid;
  c.seed = require_seed();
  c.threads = threads;
  return c;
}

PretrainConfig RunConfig::pretrain_config() const { return {pretrain_epochs, pretrain_lr}; }

RunConfig parse_config(std::string_view text, RunConfig base) {
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(std::string_view(raw).substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    if (eq == std::string::npos) throw ConfigError(where + "expected `key = value`");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!seen.insert(key).second) throw ConfigError(where + "duplicate key `" + key + "`");
    const auto& table = keys();
    const auto it = std::find_if(table.begin(), table.end(), [&](const Key& k) { return k.name == key; });
    if (it == table.end()) throw ConfigError(where + "unknown key `" + key + "`");
    try {
      it->set(base, value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where + "`" + key + "`: " + e.what() + " (`" + value + "`)");
    }
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const Key& k : keys()) {
    const std::string v = k.get(cfg);
    if (v.empty()) continue;
    out += k.name + " = " + v + "\n";
  }
  return out;
}

}  // namespace chanssl
