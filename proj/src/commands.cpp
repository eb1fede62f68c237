#include "chanssl/commands.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>

#include "chanssl/data.hpp"
#include "chanssl/errors.hpp"
#include "chanssl/parallel.hpp"
#include "chanssl/rng.hpp"

namespace chanssl {

namespace fs = std::filesystem;

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string percent(const std::optional<double>& v) {
  if (!v) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.4f", 100.0 * *v);
  return buf;
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

using MetricColumn = std::pair<const char*, std::function<std::string(const EpochMetrics&)>>;

const std::vector<MetricColumn>& metric_columns() {
  static const std::vector<MetricColumn> cols = {
      {"epoch", [](const EpochMetrics& m) { return std::to_string(m.epoch); }},
      {"loss_unlabeled_cls", [](const EpochMetrics& m) { return num(m.unlabeled.cls); }},
      {"loss_unlabeled_reg", [](const EpochMetrics& m) { return num(m.unlabeled.reg); }},
      {"loss_unlabeled_obj", [](const EpochMetrics& m) { return num(m.unlabeled.obj); }},
      {"loss_labeled_cls", [](const EpochMetrics& m) { return num(m.labeled.cls); }},
      {"loss_labeled_reg", [](const EpochMetrics& m) { return num(m.labeled.reg); }},
      {"loss_labeled_obj", [](const EpochMetrics& m) { return num(m.labeled.obj); }},
      {"n_high", [](const EpochMetrics& m) { return std::to_string(m.n_high); }},
      {"n_ambiguous", [](const EpochMetrics& m) { return std::to_string(m.n_ambiguous); }},
      {"n_low", [](const EpochMetrics& m) { return std::to_string(m.n_low); }},
      {"incorrect_prefilter", [](const EpochMetrics& m) { return std::to_string(m.incorrect_prefilter); }},
      {"incorrect_postfilter", [](const EpochMetrics& m) { return std::to_string(m.incorrect_postfilter); }},
      {"channel_iou_evals", [](const EpochMetrics& m) { return std::to_string(m.channel_iou_evals); }},
      {"pairing_iou_evals", [](const EpochMetrics& m) { return std::to_string(m.pairing_iou_evals); }},
      {"thresholds_refit", [](const EpochMetrics& m) { return std::string(m.thresholds_refit ? "1" : "0"); }},
      {"tau_low_cls", [](const EpochMetrics& m) { return num(m.thresholds.low[kClassConfidence]); }},
      {"tau_high_cls", [](const EpochMetrics& m) { return num(m.thresholds.high[kClassConfidence]); }},
      {"tau_low_obj", [](const EpochMetrics& m) { return num(m.thresholds.low[kObjectness]); }},
      {"tau_high_obj", [](const EpochMetrics& m) { return num(m.thresholds.high[kObjectness]); }},
      {"tau_low_iou", [](const EpochMetrics& m) { return num(m.thresholds.low[kIouConsistency]); }},
      {"tau_high_iou", [](const EpochMetrics& m) { return num(m.thresholds.high[kIouConsistency]); }},
      {"val_map", [](const EpochMetrics& m) { return num(m.val_map); }},
  };
  return cols;
}

std::vector<EvalBox> oracle_boxes(const Scene& s) {
  std::vector<EvalBox> out;
  for (std::size_t i = 0; i < s.gt_boxes.size(); ++i) out.push_back({s.gt_boxes[i], s.gt_classes[i], 1.0});
  return out;
}

DetectorParams load_model(const fs::path& path) {
  if (path.empty()) throw ConfigError("config: `params` is not set (pass --params)");
  if (!fs::exists(path)) throw IoError("params file not found: " + path.string());
  return load_params(path);
}

void write_results(const fs::path& dir, const char* results_name, const char* table_name,
                   const std::vector<std::pair<std::string, EvalResult>>& results, std::uint64_t seed) {
  std::string csv = results_csv_header();
  std::string table = table_csv_header();
  for (const auto& [split, r] : results) {
    csv += results_csv_rows(r, split, seed);
    table += table_csv_row(r, split, seed);
  }
  write_text(dir / results_name, csv);
  write_text(dir / table_name, table);
}

// Report ------------------------------------------------------------------------------

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

Table read_csv(const fs::path& path) {
  std::istringstream in(read_text(path));
  Table t;
  std::string line;
  if (!std::getline(in, line) || line.empty()) throw IoError("empty CSV: " + path.string());
  t.header = split_csv_line(line);
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto row = split_csv_line(line);
    if (row.size() != t.header.size()) throw ParseError(line_no, "column count mismatch in " + path.string());
    t.rows.push_back(std::move(row));
  }
  return t;
}

std::size_t column_index(const Table& t, const std::string& name) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) throw IoError("metrics CSV lacks column `" + name + "`");
  return static_cast<std::size_t>(it - t.header.begin());
}

std::string svg_chart(const std::string& title, const std::vector<std::string>& names,
                      const std::vector<std::vector<double>>& series, const std::vector<double>& xs) {
  constexpr double W = 640, H = 360, L = 60, R = 170, T = 40, B = 40;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  double xmin = 0, xmax = 1, ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  if (!xs.empty()) {
    xmin = xs.front();
    xmax = std::max(xs.back(), xmin + 1.0);
  }
  for (const auto& s : series)
    for (double v : s)
      if (std::isfinite(v)) {
        ymin = std::min(ymin, v);
        ymax = std::max(ymax, v);
      }
  if (!std::isfinite(ymin)) ymin = 0, ymax = 1;
  if (ymax - ymin < 1e-12) ymax = ymin + 1.0;
  auto px = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto py = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };

  std::ostringstream o;
  char buf[512];
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << L << "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" << title << "</text>\n";
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, H - B,
                W - R, H - B);
  o << buf;
  std::snprintf(buf, sizeof buf, "<line x1=\"%g\" y1=\"%g\" x2=\"%g\" y2=\"%g\" stroke=\"black\"/>\n", L, T, L, H - B);
  o << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%.4g</text>\n"
                "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">%.4g</text>\n",
                L - 4, py(ymax) + 4, ymax, L - 4, py(ymin) + 4, ymin);
  o << buf;
  std::snprintf(buf, sizeof buf,
                "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"10\">epoch</text>\n", (W - R) / 2,
                H - 10);
  o << buf;
  for (std::size_t k = 0; k < series.size(); ++k) {
    const char* color = colors[k % 6];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t i = 0; i < xs.size() && i < series[k].size(); ++i) {
      if (!std::isfinite(series[k][i])) continue;
      std::snprintf(buf, sizeof buf, "%.2f,%.2f ", px(xs[i]), py(series[k][i]));
      o << buf;
    }
    o << "\"/>\n";
    std::snprintf(buf, sizeof buf,
                  "<text x=\"%g\" y=\"%g\" font-family=\"sans-serif\" font-size=\"11\" fill=\"%s\">", W - R + 10,
                  T + 16.0 * k, color);
    o << buf << names[k] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

double to_number(const std::string& s) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  try {
    return std::stod(s);
  } catch (const std::exception&) {
    return std::numeric_limits<double>::quiet_NaN();
  }
}

}  // namespace

std::vector<Scene> load_split(const fs::path& root, const std::string& split) {
  if (!fs::is_directory(root)) throw IoError("dataset root not found: " + root.string());
  std::vector<Scene> scenes;
  for (const std::string& id : read_split_file(root, split)) scenes.push_back(read_scene(root, id));
  return scenes;
}

std::string results_csv_header() { return "split,seed,class,AP,mAP\n"; }

std::string results_csv_rows(const EvalResult& r, const std::string& split, std::uint64_t seed) {
  std::string out;
  for (const ClassAp& c : r.per_class) {
    out += split + "," + std::to_string(seed) + "," + std::string(class_name(c.cls)) + "," + percent(c.ap) +
           "," + percent(r.map) + "\n";
  }
  return out;
}

std::string table_csv_header() { return "split,seed,Car,Pedestrian,Cyclist,Avg\n"; }

std::string table_csv_row(const EvalResult& r, const std::string& split, std::uint64_t seed) {
  std::string out = split + "," + std::to_string(seed);
  for (const ClassAp& c : r.per_class) out += "," + percent(c.ap);
  return out + "," + percent(r.map) + "\n";
}

std::string metrics_csv_header() {
  std::string out;
  for (const auto& [name, _] : metric_columns()) out += (out.empty() ? "" : ",") + std::string(name);
  return out + "\n";
}

std::string metrics_csv_row(const EpochMetrics& m) {
  std::string out;
  bool first = true;
  for (const auto& [_, get] : metric_columns()) {
    out += (first ? "" : ",") + get(m);
    first = false;
  }
  return out + "\n";
}

void cmd_gen_data(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  const fs::path& root = cfg.data_root;
  ensure_dir(root / "points");
  ensure_dir(root / "labels");
  ensure_dir(root / "splits");

  const std::size_t n_train = static_cast<std::size_t>(cfg.n_train);
  const std::size_t n_total = n_train + static_cast<std::size_t>(cfg.n_val);
  std::vector<std::string> ids(n_total);
  parallel_for(n_total, cfg.threads, [&](std::size_t i) {
    ids[i] = scene_id(i);
    write_scene(root, synth_scene(mix_seed(seed, i), cfg.synth, ids[i]));
  });

  const Split split = split_sample(n_train, {cfg.label_fraction, seed});
  std::vector<std::string> labeled, unlabeled;
  for (std::size_t i : split.labeled) labeled.push_back(ids[i]);
  for (std::size_t i : split.unlabeled) unlabeled.push_back(ids[i]);
  const std::vector<std::string> train(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  const std::vector<std::string> val(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  write_split_file(root, "train", train);
  write_split_file(root, "labeled", labeled);
  write_split_file(root, "unlabeled", unlabeled);
  write_split_file(root, "val", val);
  write_text(root / kConfigFile, to_config_text(cfg));
  log << "gen-data: " << n_train << " train (" << labeled.size() << " labeled, " << unlabeled.size()
      << " unlabeled), " << val.size() << " val -> " << root.string() << "\n";
}

void cmd_pretrain(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<Scene> labeled = load_split(cfg.data_root, "labeled");
  const std::vector<Scene> val = load_split(cfg.data_root, "val");
  ensure_dir(cfg.out_dir);
  write_text(cfg.out_dir / kConfigFile, to_config_text(cfg));

  DetectorParams params;
  params.learning_rate = cfg.pretrain_lr;
  const std::vector<Losses> history =
      pretrain(params, labeled, ChannelPolicy::single(), cfg.detector, cfg.pretrain_config(), seed);
  std::string losses = "epoch,cls,reg,obj,total\n";
  for (std::size_t e = 0; e < history.size(); ++e) {
    const Losses& l = history[e];
    losses += std::to_string(e + 1) + "," + num(l.cls) + "," + num(l.reg) + "," + num(l.obj) + "," +
              num(l.total()) + "\n";
  }
  write_text(cfg.out_dir / kPretrainLossFile, losses);
  save_params(params, cfg.out_dir / kParamsFile);

  const ChannelPolicy policy = cfg.weak_policy();
  const EvalResult on_labeled = evaluate_detector(params, labeled, policy, cfg.detector, cfg.eval, cfg.threads);
  const EvalResult on_val = evaluate_detector(params, val, policy, cfg.detector, cfg.eval, cfg.threads);
  write_results(cfg.out_dir, kResultsFile, kTableFile, {{"labeled", on_labeled}, {"val", on_val}}, seed);
  log << "pretrain: " << labeled.size() << " labeled scenes, " << cfg.pretrain_epochs << " epochs, labeled mAP "
      << percent(on_labeled.map) << ", val mAP " << percent(on_val.map) << " (" << num(seconds_since(t0))
      << " s)\n";
}

void cmd_ssl_train(const RunConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  const auto t0 = std::chrono::steady_clock::now();
  const DetectorParams init = load_model(cfg.params);
  const std::vector<Scene> labeled = load_split(cfg.data_root, "labeled");
  const std::vector<Scene> unlabeled = load_split(cfg.data_root, "unlabeled");
  const std::vector<Scene> val = load_split(cfg.data_root, "val");
  ensure_dir(cfg.out_dir);
  write_text(cfg.out_dir / kConfigFile, to_config_text(cfg));

  const SslConfig ssl = cfg.ssl_config();
  SslState state = init_ssl_state(init, cfg.ema_momentum);
  state.student.learning_rate = cfg.ssl_lr;

  std::string metrics = metrics_csv_header();
  std::string incorrect = "epoch,incorrect_prefilter,incorrect_postfilter\n";
  write_text(cfg.out_dir / kMetricsFile, metrics);
  for (int e = 0; e < cfg.ssl_epochs; ++e) {
    const EpochMetrics m = ssl_epoch(state, labeled, unlabeled, val, ssl);
    metrics += metrics_csv_row(m);
    incorrect += std::to_string(m.epoch) + "," + std::to_string(m.incorrect_prefilter) + "," +
                 std::to_string(m.incorrect_postfilter) + "\n";
    write_text(cfg.out_dir / kMetricsFile, metrics);
    log << "ssl-train: epoch " << m.epoch << " high/ambiguous/low " << m.n_high << "/" << m.n_ambiguous << "/"
        << m.n_low << " incorrect " << m.incorrect_prefilter << "/" << m.incorrect_postfilter << " val mAP "
        << num(100.0 * m.val_map) << "\n";
  }
  write_text(cfg.out_dir / kIncorrectFile, incorrect);

  // Saved files keep the learning rate of the input parameters.
  DetectorParams student = state.student;
  student.learning_rate = init.learning_rate;
  DetectorParams teacher = state.teacher.params;
  teacher.learning_rate = init.learning_rate;
  save_params(student, cfg.out_dir / kStudentFile);
  save_params(teacher, cfg.out_dir / kTeacherFile);

  const ChannelPolicy policy = cfg.weak_policy();
  const EvalResult r_student = evaluate_detector(student, val, policy, cfg.detector, cfg.eval, cfg.threads);
  const EvalResult r_teacher = evaluate_detector(teacher, val, policy, cfg.detector, cfg.eval, cfg.threads);
  write_results(cfg.out_dir, kResultsFile, kTableFile, {{"val", r_student}}, seed);
  write_results(cfg.out_dir, "teacher_results.csv", "teacher_table.csv", {{"val", r_teacher}}, seed);
  log << "ssl-train: " << cfg.ssl_epochs << " epochs, student val mAP " << percent(r_student.map)
      << ", teacher val mAP " << percent(r_teacher.map) << " (" << num(seconds_since(t0)) << " s)\n";
}

EvalResult cmd_eval(const RunConfig& cfg, EvalMode mode, std::ostream& log) {
  cfg.validate();
  const std::uint64_t seed = cfg.require_seed();
  DetectorParams params;
  if (mode == EvalMode::Model) params = load_model(cfg.params);
  const std::vector<Scene> scenes = load_split(cfg.data_root, cfg.eval_split);

  std::vector<std::vector<EvalBox>> dets(scenes.size());
  const ChannelPolicy policy = cfg.weak_policy();
  parallel_for(scenes.size(), cfg.threads, [&](std::size_t i) {
    switch (mode) {
      case EvalMode::Model:
        dets[i] = to_eval_boxes(detect(scenes[i].cloud, policy, params, cfg.detector, 0));
        break;
      case EvalMode::Oracle: dets[i] = oracle_boxes(scenes[i]); break;
      case EvalMode::Empty: break;
    }
  });
  const EvalResult r = evaluate(dets, scenes, cfg.eval);
  ensure_dir(cfg.out_dir);
  write_results(cfg.out_dir, kResultsFile, kTableFile, {{cfg.eval_split, r}}, seed);
  log << "eval: " << scenes.size() << " scenes (" << cfg.eval_split << "), mAP " << percent(r.map) << "\n";
  return r;
}

void cmd_report(const ReportOptions& opts, std::ostream& log) {
  const Table t = read_csv(opts.run_dir / kMetricsFile);
  const fs::path out = opts.run_dir / "report";
  ensure_dir(out);

  struct Group {
    const char* name;
    const char* title;
    std::vector<std::string> columns;
  };
  const std::vector<Group> groups = {
      {"losses", "Training losses",
       {"loss_unlabeled_cls", "loss_unlabeled_reg", "loss_unlabeled_obj", "loss_labeled_cls", "loss_labeled_reg",
        "loss_labeled_obj"}},
      {"levels", "Pseudo-boxes per level", {"n_high", "n_ambiguous", "n_low"}},
      {"incorrect", "Incorrect pseudo-boxes", {"incorrect_prefilter", "incorrect_postfilter"}},
      {"pair_evals", "IoU evaluations: channel vs pairing", {"channel_iou_evals", "pairing_iou_evals"}},
      {"val_map", "Validation mAP", {"val_map"}},
  };
  const std::size_t epoch_col = column_index(t, "epoch");
  std::vector<double> xs;
  for (const auto& row : t.rows) xs.push_back(to_number(row[epoch_col]));

  for (const Group& g : groups) {
    std::vector<std::size_t> idx;
    for (const std::string& c : g.columns) idx.push_back(column_index(t, c));
    std::string csv = "epoch";
    for (const std::string& c : g.columns) csv += "," + c;
    csv += "\n";
    std::vector<std::vector<double>> series(idx.size());
    for (const auto& row : t.rows) {
      csv += row[epoch_col];
      for (std::size_t k = 0; k < idx.size(); ++k) {
        csv += "," + row[idx[k]];
        series[k].push_back(to_number(row[idx[k]]));
      }
      csv += "\n";
    }
    write_text(out / (std::string(g.name) + ".csv"), csv);
    if (opts.svg) write_text(out / (std::string(g.name) + ".svg"), svg_chart(g.title, g.columns, series, xs));
  }
  log << "report: " << t.rows.size() << " epochs -> " << out.string() << (opts.svg ? "" : " (no SVG)") << "\n";
}

}  // namespace chanssl
