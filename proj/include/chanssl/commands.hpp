#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "chanssl/config.hpp"
#include "chanssl/eval.hpp"
#include "chanssl/ssl.hpp"

namespace chanssl {

// Output file names inside a run directory.
inline constexpr const char* kConfigFile = "config.txt";
inline constexpr const char* kParamsFile = "params.bin";
inline constexpr const char* kStudentFile = "student.bin";
inline constexpr const char* kTeacherFile = "teacher.bin";
inline constexpr const char* kResultsFile = "results.csv";
inline constexpr const char* kTableFile = "table.csv";
inline constexpr const char* kMetricsFile = "metrics.csv";
inline constexpr const char* kIncorrectFile = "incorrect_pseudo_boxes.csv";
inline constexpr const char* kPretrainLossFile = "pretrain_losses.csv";

/// Scenes of a split under a dataset root.
std::vector<Scene> load_split(const std::filesystem::path& root, const std::string& split);

// CSV rows -----------------------------------------------------------------------

/// Header and rows of the results CSV: split, seed, class, AP, mAP (AP in
/// percent; undefined values are written as "nan").
std::string results_csv_header();
std::string results_csv_rows(const EvalResult& r, const std::string& split, std::uint64_t seed);
/// Car, Pedestrian, Cyclist, Avg columns.
std::string table_csv_header();
std::string table_csv_row(const EvalResult& r, const std::string& split, std::uint64_t seed);

std::string metrics_csv_header();
std::string metrics_csv_row(const EpochMetrics& m);

// Commands -------------------------------------------------------------------------
// Each throws ConfigError / IoError (exit 2), ModelCompatibilityError (exit 3).

/// Writes the dataset to cfg.data_root.
void cmd_gen_data(const RunConfig& cfg, std::ostream& log);

/// Trains on the labeled split; writes params, losses and results to cfg.out_dir.
void cmd_pretrain(const RunConfig& cfg, std::ostream& log);

/// Teacher-student training from cfg.params.
void cmd_ssl_train(const RunConfig& cfg, std::ostream& log);

enum class EvalMode { Model, Oracle, Empty };

/// Scores cfg.params (or an oracle / empty detector) on cfg.eval_split.
EvalResult cmd_eval(const RunConfig& cfg, EvalMode mode, std::ostream& log);

struct ReportOptions {
  std::filesystem::path run_dir;
  bool svg = true;
};

/// Splits the metrics CSV of a run into per-topic CSVs (and SVG charts) under
/// <run_dir>/report.
void cmd_report(const ReportOptions& opts, std::ostream& log);

}  // namespace chanssl
