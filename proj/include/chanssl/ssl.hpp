#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "chanssl/augment.hpp"
#include "chanssl/detector.hpp"
#include "chanssl/eval.hpp"
#include "chanssl/geom.hpp"
#include "chanssl/scene.hpp"

namespace chanssl {

enum class Level { High, Ambiguous, Low };

std::string_view level_name(Level level);

/// Quality criteria, in the order used by DualThresholds.
enum Criterion : int { kClassConfidence = 0, kObjectness = 1, kIouConsistency = 2 };
inline constexpr int kNumCriteria = 3;

struct PseudoBox {
  Box3D box;
  ObjectClass cls = ObjectClass::Car;
  double p_hat = 0.0;
  double o_hat = 0.0;
  double iou_cons = 0.0;
  Level level = Level::Low;
  double weight = 0.0;

  std::array<double, kNumCriteria> scores() const { return {p_hat, o_hat, iou_cons}; }
};

struct DualThresholds {
  std::array<double, kNumCriteria> low{};
  std::array<double, kNumCriteria> high{};
  /// Criteria whose fit fell back to the median (fewer than 3 distinct values).
  std::array<bool, kNumCriteria> degenerate{};

  bool valid() const;
};

struct EmaTeacher {
  DetectorParams params;
  double momentum = 0.999;
};

// Consistency ---------------------------------------------------------------------

/// Mean 3D IoU over all unordered pairs of a detection's per-channel boxes
/// (already in the canonical frame). Fewer than two boxes score 1.
double channel_iou_consistency(std::span<const Box3D> channel_boxes, IouCounter* counter = nullptr);
double channel_iou_consistency(const Detection& det, IouCounter* counter = nullptr);

/// Pairing comparator: for every box of `a`, the best 3D IoU against all of
/// `b` (0 when `b` is empty). Evaluates |a| * |b| IoUs.
std::vector<double> hssda_iou_consistency(std::span<const Box3D> a, std::span<const Box3D> b,
                                          IouCounter* counter = nullptr);

// Thresholds ----------------------------------------------------------------------

struct Clusters1D {
  std::array<double, 3> centers{};
  /// Sizes of the three contiguous groups of the sorted input.
  std::array<std::size_t, 3> sizes{};
  double sse = 0.0;
  bool degenerate = false;
};

/// Optimal 3-means of scalar values: the contiguous partition of the sorted
/// values with minimal within-group squared error. Degenerate (fewer than
/// three distinct values) returns the median as every center.
Clusters1D kmeans3_1d(std::span<const double> values);

/// Per criterion: boundaries are the midpoints between adjacent centers.
DualThresholds fit_dual_thresholds(std::span<const PseudoBox> boxes);

/// Applies the confident-box pre-filter (p_hat * o_hat >= min_confidence)
/// and fits; nullopt when fewer than three boxes remain.
std::optional<DualThresholds> fit_dual_thresholds_confident(std::span<const PseudoBox> boxes,
                                                            double min_confidence = 0.1);

// Stratification ---------------------------------------------------------------------

/// High when every criterion reaches its high threshold, low when any falls
/// below its low threshold, ambiguous otherwise.
Level assign_level(const std::array<double, kNumCriteria>& scores, const DualThresholds& thr);
/// 0 for low, p_hat * o_hat for ambiguous, 1 for high.
double level_weight(Level level, double p_hat, double o_hat);

std::vector<PseudoBox> stratify(std::vector<PseudoBox> boxes, const DualThresholds& thr);

PointCloud remove_low_level_points(std::span<const Point> cloud, std::span<const Box3D> low_boxes);

PseudoBox make_pseudo_box(const Detection& det, IouCounter* counter = nullptr);

// EMA --------------------------------------------------------------------------------

void ema_update(EmaTeacher& teacher, const DetectorParams& student);

// Training loop ------------------------------------------------------------------------

struct SslConfig {
  DetectorConfig detector;
  ChannelPolicy teacher_policy = ChannelPolicy::weak_default();
  ChannelPolicy student_policy = ChannelPolicy::strong_default();
  ChannelPolicy eval_policy = ChannelPolicy::weak_default();
  EvalConfig eval;
  double momentum = 0.999;
  int threshold_period = 5;
  double confident_min = 0.1;
  bool shuffle = true;
  int shuffle_grid = 4;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct SslState {
  DetectorParams student;
  EmaTeacher teacher;
  std::optional<DualThresholds> thresholds;
  int epoch = 0;  // completed epochs
};

struct EpochMetrics {
  int epoch = 0;
  Losses unlabeled;  // mean per step
  Losses labeled;
  std::size_t unlabeled_steps = 0;
  std::size_t labeled_steps = 0;
  std::size_t n_high = 0, n_ambiguous = 0, n_low = 0;
  std::size_t incorrect_prefilter = 0;
  std::size_t incorrect_postfilter = 0;
  std::uint64_t channel_iou_evals = 0;
  std::uint64_t pairing_iou_evals = 0;
  bool thresholds_refit = false;
  DualThresholds thresholds;
  double val_map = 0.0;
};

SslState init_ssl_state(const DetectorParams& pretrained, double momentum);

/// One epoch of teacher-student training. Throws NonFiniteLossError naming
/// the offending scene.
EpochMetrics ssl_epoch(SslState& state, std::span<const Scene> labeled,
                       std::span<const Scene> unlabeled, std::span<const Scene> validation,
                       const SslConfig& cfg);

// Shared helpers -------------------------------------------------------------------------

/// Detections converted for the evaluator (class = top foreground class,
/// confidence = p_hat * o_hat).
std::vector<EvalBox> to_eval_boxes(std::span<const Detection> dets);

EvalResult evaluate_detector(const DetectorParams& params, std::span<const Scene> scenes,
                             const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                             const EvalConfig& eval_cfg, int threads);

/// One supervised pass over `scenes` (ground-truth targets, weight 1).
Losses supervised_epoch(DetectorParams& params, std::span<const Scene> scenes,
                        const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                        std::uint64_t seed, int epoch);

struct PretrainConfig {
  int epochs = 80;
  /// Base learning rate, decayed per epoch with a half cosine to 0.
  double learning_rate = 0.05;
};

/// Supervised single-view pretraining. Returns the mean losses of every
/// epoch; `params.learning_rate` is left at the base rate.
std::vector<Losses> pretrain(DetectorParams& params, std::span<const Scene> scenes,
                             const ChannelPolicy& policy, const DetectorConfig& det_cfg,
                             const PretrainConfig& cfg, std::uint64_t seed);

}  // namespace chanssl
