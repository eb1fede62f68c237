#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "chanssl/geom.hpp"
#include "chanssl/scene.hpp"

namespace chanssl {

struct EvalConfig {
  /// 3D IoU a detection needs to count as a true positive, per foreground class.
  std::array<double, kNumClasses> iou_thresholds{0.7, 0.5, 0.5};
  int recall_positions = 40;

  double threshold(ObjectClass c) const { return iou_thresholds[class_index(c) - 1]; }
};

/// A scored box as seen by the evaluator; confidence ranks detections.
struct EvalBox {
  Box3D box;
  ObjectClass cls = ObjectClass::Car;
  double confidence = 0.0;
};

struct MatchResult {
  /// In descending-confidence order (stable on input order).
  std::vector<std::size_t> order;
  std::vector<bool> tp;        // parallel to `order`
  std::vector<double> confidence;  // parallel to `order`
  std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (detection, gt) input indices
  std::size_t n_gt = 0;
};

/// Greedy matching of one class in one scene: each detection, by descending
/// confidence, takes the unmatched same-class GT with the highest 3D IoU when
/// that IoU reaches `iou_thresh` (ties go to the lower GT index).
MatchResult match_detections(std::span<const EvalBox> dets, std::span<const Box3D> gt_boxes,
                             std::span<const ObjectClass> gt_classes, ObjectClass cls,
                             double iou_thresh);

/// Interpolated AP on the recall grid {1/R, ..., R/R}. `tp` is in ranking
/// order. Returns nullopt when n_gt == 0.
std::optional<double> ap_recall_grid(const std::vector<bool>& tp, std::size_t n_gt,
                                     int recall_positions = 40);

struct ClassAp {
  ObjectClass cls;
  std::optional<double> ap;  // fraction in [0, 1]
  std::size_t n_gt = 0;
};

struct EvalResult {
  std::array<ClassAp, kNumClasses> per_class{};
  /// Mean of the defined per-class APs; nullopt when none is defined.
  std::optional<double> map;
};

/// Pools detections of all scenes per class, ranks them globally and scores
/// AP with the class IoU thresholds.
EvalResult evaluate(std::span<const std::vector<EvalBox>> detections,
                    std::span<const Scene> scenes, const EvalConfig& cfg = {});

struct PseudoBoxRecord {
  Box3D box;
  ObjectClass cls = ObjectClass::Car;
  bool kept = true;  // survived filtering (high or ambiguous)
};

struct PseudoQuality {
  std::size_t total = 0;
  std::size_t incorrect_prefilter = 0;
  std::size_t incorrect_postfilter = 0;
};

/// A pseudo-box is incorrect when its best-IoU GT has another class or the
/// IoU is below the class threshold.
bool pseudo_box_incorrect(const Box3D& box, ObjectClass cls, std::span<const Box3D> gt_boxes,
                          std::span<const ObjectClass> gt_classes, const EvalConfig& cfg);

PseudoQuality pseudo_quality(std::span<const PseudoBoxRecord> pseudo, std::span<const Box3D> gt_boxes,
                             std::span<const ObjectClass> gt_classes, const EvalConfig& cfg = {});

}  // namespace chanssl
