#include "chanssl/eval.hpp"

#include <algorithm>
#include <numeric>
#include <stdexcept>

namespace chanssl {

MatchResult match_detections(std::span<const EvalBox> dets, std::span<const Box3D> gt_boxes,
                             std::span<const ObjectClass> gt_classes, ObjectClass cls,
                             double iou_thresh) {
  if (gt_boxes.size() != gt_classes.size())
    throw std::invalid_argument("match_detections: gt boxes/classes size mismatch");
  MatchResult result;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].cls == cls) result.order.push_back(i);
  std::stable_sort(result.order.begin(), result.order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });

  std::vector<std::size_t> gts;
  for (std::size_t g = 0; g < gt_boxes.size(); ++g)
    if (gt_classes[g] == cls) gts.push_back(g);
  result.n_gt = gts.size();

  std::vector<bool> taken(gt_boxes.size(), false);
  for (std::size_t d : result.order) {
    double best = -1.0;
    std::size_t best_gt = 0;
    for (std::size_t g : gts) {
      if (taken[g]) continue;
      const double iou = iou_3d(dets[d].box, gt_boxes[g]);
      if (iou > best) {
        best = iou;
        best_gt = g;
      }
    }
    const bool hit = best >= iou_thresh && best >= 0.0;
    if (hit) {
      taken[best_gt] = true;
      result.pairs.emplace_back(d, best_gt);
    }
    result.tp.push_back(hit);
    result.confidence.push_back(dets[d].confidence);
  }
  return result;
}

std::optional<double> ap_recall_grid(const std::vector<bool>& tp, std::size_t n_gt, int recall_positions) {
  if (n_gt == 0) return std::nullopt;
  if (recall_positions < 1) throw std::invalid_argument("ap_recall_grid: recall_positions must be >= 1");

  // Precision envelope from the back: best precision at rank >= k.
  const std::size_t n = tp.size();
  std::vector<std::size_t> cum_tp(n);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < n; ++k) {
    hits += tp[k] ? 1 : 0;
    cum_tp[k] = hits;
  }
  std::vector<double> envelope(n + 1, 0.0);
  for (std::size_t k = n; k-- > 0;)
    envelope[k] = std::max(envelope[k + 1], static_cast<double>(cum_tp[k]) / static_cast<double>(k + 1));

  // Recall at rank k reaches grid point j/R iff R * tp_k >= j * n_gt.
  double sum = 0.0;
  std::size_t k = 0;
  const auto positions = static_cast<std::size_t>(recall_positions);
  for (std::size_t j = 1; j <= positions; ++j) {
    while (k < n && positions * cum_tp[k] < j * n_gt) ++k;
    if (k == n) break;
    sum += envelope[k];
  }
  return sum / static_cast<double>(recall_positions);
}

EvalResult evaluate(std::span<const std::vector<EvalBox>> detections, std::span<const Scene> scenes,
                    const EvalConfig& cfg) {
  if (detections.size() != scenes.size())
    throw std::invalid_argument("evaluate: one detection list per scene required");
  EvalResult result;
  double sum = 0.0;
  int defined = 0;
  for (int ci = 0; ci < kNumClasses; ++ci) {
    const ObjectClass cls = kForegroundClasses[ci];
    std::vector<std::pair<double, bool>> ranked;
    std::size_t n_gt = 0;
    for (std::size_t s = 0; s < scenes.size(); ++s) {
      const MatchResult m = match_detections(detections[s], scenes[s].gt_boxes, scenes[s].gt_classes,
                                             cls, cfg.threshold(cls));
      n_gt += m.n_gt;
      for (std::size_t k = 0; k < m.tp.size(); ++k) ranked.emplace_back(m.confidence[k], m.tp[k]);
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.first > b.first; });
    std::vector<bool> flags;
    flags.reserve(ranked.size());
    for (const auto& r : ranked) flags.push_back(r.second);
    result.per_class[ci] = {cls, ap_recall_grid(flags, n_gt, cfg.recall_positions), n_gt};
    if (result.per_class[ci].ap) {
      sum += *result.per_class[ci].ap;
      ++defined;
    }
  }
  if (defined > 0) result.map = sum / defined;
  return result;
}

bool pseudo_box_incorrect(const Box3D& box, ObjectClass cls, std::span<const Box3D> gt_boxes,
                          std::span<const ObjectClass> gt_classes, const EvalConfig& cfg) {
  double best = 0.0;
  std::size_t best_idx = gt_boxes.size();
  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    const double iou = iou_3d(box, gt_boxes[g]);
    if (iou > best) {
      best = iou;
      best_idx = g;
    }
  }
  if (best_idx == gt_boxes.size()) return true;
  return gt_classes[best_idx] != cls || best < cfg.threshold(cls);
}

PseudoQuality pseudo_quality(std::span<const PseudoBoxRecord> pseudo, std::span<const Box3D> gt_boxes,
                             std::span<const ObjectClass> gt_classes, const EvalConfig& cfg) {
  PseudoQuality q;
  q.total = pseudo.size();
  for (const PseudoBoxRecord& p : pseudo) {
    if (!pseudo_box_incorrect(p.box, p.cls, gt_boxes, gt_classes, cfg)) continue;
    ++q.incorrect_prefilter;
    if (p.kept) ++q.incorrect_postfilter;
  }
  return q;
}

}  // namespace chanssl
