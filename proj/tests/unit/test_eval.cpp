#include <gtest/gtest.h>

#include <random>

#include "chanssl/eval.hpp"
#include "oracles.hpp"

using namespace chanssl;

namespace {

const Box3D kCar{0, 0, 0.75, 1.6, 1.5, 3.9, 0};

Scene scene_with(std::vector<Box3D> boxes, std::vector<ObjectClass> classes) {
  Scene s;
  s.gt_boxes = std::move(boxes);
  s.gt_classes = std::move(classes);
  return s;
}

}  // namespace

TEST(ApRecallGrid, HandCases) {
  EXPECT_DOUBLE_EQ(*ap_recall_grid({true}, 1), 1.0);
  EXPECT_DOUBLE_EQ(*ap_recall_grid({}, 1), 0.0);
  EXPECT_DOUBLE_EQ(*ap_recall_grid({true}, 2), 0.5);
  EXPECT_FALSE(ap_recall_grid({false}, 0).has_value());
  EXPECT_DOUBLE_EQ(*ap_recall_grid({false, true}, 1), 0.5);
}

TEST(ApRecallGrid, MatchesFullCurveOracle) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 2000; ++trial) {
    const std::size_t n = rng() % 21;
    std::vector<bool> tp(n);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < n; ++i) hits += (tp[i] = rng() % 2 == 0) ? 1 : 0;
    const std::size_t n_gt = hits + rng() % 4 + (hits == 0 ? 1 : 0);
    const int positions = trial % 2 == 0 ? 40 : 11;
    EXPECT_NEAR(*ap_recall_grid(tp, n_gt, positions), oracle::brute_force_ap(tp, n_gt, positions), 1e-12);
  }
}

TEST(ApRecallGrid, MonotoneInTpAndFp) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<bool> tp(rng() % 15);
    for (std::size_t i = 0; i < tp.size(); ++i) tp[i] = rng() % 2 == 0;
    const std::size_t n_gt = tp.size() + 2;
    const double base = *ap_recall_grid(tp, n_gt);
    const std::size_t pos = tp.empty() ? 0 : rng() % (tp.size() + 1);
    auto with_tp = tp, with_fp = tp;
    with_tp.insert(with_tp.begin() + static_cast<long>(pos), true);
    with_fp.insert(with_fp.begin() + static_cast<long>(pos), false);
    EXPECT_GE(*ap_recall_grid(with_tp, n_gt), base - 1e-15);
    EXPECT_LE(*ap_recall_grid(with_fp, n_gt), base + 1e-15);
  }
}

TEST(Match, GreedyByConfidence) {
  const std::vector<Box3D> gts{kCar};
  const std::vector<ObjectClass> cls{ObjectClass::Car};
  const std::vector<EvalBox> dets{{kCar, ObjectClass::Car, 0.4}, {kCar, ObjectClass::Car, 0.9}};
  const MatchResult m = match_detections(dets, gts, cls, ObjectClass::Car, 0.7);
  ASSERT_EQ(m.order.size(), 2u);
  EXPECT_EQ(m.order[0], 1u);
  EXPECT_TRUE(m.tp[0]);
  EXPECT_FALSE(m.tp[1]);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0], (std::pair<std::size_t, std::size_t>{1, 0}));

  const MatchResult none = match_detections(dets, {}, {}, ObjectClass::Car, 0.7);
  EXPECT_EQ(none.tp, (std::vector<bool>{false, false}));
  EXPECT_EQ(none.n_gt, 0u);
}

TEST(Match, PicksHighestIouAndIgnoresOtherClasses) {
  Box3D near = kCar, far = kCar;
  near.cx = 0.1;
  far.cx = 0.6;
  const std::vector<Box3D> gts{far, near, kCar};
  const std::vector<ObjectClass> cls{ObjectClass::Car, ObjectClass::Car, ObjectClass::Pedestrian};
  const std::vector<EvalBox> dets{{kCar, ObjectClass::Car, 0.5}, {kCar, ObjectClass::Pedestrian, 0.5}};
  const MatchResult m = match_detections(dets, gts, cls, ObjectClass::Car, 0.7);
  EXPECT_EQ(m.n_gt, 2u);
  ASSERT_EQ(m.order.size(), 1u);
  ASSERT_EQ(m.pairs.size(), 1u);
  EXPECT_EQ(m.pairs[0].second, 1u);
}

TEST(Evaluate, PerfectAndEmptyDetections) {
  Box3D ped{5, 5, 0.9, 0.6, 1.75, 0.8, 0.3};
  const std::vector<Scene> scenes{scene_with({kCar, ped}, {ObjectClass::Car, ObjectClass::Pedestrian}),
                                  scene_with({}, {})};
  std::vector<std::vector<EvalBox>> perfect{{{kCar, ObjectClass::Car, 0.9}, {ped, ObjectClass::Pedestrian, 0.8}},
                                            {}};
  const EvalResult r = evaluate(perfect, scenes);
  EXPECT_DOUBLE_EQ(*r.per_class[0].ap, 1.0);
  EXPECT_DOUBLE_EQ(*r.per_class[1].ap, 1.0);
  EXPECT_FALSE(r.per_class[2].ap.has_value());
  EXPECT_DOUBLE_EQ(*r.map, 1.0);

  const std::vector<std::vector<EvalBox>> empty(2);
  const EvalResult e = evaluate(empty, scenes);
  EXPECT_DOUBLE_EQ(*e.map, 0.0);

  const std::vector<Scene> no_gt{scene_with({}, {})};
  EXPECT_FALSE(evaluate(std::vector<std::vector<EvalBox>>(1), no_gt).map.has_value());
}

TEST(Evaluate, PoolsAcrossScenesAndRanksGlobally) {
  const std::vector<Scene> scenes{scene_with({kCar}, {ObjectClass::Car}),
                                  scene_with({kCar}, {ObjectClass::Car})};
  Box3D off = kCar;
  off.cx = 5;
  // Ranking: FP(0.9), TP(0.8), TP(0.1) -> precisions 0, 1/2, 2/3; the
  // interpolated precision is 2/3 at every recall position.
  std::vector<std::vector<EvalBox>> dets{{{off, ObjectClass::Car, 0.9}, {kCar, ObjectClass::Car, 0.1}},
                                         {{kCar, ObjectClass::Car, 0.8}}};
  const EvalResult r = evaluate(dets, scenes);
  EXPECT_NEAR(*r.per_class[0].ap, 2.0 / 3.0, 1e-12);
}

TEST(PseudoQuality, Counts) {
  const std::vector<Box3D> gts{kCar};
  const std::vector<ObjectClass> cls{ObjectClass::Car};
  Box3D empty_space = kCar;
  empty_space.cx = 20;
  EXPECT_FALSE(pseudo_box_incorrect(kCar, ObjectClass::Car, gts, cls, {}));
  EXPECT_TRUE(pseudo_box_incorrect(kCar, ObjectClass::Cyclist, gts, cls, {}));
  EXPECT_TRUE(pseudo_box_incorrect(empty_space, ObjectClass::Car, gts, cls, {}));
  const std::vector<PseudoBoxRecord> recs{{kCar, ObjectClass::Car, true},
                                          {empty_space, ObjectClass::Car, false},
                                          {kCar, ObjectClass::Pedestrian, true}};
  const PseudoQuality q = pseudo_quality(recs, gts, cls);
  EXPECT_EQ(q.total, 3u);
  EXPECT_EQ(q.incorrect_prefilter, 2u);
  EXPECT_EQ(q.incorrect_postfilter, 1u);
}
