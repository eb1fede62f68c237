#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "chanssl/data.hpp"
#include "chanssl/errors.hpp"
#include "chanssl/rng.hpp"
#include "chanssl/ssl.hpp"
#include "oracles.hpp"

using namespace chanssl;

namespace {

DualThresholds uniform_thresholds(double lo, double hi) {
  DualThresholds t;
  t.low.fill(lo);
  t.high.fill(hi);
  return t;
}

PseudoBox scored(double p, double o, double iou) {
  PseudoBox b;
  b.p_hat = p;
  b.o_hat = o;
  b.iou_cons = iou;
  return b;
}

std::vector<Scene> scenes(std::size_t n, std::uint64_t base) {
  std::vector<Scene> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(synth_scene(mix_seed(base, i), {}, scene_id(i)));
  return out;
}

}  // namespace

TEST(ChannelConsistency, IdenticalBoxesScoreOne) {
  const Box3D b{1, 2, 0.8, 1.6, 1.5, 3.9, 0.3};
  const std::vector<Box3D> boxes{b, b, b};
  EXPECT_DOUBLE_EQ(channel_iou_consistency(boxes), 1.0);
  EXPECT_DOUBLE_EQ(channel_iou_consistency(std::span<const Box3D>(boxes).first(1)), 1.0);
}

TEST(ChannelConsistency, MeanOfPairwiseIous) {
  const Box3D a{0, 0, 0, 2, 2, 2, 0};
  Box3D b = a, c = a;
  b.cx = 0.2;
  c.cy = -0.5;
  const std::vector<Box3D> boxes{a, b, c};
  const double expect = (iou_3d(a, b) + iou_3d(a, c) + iou_3d(b, c)) / 3.0;
  EXPECT_NEAR(channel_iou_consistency(boxes), expect, 1e-15);
  // Hand values: shift 0.2 -> 1.8/2.2, shift 0.5 -> 1.5/2.5.
  EXPECT_NEAR(iou_3d(a, b), 1.8 / 2.2, 1e-12);
  EXPECT_NEAR(iou_3d(a, c), 1.5 / 2.5, 1e-12);
}

TEST(PairingConsistency, SelfMatchAndEmpty) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-10, 10);
  std::vector<Box3D> a;
  for (int i = 0; i < 6; ++i) a.push_back({u(rng), u(rng), 0.8, 1.6, 1.5, 3.9, 0.1 * i});
  for (double s : hssda_iou_consistency(a, a)) EXPECT_DOUBLE_EQ(s, 1.0);
  for (double s : hssda_iou_consistency(a, {})) EXPECT_DOUBLE_EQ(s, 0.0);
}

TEST(PairingConsistency, AgreesWithChannelMethodUnderCorrespondence) {
  // Two channels, boxes far apart: each box's best match is its counterpart.
  std::vector<Box3D> ch1, ch2;
  for (int i = 0; i < 5; ++i) {
    const Box3D b{10.0 * i, 0, 0.8, 1.6, 1.5, 3.9, 0.2};
    Box3D shifted = b;
    shifted.cx += 0.05 * i;
    ch1.push_back(b);
    ch2.push_back(shifted);
  }
  const auto pairing = hssda_iou_consistency(ch1, ch2);
  for (int i = 0; i < 5; ++i) {
    const std::vector<Box3D> det{ch1[i], ch2[i]};
    EXPECT_NEAR(channel_iou_consistency(det), pairing[i], 1e-9);
  }
}

TEST(Consistency, EvaluationCountsAreLinearVersusQuadratic) {
  const std::size_t n1 = 17, n2 = 23;
  std::vector<Detection> dets(n1);
  std::vector<Box3D> ch1, other(n2);
  for (std::size_t i = 0; i < n1; ++i) {
    dets[i].per_channel_boxes.assign(3, Box3D{static_cast<double>(i), 0, 0, 1, 1, 1, 0});
    ch1.push_back(dets[i].per_channel_boxes[0]);
  }
  IouCounter channel, pairing;
  for (const Detection& d : dets) channel_iou_consistency(d, &channel);
  hssda_iou_consistency(ch1, other, &pairing);
  EXPECT_EQ(channel.value(), 3 * n1);
  EXPECT_EQ(pairing.value(), n1 * n2);
}

TEST(KMeans, WorkedExample) {
  const std::vector<double> v{0.1, 0.12, 0.5, 0.52, 0.9, 0.92};
  const Clusters1D c = kmeans3_1d(v);
  EXPECT_FALSE(c.degenerate);
  EXPECT_NEAR(c.centers[0], 0.11, 1e-12);
  EXPECT_NEAR(c.centers[1], 0.51, 1e-12);
  EXPECT_NEAR(c.centers[2], 0.91, 1e-12);
  std::vector<PseudoBox> boxes;
  for (double s : v) boxes.push_back(scored(s, s, s));
  const DualThresholds t = fit_dual_thresholds(boxes);
  for (int k = 0; k < kNumCriteria; ++k) {
    EXPECT_NEAR(t.low[k], 0.31, 1e-12);
    EXPECT_NEAR(t.high[k], 0.71, 1e-12);
  }
}

TEST(KMeans, MatchesBruteForcePartition) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 3 + rng() % 40;
    std::vector<double> v(n);
    for (double& x : v) x = trial % 3 == 0 ? std::round(u(rng) * 10) / 10 : u(rng);
    const Clusters1D c = kmeans3_1d(v);
    std::vector<double> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    if (std::unique(sorted.begin(), sorted.end()) - sorted.begin() < 3) {
      EXPECT_TRUE(c.degenerate);
      continue;
    }
    const auto oracle_part = oracle::brute_force_3partition(v);
    EXPECT_NEAR(c.sse, oracle_part.sse, 1e-9) << "trial " << trial;
    // Quantized inputs can have several optimal partitions.
    if (trial % 3 == 0) continue;
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(c.centers[k], oracle_part.centers[k], 1e-9);
  }
}

TEST(KMeans, DuplicatePointMovesThresholdsContinuously) {
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> v(12);
    for (double& x : v) x = u(rng);
    std::vector<double> w = v;
    w.push_back(v[rng() % v.size()]);
    const auto a = kmeans3_1d(w);
    const auto b = oracle::brute_force_3partition(w);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(a.centers[k], b.centers[k], 1e-9);
  }
}

TEST(KMeans, DegenerateInputUsesMedian) {
  const std::vector<double> same(5, 0.4);
  const Clusters1D c = kmeans3_1d(same);
  EXPECT_TRUE(c.degenerate);
  for (double x : c.centers) EXPECT_DOUBLE_EQ(x, 0.4);
  std::vector<PseudoBox> boxes(4, scored(0.4, 0.4, 0.4));
  const DualThresholds t = fit_dual_thresholds(boxes);
  for (int k = 0; k < kNumCriteria; ++k) {
    EXPECT_TRUE(t.degenerate[k]);
    EXPECT_DOUBLE_EQ(t.low[k], 0.4);
    EXPECT_DOUBLE_EQ(t.high[k], 0.4);
  }
  EXPECT_TRUE(t.valid());
}

TEST(KMeans, ConfidentPrefilter) {
  std::vector<PseudoBox> boxes{scored(0.9, 0.9, 0.9), scored(0.5, 0.5, 0.5), scored(0.05, 0.5, 0.1)};
  EXPECT_FALSE(fit_dual_thresholds_confident(boxes, 0.1).has_value());
  boxes.push_back(scored(0.3, 0.4, 0.2));
  const auto t = fit_dual_thresholds_confident(boxes, 0.1);
  ASSERT_TRUE(t.has_value());
  // The filtered box (p*o = 0.025) would otherwise become the lowest center.
  EXPECT_NEAR(t->low[kIouConsistency], 0.5 * (0.2 + 0.5), 1e-12);
}

TEST(Stratify, LevelsAndWeights) {
  const DualThresholds t = uniform_thresholds(0.3, 0.7);
  auto out = stratify({scored(1, 1, 1), scored(0.1, 0.2, 0.25), scored(0.8, 0.7, 0.5),
                       scored(0.9, 0.9, 0.2)},
                      t);
  EXPECT_EQ(out[0].level, Level::High);
  EXPECT_DOUBLE_EQ(out[0].weight, 1.0);
  EXPECT_EQ(out[1].level, Level::Low);
  EXPECT_DOUBLE_EQ(out[1].weight, 0.0);
  EXPECT_EQ(out[2].level, Level::Ambiguous);
  EXPECT_NEAR(out[2].weight, 0.56, 1e-15);
  EXPECT_EQ(out[3].level, Level::Low);
}

TEST(Stratify, RejectsInvalidThresholds) {
  EXPECT_THROW(stratify({scored(1, 1, 1)}, uniform_thresholds(0.8, 0.2)), std::invalid_argument);
  EXPECT_THROW(stratify({scored(1, 1, 1)}, uniform_thresholds(-0.1, 0.2)), std::invalid_argument);
}

TEST(Stratify, WeightMappingIsExhaustiveAndMonotone) {
  std::mt19937_64 rng(13);
  std::uniform_real_distribution<double> u(0, 1);
  const auto rank = [](Level l) { return l == Level::Low ? 0 : l == Level::Ambiguous ? 1 : 2; };
  for (int trial = 0; trial < 2000; ++trial) {
    double lo = u(rng), hi = u(rng);
    if (lo > hi) std::swap(lo, hi);
    const DualThresholds t = uniform_thresholds(lo, hi);
    const PseudoBox b = stratify({scored(u(rng), u(rng), u(rng))}, t)[0];
    const double expect_w = b.level == Level::High ? 1.0
                            : b.level == Level::Low ? 0.0
                                                    : b.p_hat * b.o_hat;
    EXPECT_DOUBLE_EQ(b.weight, expect_w);
    const int c = static_cast<int>(rng() % 3);
    auto s = b.scores();
    s[c] = std::min(1.0, s[c] + u(rng));
    const PseudoBox raised = stratify({scored(s[0], s[1], s[2])}, t)[0];
    EXPECT_GE(rank(raised.level), rank(b.level));
  }
}

TEST(RemoveLowPoints, StrictInteriorOnly) {
  const Box3D low{0, 0, 1, 2, 2, 2, 0};
  const PointCloud cloud{{0, 0, 1, 0}, {0.5, 0.5, 1.5, 0}, {1.0, 0, 1, 0}, {5, 5, 1, 0}};
  const PointCloud out = remove_low_level_points(cloud, std::vector<Box3D>{low});
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0], cloud[2]);  // on the face
  EXPECT_EQ(out[1], cloud[3]);
  EXPECT_EQ(remove_low_level_points(cloud, {}), cloud);
  const PointCloud inside{{0, 0, 1, 0}, {0.1, 0.1, 1.1, 0}};
  EXPECT_TRUE(remove_low_level_points(inside, std::vector<Box3D>{low}).empty());
}

TEST(Ema, ClosedFormAndLimits) {
  DetectorParams s;
  EmaTeacher t{DetectorParams{}, 0.999};
  std::fill(t.params.values.begin(), t.params.values.end(), 1.0);
  ema_update(t, s);
  EXPECT_DOUBLE_EQ(t.params.values[0], 0.999);

  EmaTeacher frozen{t.params, 1.0};
  std::fill(s.values.begin(), s.values.end(), 3.0);
  ema_update(frozen, s);
  EXPECT_EQ(frozen.params, t.params);
  EmaTeacher copy{t.params, 0.0};
  ema_update(copy, s);
  EXPECT_EQ(copy.params.values, s.values);

  DetectorParams bad;
  bad.values.pop_back();
  EXPECT_THROW(ema_update(t, bad), ModelCompatibilityError);
}

TEST(Ema, MatchesWeightedHistory) {
  std::mt19937_64 rng(14);
  std::normal_distribution<double> n(0, 1);
  const double m = 0.9;
  EmaTeacher t{DetectorParams{}, m};
  t.params.values[0] = 2.0;
  std::vector<double> history;
  DetectorParams s;
  for (int k = 0; k < 200; ++k) {
    s.values[0] = n(rng);
    history.push_back(s.values[0]);
    ema_update(t, s);
  }
  const std::size_t k = history.size();
  double expect = std::pow(m, static_cast<double>(k)) * 2.0;
  for (std::size_t j = 0; j < k; ++j)
    expect += (1 - m) * std::pow(m, static_cast<double>(k - 1 - j)) * history[j];
  EXPECT_NEAR(t.params.values[0], expect, 1e-9);
}

TEST(SslEpoch, ZeroUnlabeledReducesToSupervised) {
  const auto labeled = scenes(3, 21);
  SslConfig cfg;
  cfg.seed = 5;
  SslState a = init_ssl_state(DetectorParams{}, 0.999);
  const EpochMetrics m = ssl_epoch(a, labeled, {}, {}, cfg);
  EXPECT_EQ(m.unlabeled_steps, 0u);
  EXPECT_EQ(m.labeled_steps, 3u);
  EXPECT_TRUE(std::isfinite(m.labeled.total()));
  EXPECT_TRUE(std::isnan(m.val_map));
  EXPECT_EQ(m.n_high + m.n_ambiguous + m.n_low, 0u);
  EXPECT_NE(a.student, DetectorParams{});
}

TEST(SslEpoch, DeterministicAcrossRunsAndThreadCounts) {
  const auto labeled = scenes(2, 31), unlabeled = scenes(4, 32), val = scenes(2, 33);
  DetectorParams pre;
  pretrain(pre, labeled, ChannelPolicy::single(), {}, {5, 0.05}, 1);
  auto run = [&](int threads) {
    SslConfig cfg;
    cfg.seed = 9;
    cfg.threads = threads;
    cfg.threshold_period = 1;
    SslState st = init_ssl_state(pre, 0.99);
    std::vector<EpochMetrics> ms;
    for (int e = 0; e < 2; ++e) ms.push_back(ssl_epoch(st, labeled, unlabeled, val, cfg));
    return std::make_pair(st, ms);
  };
  const auto [s1, m1] = run(1);
  const auto [s2, m2] = run(1);
  const auto [s3, m3] = run(3);
  EXPECT_EQ(s1.student, s2.student);
  EXPECT_EQ(s1.teacher.params, s3.teacher.params);
  ASSERT_EQ(m1.size(), m3.size());
  for (std::size_t e = 0; e < m1.size(); ++e) {
    EXPECT_EQ(m1[e].n_high, m3[e].n_high);
    EXPECT_EQ(m1[e].incorrect_prefilter, m3[e].incorrect_prefilter);
    EXPECT_EQ(m1[e].unlabeled.total(), m3[e].unlabeled.total());
    EXPECT_EQ(m1[e].val_map, m2[e].val_map);
    EXPECT_LE(m1[e].incorrect_postfilter, m1[e].incorrect_prefilter);
    EXPECT_EQ(m1[e].unlabeled_steps, unlabeled.size());
  }
  EXPECT_TRUE(m1[0].thresholds_refit);
}
