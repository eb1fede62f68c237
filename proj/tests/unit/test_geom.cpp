#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "chanssl/geom.hpp"
#include "oracles.hpp"

using namespace chanssl;

namespace {

Box3D random_box(std::mt19937_64& rng, double spread) {
  std::uniform_real_distribution<double> c(-spread, spread), s(0.5, 4.0), h(0.5, 2.0), r(-kPi, kPi);
  return {c(rng), c(rng), 0.5 * c(rng), s(rng), h(rng), s(rng), r(rng)};
}

Transform random_transform(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> th(-kPi, kPi), sc(0.5, 2.0);
  return {rng() % 2 == 0, th(rng), sc(rng)};
}

}  // namespace

TEST(NormalizeAngle, WrapsIntoHalfOpenInterval) {
  EXPECT_DOUBLE_EQ(normalize_angle(kPi), kPi);
  EXPECT_DOUBLE_EQ(normalize_angle(-kPi), kPi);
  EXPECT_NEAR(normalize_angle(3 * kPi + 0.1), -kPi + 0.1, 1e-12);
  EXPECT_DOUBLE_EQ(normalize_angle(0.0), 0.0);
}

TEST(Iou, IdenticalDisjointAndRotatedSquare) {
  const Box3D a{1, 2, 0.5, 2, 1, 3, 0.3};
  EXPECT_DOUBLE_EQ(iou_bev(a, a), 1.0);
  EXPECT_DOUBLE_EQ(iou_3d(a, a), 1.0);
  Box3D far = a;
  far.cx += 10;
  EXPECT_EQ(iou_bev(a, far), 0.0);
  EXPECT_EQ(iou_3d(a, far), 0.0);
  Box3D above = a;
  above.cz += 1.0;  // touching faces
  EXPECT_EQ(iou_3d(a, above), 0.0);

  const Box3D sq{0, 0, 0, 1, 1, 1, 0};
  const Box3D rot{0, 0, 0, 1, 1, 1, kPi / 4};
  EXPECT_NEAR(iou_bev(sq, rot), 1.0 / std::sqrt(2.0), 1e-6);
}

TEST(Iou, HalfShiftedBoxes) {
  const Box3D a{0, 0, 0, 2, 2, 2, 0};
  const Box3D b{1, 0, 0, 2, 2, 2, 0};
  EXPECT_NEAR(iou_bev(a, b), 1.0 / 3.0, 1e-12);
  const Box3D c{1, 0, 1, 2, 2, 2, 0};
  EXPECT_NEAR(iou_3d(a, c), 1.0 / 7.0, 1e-12);
}

TEST(Iou, AgreesWithMonteCarlo) {
  std::mt19937_64 rng(7);
  for (int i = 0; i < 40; ++i) {
    const Box3D a = random_box(rng, 1.5);
    const Box3D b = random_box(rng, 1.5);
    EXPECT_NEAR(iou_bev(a, b), oracle::mc_iou(a, b, false, 100000, i), 0.01);
    EXPECT_NEAR(iou_3d(a, b), oracle::mc_iou(a, b, true, 100000, i + 1000), 0.01);
  }
}

TEST(Iou, SymmetricAndBounded) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 500; ++i) {
    const Box3D a = random_box(rng, 2.0);
    const Box3D b = random_box(rng, 2.0);
    const double ab = iou_3d(a, b);
    EXPECT_NEAR(ab, iou_3d(b, a), 1e-12);
    EXPECT_GE(ab, 0.0);
    EXPECT_LE(ab, iou_bev(a, b) + 1e-12);
  }
}

TEST(Transform, InvertAndComposeRoundtrip) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 200; ++i) {
    const Transform t = random_transform(rng);
    const Transform u = random_transform(rng);
    const Point p{1.5, -2.0, 0.7, 0.4};
    const Point back = apply_point(invert(t), apply_point(t, p));
    EXPECT_NEAR(back.x, p.x, 1e-9);
    EXPECT_NEAR(back.y, p.y, 1e-9);
    EXPECT_NEAR(back.z, p.z, 1e-9);
    EXPECT_EQ(back.intensity, p.intensity);

    const Point two = apply_point(u, apply_point(t, p));
    const Point one = apply_point(compose(u, t), p);
    EXPECT_NEAR(two.x, one.x, 1e-9);
    EXPECT_NEAR(two.y, one.y, 1e-9);
    EXPECT_NEAR(two.z, one.z, 1e-9);
  }
}

TEST(Transform, BoxFollowsItsPoints) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const Transform t = random_transform(rng);
    const Box3D b = random_box(rng, 5.0);
    const Box3D tb = apply_box(t, b);
    EXPECT_NEAR(tb.l, b.l * t.s, 1e-12);
    // Points well inside stay inside; corners map to corners.
    const auto corners = bev_corners(b);
    const auto tcorners = bev_corners(tb);
    for (const auto& c : corners) {
      const Point q = apply_point(t, {c[0], c[1], b.cz, 0});
      double best = 1e9;
      for (const auto& tc : tcorners) best = std::min(best, std::hypot(tc[0] - q.x, tc[1] - q.y));
      EXPECT_LT(best, 1e-9);
    }
    const Point center = apply_point(t, {b.cx, b.cy, b.cz, 0});
    EXPECT_TRUE(point_in_box(tb, center.x, center.y, center.z));
    const Box3D back = apply_box(invert(t), tb);
    EXPECT_NEAR(iou_3d(back, b), 1.0, 1e-9);
  }
}

TEST(Transform, IdentityIsExact) {
  const Box3D b{1.25, -3.5, 0.75, 1.6, 1.5, 3.9, 0.4};
  EXPECT_EQ(apply_box(Transform::identity(), b), b);
  const PointCloud pc{{1, 2, 3, 0.5}};
  EXPECT_EQ(apply_points(Transform::identity(), pc), pc);
}

TEST(Residual, EncodeDecodeRoundtrip) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 500; ++i) {
    const Box3D anchor = random_box(rng, 10.0);
    const Box3D target = random_box(rng, 10.0);
    const Box3D back = decode_residual(encode_residual(target, anchor), anchor);
    EXPECT_NEAR(back.cx, target.cx, 1e-9);
    EXPECT_NEAR(back.cy, target.cy, 1e-9);
    EXPECT_NEAR(back.cz, target.cz, 1e-9);
    EXPECT_NEAR(back.w, target.w, 1e-9);
    EXPECT_NEAR(back.h, target.h, 1e-9);
    EXPECT_NEAR(back.l, target.l, 1e-9);
    EXPECT_NEAR(normalize_angle(back.r - target.r), 0.0, 1e-9);
  }
}

TEST(Residual, IdentityIsZero) {
  const Box3D a{1, 2, 3, 1, 2, 3, 0.5};
  for (double v : encode_residual(a, a)) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(PointInBox, StrictInterior) {
  const Box3D b{0, 0, 0, 2, 2, 4, 0};
  EXPECT_TRUE(point_in_box(b, 0, 0, 0));
  EXPECT_FALSE(point_in_box(b, 2.0, 0, 0));  // on the front face
  EXPECT_FALSE(point_in_box(b, 0, 0, 1.0));  // on the top face
  EXPECT_TRUE(point_in_box(b, 1.99, 0.99, 0.99));
}

TEST(Nms, SuppressesOverlapsByScore) {
  const Box3D a{0, 0, 0, 2, 2, 4, 0};
  Box3D b = a;
  b.cx = 0.2;
  Box3D c = a;
  c.cx = 10;
  const std::vector<ScoredBox> dets{{b, 0.8}, {a, 0.9}, {c, 0.1}};
  EXPECT_EQ(nms(dets, 0.5), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(nms(dets, 0.99), (std::vector<std::size_t>{1, 0, 2}));
  EXPECT_TRUE(nms({}, 0.5).empty());
}

TEST(Nms, TiesKeepInputOrder) {
  const Box3D a{0, 0, 0, 1, 1, 1, 0};
  const std::vector<ScoredBox> dets{{a, 0.5}, {a, 0.5}};
  EXPECT_EQ(nms(dets, 0.5), (std::vector<std::size_t>{0}));
}

TEST(AverageBoxes, CircularMeanYaw) {
  const std::vector<Box3D> boxes{{0, 0, 0, 1, 1, 1, kPi - 0.1}, {2, 0, 0, 3, 1, 1, -kPi + 0.1}};
  const Box3D m = average_boxes(boxes);
  EXPECT_DOUBLE_EQ(m.cx, 1.0);
  EXPECT_DOUBLE_EQ(m.w, 2.0);
  EXPECT_NEAR(std::abs(m.r), kPi, 1e-12);
  EXPECT_THROW(average_boxes({}), std::invalid_argument);
}

TEST(AlignYaw, SameFootprintClosestYaw) {
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> ref(-kPi, kPi);
  for (int i = 0; i < 200; ++i) {
    const Box3D b = random_box(rng, 3.0);
    const double reference = ref(rng);
    const Box3D a = align_yaw_to(b, reference);
    EXPECT_NEAR(iou_bev(a, b), 1.0, 1e-9);
    EXPECT_LE(std::abs(normalize_angle(a.r - reference)), kPi / 4 + 1e-12);
  }
}
