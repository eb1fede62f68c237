#pragma once

#include <array>
#include <atomic>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace chanssl {

inline constexpr double kPi = 3.14159265358979323846;

inline constexpr double deg_to_rad(double deg) { return deg * kPi / 180.0; }
inline constexpr double rad_to_deg(double rad) { return rad * 180.0 / kPi; }

/// Wraps an angle into (-pi, pi].
double normalize_angle(double r);

/// 7-DoF oriented box. `l` runs along the heading (local x), `w` across it
/// (local y), `h` is vertical. `cz` is the geometric center, not the bottom.
/// Yaw is counter-clockwise positive about +z.
struct Box3D {
  double cx = 0.0, cy = 0.0, cz = 0.0;
  double w = 1.0, h = 1.0, l = 1.0;
  double r = 0.0;

  bool valid() const;
  bool operator==(const Box3D&) const = default;
};

struct Point {
  double x = 0.0, y = 0.0, z = 0.0;
  double intensity = 0.0;

  bool operator==(const Point&) const = default;
};

using PointCloud = std::vector<Point>;

/// Flip across the x-z plane, then rotate about +z by `theta`, then scale
/// uniformly by `s`. Every channel augmentation is one of these.
struct Transform {
  bool flip_y = false;
  double theta = 0.0;
  double s = 1.0;

  static Transform identity() { return {}; }
  bool is_identity() const { return !flip_y && theta == 0.0 && s == 1.0; }
  bool operator==(const Transform&) const = default;
};

Point apply_point(const Transform& t, const Point& p);
PointCloud apply_points(const Transform& t, std::span<const Point> pc);
Box3D apply_box(const Transform& t, const Box3D& b);
std::vector<Box3D> apply_boxes(const Transform& t, std::span<const Box3D> boxes);

/// Exact inverse action. A flip composed with a rotation is its own inverse
/// rotation, so the result is again expressible as flip->rotate->scale.
Transform invert(const Transform& t);

/// The action "apply `first`, then `second`".
Transform compose(const Transform& second, const Transform& first);

/// Counterclockwise BEV corners of the box footprint.
std::array<std::array<double, 2>, 4> bev_corners(const Box3D& b);

/// Area of the intersection of two box footprints.
double bev_intersection_area(const Box3D& a, const Box3D& b);

double iou_bev(const Box3D& a, const Box3D& b);
double iou_3d(const Box3D& a, const Box3D& b);

/// Strict interior test; points on a face are outside.
bool point_in_box(const Box3D& b, double x, double y, double z);

struct ScoredBox {
  Box3D box;
  double score = 0.0;
};

/// Greedy rotated NMS on BEV IoU. Returns kept input indices in descending
/// score order; equal scores keep input order.
std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double iou_thresh);

using Residual = std::array<double, 7>;

Residual encode_residual(const Box3D& target, const Box3D& anchor);
Box3D decode_residual(const Residual& delta, const Box3D& anchor);

/// Mean center and size; yaw by circular mean. Throws on empty input.
Box3D average_boxes(std::span<const Box3D> boxes);

/// Among the four representations of the same footprint (yaw + k*pi/2 with
/// w/l swapped on odd k), the one whose yaw is closest to `reference`.
Box3D align_yaw_to(const Box3D& b, double reference);

/// Thread-safe counter of IoU evaluations, used to instrument the
/// consistency kernels.
struct IouCounter {
  std::atomic<std::uint64_t> evaluations{0};

  void add(std::uint64_t n = 1) { evaluations.fetch_add(n, std::memory_order_relaxed); }
  std::uint64_t value() const { return evaluations.load(std::memory_order_relaxed); }
};

}  // namespace chanssl
