#include "chanssl/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace chanssl {

namespace {

constexpr double kDegenerateArea = 1e-12;

using Vec2 = std::array<double, 2>;
using Polygon = std::vector<Vec2>;

double cross(const Vec2& o, const Vec2& a, const Vec2& b) {
  return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
}

// Intersection of segment p->q with the infinite line through e0->e1.
Vec2 line_intersection(const Vec2& p, const Vec2& q, const Vec2& e0, const Vec2& e1) {
  const double dp = cross(e0, e1, p);
  const double dq = cross(e0, e1, q);
  const double t = dp / (dp - dq);
  return {p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])};
}

double shoelace(const Polygon& poly) {
  if (poly.size() < 3) return 0.0;
  double twice = 0.0;
  for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
    const Vec2& a = poly[i];
    const Vec2& b = poly[(i + 1) % n];
    twice += a[0] * b[1] - a[1] * b[0];
  }
  return 0.5 * std::abs(twice);
}

// Sutherland-Hodgman: clip `subject` against every edge of the convex,
// counterclockwise `clip` polygon.
Polygon clip_convex(Polygon subject, const std::array<Vec2, 4>& clip) {
  Polygon output;
  output.reserve(8);
  for (std::size_t e = 0; e < clip.size() && !subject.empty(); ++e) {
    const Vec2& e0 = clip[e];
    const Vec2& e1 = clip[(e + 1) % clip.size()];
    output.clear();
    for (std::size_t i = 0, n = subject.size(); i < n; ++i) {
      const Vec2& cur = subject[i];
      const Vec2& prev = subject[(i + n - 1) % n];
      const bool cur_in = cross(e0, e1, cur) >= 0.0;
      const bool prev_in = cross(e0, e1, prev) >= 0.0;
      if (cur_in) {
        if (!prev_in) output.push_back(line_intersection(prev, cur, e0, e1));
        output.push_back(cur);
      } else if (prev_in) {
        output.push_back(line_intersection(prev, cur, e0, e1));
      }
    }
    std::swap(subject, output);
  }
  return subject;
}

double z_overlap(const Box3D& a, const Box3D& b) {
  const double top = std::min(a.cz + 0.5 * a.h, b.cz + 0.5 * b.h);
  const double bottom = std::max(a.cz - 0.5 * a.h, b.cz - 0.5 * b.h);
  return std::max(0.0, top - bottom);
}

}  // namespace

double normalize_angle(double r) {
  double m = std::fmod(r + kPi, 2.0 * kPi);
  if (m <= 0.0) m += 2.0 * kPi;
  return m - kPi;
}

bool Box3D::valid() const {
  const bool finite = std::isfinite(cx) && std::isfinite(cy) && std::isfinite(cz) &&
                      std::isfinite(w) && std::isfinite(h) && std::isfinite(l) &&
                      std::isfinite(r);
  return finite && w > 0.0 && h > 0.0 && l > 0.0;
}

Point apply_point(const Transform& t, const Point& p) {
  const double y0 = t.flip_y ? -p.y : p.y;
  const double c = std::cos(t.theta);
  const double s = std::sin(t.theta);
  const double x1 = c * p.x - s * y0;
  const double y1 = s * p.x + c * y0;
  return {t.s * x1, t.s * y1, t.s * p.z, p.intensity};
}

PointCloud apply_points(const Transform& t, std::span<const Point> pc) {
  if (t.is_identity()) return PointCloud(pc.begin(), pc.end());
  PointCloud out;
  out.reserve(pc.size());
  for (const Point& p : pc) out.push_back(apply_point(t, p));
  return out;
}

Box3D apply_box(const Transform& t, const Box3D& b) {
  if (t.is_identity()) return b;
  const Point c = apply_point(t, {b.cx, b.cy, b.cz, 0.0});
  const double yaw = (t.flip_y ? -b.r : b.r) + t.theta;
  return {c.x, c.y, c.z, b.w * t.s, b.h * t.s, b.l * t.s, normalize_angle(yaw)};
}

std::vector<Box3D> apply_boxes(const Transform& t, std::span<const Box3D> boxes) {
  std::vector<Box3D> out;
  out.reserve(boxes.size());
  for (const Box3D& b : boxes) out.push_back(apply_box(t, b));
  return out;
}

Transform invert(const Transform& t) {
  // (S R F)^-1 = F R(-theta) S^-1, and F R(-theta) = R(theta) F.
  if (t.flip_y) return {true, t.theta, 1.0 / t.s};
  return {false, t.theta == 0.0 ? 0.0 : -t.theta, 1.0 / t.s};
}

Transform compose(const Transform& second, const Transform& first) {
  // S2 R2 F2 S1 R1 F1 with F2 R(a) = R(-a) F2.
  const double theta = second.theta + (second.flip_y ? -first.theta : first.theta);
  return {second.flip_y != first.flip_y, theta, second.s * first.s};
}

std::array<std::array<double, 2>, 4> bev_corners(const Box3D& b) {
  const double c = std::cos(b.r);
  const double s = std::sin(b.r);
  const double hl = 0.5 * b.l;
  const double hw = 0.5 * b.w;
  const std::array<Vec2, 4> local{{{hl, hw}, {-hl, hw}, {-hl, -hw}, {hl, -hw}}};
  std::array<Vec2, 4> out{};
  for (std::size_t i = 0; i < 4; ++i) {
    out[i] = {b.cx + c * local[i][0] - s * local[i][1],
              b.cy + s * local[i][0] + c * local[i][1]};
  }
  return out;
}

double bev_intersection_area(const Box3D& a, const Box3D& b) {
  const double ra = 0.5 * std::hypot(a.l, a.w);
  const double rb = 0.5 * std::hypot(b.l, b.w);
  const double dx = a.cx - b.cx;
  const double dy = a.cy - b.cy;
  if (dx * dx + dy * dy > (ra + rb) * (ra + rb)) return 0.0;

  const auto ca = bev_corners(a);
  const auto cb = bev_corners(b);
  const Polygon clipped = clip_convex(Polygon(ca.begin(), ca.end()), cb);
  const double area = shoelace(clipped);
  return area < kDegenerateArea ? 0.0 : area;
}

double iou_bev(const Box3D& a, const Box3D& b) {
  // Clipping a rotated box against itself loses a few ulps.
  if (a == b && a.w > 0.0 && a.l > 0.0) return 1.0;
  const double inter = bev_intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.w * a.l + b.w * b.l - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

double iou_3d(const Box3D& a, const Box3D& b) {
  if (a == b && a.w > 0.0 && a.l > 0.0 && a.h > 0.0) return 1.0;
  const double dz = z_overlap(a, b);
  if (dz <= 0.0) return 0.0;
  const double inter = bev_intersection_area(a, b) * dz;
  if (inter <= 0.0) return 0.0;
  const double uni = a.w * a.h * a.l + b.w * b.h * b.l - inter;
  return std::clamp(inter / uni, 0.0, 1.0);
}

bool point_in_box(const Box3D& b, double x, double y, double z) {
  const double dx = x - b.cx;
  const double dy = y - b.cy;
  const double c = std::cos(b.r);
  const double s = std::sin(b.r);
  const double lx = c * dx + s * dy;
  const double ly = -s * dx + c * dy;
  return std::abs(lx) < 0.5 * b.l && std::abs(ly) < 0.5 * b.w && std::abs(z - b.cz) < 0.5 * b.h;
}

std::vector<std::size_t> nms(std::span<const ScoredBox> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });

  std::vector<std::size_t> kept;
  std::vector<bool> suppressed(dets.size(), false);
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t i = order[oi];
    if (suppressed[i]) continue;
    kept.push_back(i);
    for (std::size_t oj = oi + 1; oj < order.size(); ++oj) {
      const std::size_t j = order[oj];
      if (!suppressed[j] && iou_bev(dets[i].box, dets[j].box) >= iou_thresh) suppressed[j] = true;
    }
  }
  return kept;
}

Residual encode_residual(const Box3D& target, const Box3D& anchor) {
  const double d = std::hypot(anchor.w, anchor.l);
  return {(target.cx - anchor.cx) / d,
          (target.cy - anchor.cy) / d,
          (target.cz - anchor.cz) / anchor.h,
          std::log(target.w / anchor.w),
          std::log(target.h / anchor.h),
          std::log(target.l / anchor.l),
          normalize_angle(target.r - anchor.r)};
}

Box3D decode_residual(const Residual& delta, const Box3D& anchor) {
  const double d = std::hypot(anchor.w, anchor.l);
  return {anchor.cx + delta[0] * d,
          anchor.cy + delta[1] * d,
          anchor.cz + delta[2] * anchor.h,
          anchor.w * std::exp(delta[3]),
          anchor.h * std::exp(delta[4]),
          anchor.l * std::exp(delta[5]),
          normalize_angle(anchor.r + delta[6])};
}

Box3D average_boxes(std::span<const Box3D> boxes) {
  if (boxes.empty()) throw std::invalid_argument("average_boxes: empty input");
  if (boxes.size() == 1) return boxes.front();
  Box3D out{0, 0, 0, 0, 0, 0, 0};
  double sin_sum = 0.0;
  double cos_sum = 0.0;
  for (const Box3D& b : boxes) {
    out.cx += b.cx;
    out.cy += b.cy;
    out.cz += b.cz;
    out.w += b.w;
    out.h += b.h;
    out.l += b.l;
    sin_sum += std::sin(b.r);
    cos_sum += std::cos(b.r);
  }
  const double n = static_cast<double>(boxes.size());
  out.cx /= n;
  out.cy /= n;
  out.cz /= n;
  out.w /= n;
  out.h /= n;
  out.l /= n;
  out.r = normalize_angle(std::atan2(sin_sum, cos_sum));
  return out;
}

Box3D align_yaw_to(const Box3D& b, double reference) {
  Box3D best = b;
  double best_err = std::abs(normalize_angle(b.r - reference));
  for (int k = 1; k < 4; ++k) {
    Box3D cand = b;
    cand.r = normalize_angle(b.r + k * 0.5 * kPi);
    if (k % 2 == 1) std::swap(cand.w, cand.l);
    const double err = std::abs(normalize_angle(cand.r - reference));
    if (err < best_err) {
      best = cand;
      best_err = err;
    }
  }
  return best;
}

}  // namespace chanssl
