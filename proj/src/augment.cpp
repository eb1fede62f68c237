#include "chanssl/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "chanssl/rng.hpp"

namespace chanssl {

ChannelPolicy ChannelPolicy::weak_default(double rot_deg, double scale_lo, double scale_hi) {
  ChannelPolicy p;
  p.n_channels = 3;
  p.mode = ChannelMode::Weak;
  p.weak_transforms = {Transform::identity(),
                       Transform{true, deg_to_rad(-rot_deg), scale_lo},
                       Transform{true, deg_to_rad(rot_deg), scale_hi}};
  return p;
}

ChannelPolicy ChannelPolicy::strong_default(int n_channels, StrongRanges ranges) {
  ChannelPolicy p;
  p.n_channels = n_channels;
  p.mode = ChannelMode::Strong;
  p.strong = ranges;
  return p;
}

ChannelPolicy ChannelPolicy::single() {
  ChannelPolicy p;
  p.n_channels = 1;
  p.mode = ChannelMode::Weak;
  p.weak_transforms = {Transform::identity()};
  return p;
}

void ChannelPolicy::validate() const {
  if (n_channels < 1) throw std::invalid_argument("channel policy: n_channels must be >= 1");
  if (mode == ChannelMode::Weak) {
    if (weak_transforms.size() != static_cast<std::size_t>(n_channels))
      throw std::invalid_argument("channel policy: weak_transforms size != n_channels");
    if (!weak_transforms.front().is_identity())
      throw std::invalid_argument("channel policy: first weak transform must be the identity");
    for (const Transform& t : weak_transforms)
      if (!(t.s > 0.0) || !std::isfinite(t.theta))
        throw std::invalid_argument("channel policy: invalid weak transform");
  } else {
    const StrongRanges& r = strong;
    if (!(r.rot_min <= r.rot_max) || !(r.scale_min <= r.scale_max) || !(r.scale_min > 0.0) ||
        !(r.flip_prob >= 0.0 && r.flip_prob <= 1.0))
      throw std::invalid_argument("channel policy: invalid strong ranges");
  }
}

ChannelSet weak_channels(std::span<const Point> pc, const ChannelPolicy& policy) {
  if (policy.mode != ChannelMode::Weak) throw std::invalid_argument("weak_channels: policy is not weak");
  policy.validate();
  ChannelSet cs;
  cs.transforms = policy.weak_transforms;
  for (const Transform& t : cs.transforms) cs.scenes.push_back(apply_points(t, pc));
  return cs;
}

std::vector<Transform> sample_strong_transforms(const ChannelPolicy& policy, std::uint64_t seed) {
  if (policy.mode != ChannelMode::Strong) throw std::invalid_argument("strong_channels: policy is not strong");
  policy.validate();
  Rng rng(seed);
  std::vector<Transform> out;
  out.reserve(policy.n_channels);
  const StrongRanges& r = policy.strong;
  for (int i = 0; i < policy.n_channels; ++i) {
    Transform t;
    t.flip_y = rng.bernoulli(r.flip_prob);
    t.theta = rng.uniform(r.rot_min, r.rot_max);
    t.s = rng.uniform(r.scale_min, r.scale_max);
    out.push_back(t);
  }
  return out;
}

ChannelSet strong_channels(std::span<const Point> pc, const ChannelPolicy& policy,
                           std::uint64_t seed) {
  ChannelSet cs;
  cs.transforms = sample_strong_transforms(policy, seed);
  for (const Transform& t : cs.transforms) cs.scenes.push_back(apply_points(t, pc));
  return cs;
}

ChannelSet make_channels(std::span<const Point> pc, const ChannelPolicy& policy,
                         std::uint64_t seed) {
  return policy.mode == ChannelMode::Weak ? weak_channels(pc, policy)
                                          : strong_channels(pc, policy, seed);
}

std::vector<std::vector<Box3D>> transform_pseudo_targets(std::span<const Box3D> boxes,
                                                         const ChannelSet& cs) {
  std::vector<std::vector<Box3D>> out;
  out.reserve(cs.size());
  for (const Transform& t : cs.transforms) out.push_back(apply_boxes(t, boxes));
  return out;
}

namespace {

struct PatchGrid {
  double min_x = 0, min_y = 0, size_x = 1, size_y = 1;
  int cells = 1;

  int index_x(double x) const {
    return std::clamp(static_cast<int>(std::floor((x - min_x) / size_x)), 0, cells - 1);
  }
  int index_y(double y) const {
    return std::clamp(static_cast<int>(std::floor((y - min_y) / size_y)), 0, cells - 1);
  }
  int patch_of(double x, double y) const { return index_y(y) * cells + index_x(x); }
};

}  // namespace

Scene shuffle_augment(const Scene& scene, int grid_cells, std::uint64_t seed) {
  if (grid_cells < 1) throw std::invalid_argument("shuffle_augment: grid_cells must be >= 1");
  if (grid_cells == 1 || (scene.cloud.empty() && scene.gt_boxes.empty())) return scene;

  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  auto extend = [&](double x, double y) {
    min_x = std::min(min_x, x);
    min_y = std::min(min_y, y);
    max_x = std::max(max_x, x);
    max_y = std::max(max_y, y);
  };
  for (const Point& p : scene.cloud) extend(p.x, p.y);
  std::vector<std::array<double, 4>> box_aabb;  // min_x, min_y, max_x, max_y
  for (const Box3D& b : scene.gt_boxes) {
    std::array<double, 4> bb{std::numeric_limits<double>::infinity(),
                             std::numeric_limits<double>::infinity(),
                             -std::numeric_limits<double>::infinity(),
                             -std::numeric_limits<double>::infinity()};
    for (const auto& c : bev_corners(b)) {
      extend(c[0], c[1]);
      bb = {std::min(bb[0], c[0]), std::min(bb[1], c[1]), std::max(bb[2], c[0]),
            std::max(bb[3], c[1])};
    }
    box_aabb.push_back(bb);
  }
  if (!(max_x > min_x) || !(max_y > min_y)) return scene;

  PatchGrid grid{min_x, min_y, (max_x - min_x) / grid_cells, (max_y - min_y) / grid_cells,
                 grid_cells};
  const int n_patches = grid_cells * grid_cells;
  std::vector<int> occupancy(n_patches, 0);
  std::vector<bool> spanned(n_patches, false);
  std::vector<int> box_patch(scene.gt_boxes.size(), -1);
  for (std::size_t i = 0; i < box_aabb.size(); ++i) {
    const auto& bb = box_aabb[i];
    const int x0 = grid.index_x(bb[0]), x1 = grid.index_x(bb[2]);
    const int y0 = grid.index_y(bb[1]), y1 = grid.index_y(bb[3]);
    if (x0 == x1 && y0 == y1) {
      box_patch[i] = y0 * grid_cells + x0;
      ++occupancy[box_patch[i]];
    } else {
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) spanned[y * grid_cells + x] = true;
    }
  }

  // Destination of every patch; fixed patches map to themselves.
  std::vector<int> dest(n_patches);
  for (int p = 0; p < n_patches; ++p) dest[p] = p;
  Rng rng(seed);
  for (int occ = 0; occ <= 1; ++occ) {
    std::vector<int> group;
    for (int p = 0; p < n_patches; ++p)
      if (!spanned[p] && occupancy[p] == occ) group.push_back(p);
    std::vector<int> shuffled = group;
    rng.shuffle(shuffled.begin(), shuffled.end());
    for (std::size_t k = 0; k < group.size(); ++k) dest[group[k]] = shuffled[k];
  }

  auto offset = [&](int from) {
    const int to = dest[from];
    return std::array<double, 2>{(to % grid_cells - from % grid_cells) * grid.size_x,
                                 (to / grid_cells - from / grid_cells) * grid.size_y};
  };

  Scene out = scene;
  for (Point& p : out.cloud) {
    const int patch = grid.patch_of(p.x, p.y);
    if (dest[patch] == patch) continue;
    const auto d = offset(patch);
    p.x += d[0];
    p.y += d[1];
  }
  for (std::size_t i = 0; i < out.gt_boxes.size(); ++i) {
    const int patch = box_patch[i];
    if (patch < 0 || dest[patch] == patch) continue;
    const auto d = offset(patch);
    out.gt_boxes[i].cx += d[0];
    out.gt_boxes[i].cy += d[1];
  }
  return out;
}

}  // namespace chanssl
