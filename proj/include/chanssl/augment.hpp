#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "chanssl/geom.hpp"
#include "chanssl/scene.hpp"

namespace chanssl {

enum class ChannelMode { Weak, Strong };

struct StrongRanges {
  double rot_min = deg_to_rad(-45.0);
  double rot_max = deg_to_rad(45.0);
  double scale_min = 0.95;
  double scale_max = 1.05;
  double flip_prob = 0.5;
};

/// How a scene is expanded into transformation channels. Weak policies use
/// fixed transforms (first one must be the identity); strong policies draw
/// every channel at random from `strong`.
struct ChannelPolicy {
  int n_channels = 3;
  ChannelMode mode = ChannelMode::Weak;
  std::vector<Transform> weak_transforms;
  StrongRanges strong;

  /// Identity, flip+rot(-rot_deg)+scale lo, flip+rot(+rot_deg)+scale hi.
  static ChannelPolicy weak_default(double rot_deg = 22.5, double scale_lo = 0.98,
                                    double scale_hi = 1.02);
  static ChannelPolicy strong_default(int n_channels = 3, StrongRanges ranges = {});
  /// One identity channel; the single-view pretraining setup.
  static ChannelPolicy single();

  /// Throws std::invalid_argument on a malformed policy.
  void validate() const;
};

struct ChannelSet {
  std::vector<PointCloud> scenes;
  std::vector<Transform> transforms;

  std::size_t size() const { return transforms.size(); }
};

ChannelSet weak_channels(std::span<const Point> pc, const ChannelPolicy& policy);
ChannelSet strong_channels(std::span<const Point> pc, const ChannelPolicy& policy,
                           std::uint64_t seed);

/// Draws only the transforms of a strong policy (same stream as strong_channels).
std::vector<Transform> sample_strong_transforms(const ChannelPolicy& policy, std::uint64_t seed);

/// Dispatches on `policy.mode`; the seed is ignored for weak policies.
ChannelSet make_channels(std::span<const Point> pc, const ChannelPolicy& policy,
                         std::uint64_t seed);

/// Boxes expressed in every channel's frame.
std::vector<std::vector<Box3D>> transform_pseudo_targets(std::span<const Box3D> boxes,
                                                         const ChannelSet& cs);

/// Patch-shuffle stand-in: splits the BEV extent into grid_cells^2 patches and
/// permutes patches holding zero or exactly one (fully contained) box among
/// patches of equal occupancy. Points and boxes move with their patch; the box
/// order of `scene` is preserved. This is a simplified substitute, not the
/// HSSDA shuffle.
Scene shuffle_augment(const Scene& scene, int grid_cells, std::uint64_t seed);

}  // namespace chanssl
