#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "chanssl/geom.hpp"
#include "chanssl/scene.hpp"

namespace chanssl {

struct ClassPrior {
  double w, h, l;
  double intensity;
};

/// Generator settings. Size priors and noise levels are tuned for class
/// separability at desk scale; they are not measured statistics.
struct SynthConfig {
  int max_per_class = 4;
  int max_clutter = 4;
  int n_ground = 3000;
  double ground_range = 30.0;
  double ground_sigma = 0.03;
  double object_range_min = 5.0;
  double object_range_max = 26.0;
  double size_jitter = 0.10;
  /// Surface points per square meter at 10 m; density falls off as (10/r)^2.
  double surface_density = 25.0;
  int min_pts = 20;
  int max_pts = 1200;
  std::array<ClassPrior, kNumClasses> priors{{{1.6, 1.5, 3.9, 0.6},
                                              {0.6, 1.75, 0.8, 0.3},
                                              {0.6, 1.73, 1.76, 0.45}}};
};

/// Deterministic per seed. Box parameters are quantized to 0.01 so a scene
/// survives a label-file roundtrip unchanged; point coordinates are rounded
/// to float32 for the same reason.
Scene synth_scene(std::uint64_t seed, const SynthConfig& cfg, std::string id = "");

// KITTI-style labels ---------------------------------------------------------------

struct KittiObject {
  ObjectClass cls = ObjectClass::Background;
  bool dont_care = false;
  Box3D box;
};

/// One line per object, 15 fields, 2 decimals. Boxes are in the LiDAR frame
/// (x forward, z up, z is the box center), not KITTI's camera frame; the
/// unused truncation/occlusion/alpha/2D fields are written as placeholders.
std::string write_kitti_label(const Scene& scene);
/// Throws ParseError with the 1-based line number.
std::vector<KittiObject> parse_kitti_label(std::string_view text);

// Binary clouds ------------------------------------------------------------------

/// Little-endian float32 (x, y, z, intensity) records.
void write_bin_cloud(const std::filesystem::path& path, std::span<const Point> cloud);
PointCloud read_bin_cloud(const std::filesystem::path& path);
std::string encode_bin_cloud(std::span<const Point> cloud);
PointCloud decode_bin_cloud(std::string_view bytes);

// Splits ---------------------------------------------------------------------------

struct SplitSpec {
  double fraction = 0.05;
  std::uint64_t seed = 0;
};

struct Split {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
};

/// labeled count = max(1, floor(fraction * n_frames)), drawn without
/// replacement; both lists sorted ascending.
Split split_sample(std::size_t n_frames, const SplitSpec& spec);

// Dataset directory ------------------------------------------------------------------
// <root>/points/<id>.bin, <root>/labels/<id>.txt, <root>/splits/<name>.txt

std::string scene_id(std::size_t index);
/// The points/ and labels/ subdirectories must exist.
void write_scene(const std::filesystem::path& root, const Scene& scene);
Scene read_scene(const std::filesystem::path& root, const std::string& id);
void write_split_file(const std::filesystem::path& root, const std::string& name,
                      std::span<const std::string> ids);
std::vector<std::string> read_split_file(const std::filesystem::path& root, const std::string& name);

}  // namespace chanssl
