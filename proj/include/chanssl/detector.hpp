#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "chanssl/augment.hpp"
#include "chanssl/geom.hpp"
#include "chanssl/scene.hpp"

namespace chanssl {

inline constexpr int kFeatureDim = 12;
inline constexpr int kResidualDim = 7;

struct DetectorConfig {
  double voxel_size = 0.2;
  /// BEV grid covers [-range, range]^2 in every channel frame.
  double range = 32.0;
  /// Vertical slab kept by voxelization; the floor removes the ground plane.
  double z_min = 0.15;
  double z_max = 3.15;
  double min_occ = 1.0;
  /// Occupied BEV cells within this Chebyshev distance (in cells) belong to
  /// the same proposal component.
  int link_radius = 3;
  int min_cells = 3;
  double padding = 0.1;
  double proposal_nms_iou = 0.5;
  double final_nms_iou = 0.1;
  double roi_enlarge = 1.2;
  /// Proposal/target assignment during training (BEV IoU).
  double fg_iou = 0.3;
  double bg_iou = 0.1;
};

/// Sparse voxel occupancy. Only occupied cells are stored, sorted by column
/// (iy, ix) then iz; `column_start` is a CSR index over the nx*ny columns.
struct VoxelGrid {
  struct Cell {
    int ix = 0, iy = 0, iz = 0;
    int count = 0;
    double mean_z = 0.0;
    double mean_intensity = 0.0;
  };

  std::array<double, 3> origin{};
  double voxel_size = 0.2;
  int nx = 0, ny = 0, nz = 0;
  std::vector<Cell> cells;
  std::vector<std::uint32_t> column_start;

  std::span<const Cell> column(int ix, int iy) const;
  /// Count of a cell; 0 when empty or out of extent.
  int count_at(int ix, int iy, int iz) const;
  double center_x(int ix) const { return origin[0] + (ix + 0.5) * voxel_size; }
  double center_y(int iy) const { return origin[1] + (iy + 0.5) * voxel_size; }
};

/// Height-compressed features: (max occupancy over z, occupied-z fraction,
/// max height).
struct BevGrid {
  static constexpr int kChannels = 3;
  using Feature = std::array<double, kChannels>;

  double origin_x = 0.0, origin_y = 0.0;
  double cell_size = 0.2;
  int nx = 0, ny = 0;
  std::vector<Feature> features;  // row-major, index iy * nx + ix

  const Feature& at(int ix, int iy) const { return features[static_cast<std::size_t>(iy) * nx + ix]; }
  Feature& at(int ix, int iy) { return features[static_cast<std::size_t>(iy) * nx + ix]; }
  double center_x(int ix) const { return origin_x + (ix + 0.5) * cell_size; }
  double center_y(int iy) const { return origin_y + (iy + 0.5) * cell_size; }
  /// Bilinear interpolation at a metric location; zero outside the extent.
  Feature sample(double x, double y) const;
};

using RoiFeature = std::array<double, kFeatureDim>;

/// Feature vector of an empty region.
RoiFeature empty_roi_feature();

/// Learnable heads. Layout of the flat vector: W_cls ((C+1) x F), then W_obj
/// (C x F), then W_reg (C x 7 x F).
struct DetectorParams {
  static constexpr std::size_t kClsSize = (kNumClasses + 1) * kFeatureDim;
  static constexpr std::size_t kObjSize = kNumClasses * kFeatureDim;
  static constexpr std::size_t kRegSize = kNumClasses * kResidualDim * kFeatureDim;
  static constexpr std::size_t kTotalSize = kClsSize + kObjSize + kRegSize;

  std::vector<double> values = std::vector<double>(kTotalSize, 0.0);
  double learning_rate = 0.01;

  std::span<const double, kFeatureDim> cls_row(int k) const;
  std::span<double, kFeatureDim> cls_row(int k);
  /// `cls` is a foreground class index in [1, C].
  std::span<const double, kFeatureDim> obj_row(int cls) const;
  std::span<double, kFeatureDim> obj_row(int cls);
  std::span<const double, kFeatureDim> reg_row(int cls, int k) const;
  std::span<double, kFeatureDim> reg_row(int cls, int k);

  bool finite() const;
  bool operator==(const DetectorParams&) const = default;
};

struct Proposal {
  Box3D box;
  std::array<double, kNumClasses + 1> class_scores{};
  /// Channel-1 RoI feature used by the proposal classifier.
  RoiFeature feature{};

  /// Foreground class with the highest score.
  ObjectClass top_class() const;
  double top_score() const;
};

struct Detection {
  Box3D box;
  std::vector<Box3D> per_channel_boxes;
  std::array<double, kNumClasses + 1> class_scores{};
  std::vector<double> per_channel_objectness;
  double objectness = 0.0;

  ObjectClass top_class() const;
  /// Max foreground class score.
  double p_hat() const;
  double confidence() const { return p_hat() * objectness; }
};

VoxelGrid voxelize(std::span<const Point> pc, const DetectorConfig& cfg);
/// Explicit-extent variant; cell index = floor((p - origin) / voxel_size),
/// points outside the nx*ny*nz block are dropped.
VoxelGrid voxelize(std::span<const Point> pc, const std::array<double, 3>& origin,
                   double voxel_size, int nx, int ny, int nz);
BevGrid to_bev(const VoxelGrid& grid);

/// Samples every channel at the channel-1 cell centers mapped through
/// T_i o T_1^-1 and max-pools the aligned features.
BevGrid bev_align(std::span<const BevGrid> grids, std::span<const Transform> transforms);

/// Pools the voxels of `grid` inside the proposal mapped by `t` (proposal
/// frame -> grid frame), enlarged by cfg.roi_enlarge.
RoiFeature roi_features(const Box3D& proposal, const VoxelGrid& grid, const Transform& t,
                        const DetectorConfig& cfg);

std::array<double, kNumClasses + 1> classify(const DetectorParams& params, const RoiFeature& phi);
Residual regress(const DetectorParams& params, int cls, const RoiFeature& phi);
double objectness(const DetectorParams& params, int cls, const RoiFeature& phi);

/// Connected components of the fused BEV occupancy, fitted with oriented
/// boxes and scored from the channel-1 voxels.
std::vector<Proposal> propose(const BevGrid& fused, const VoxelGrid& channel1,
                              const DetectorParams& params, const DetectorConfig& cfg);

/// Everything the heads see for one scene: channel grids, shared proposals,
/// per-channel RoI features and proposals mapped into every channel frame.
struct ForwardPass {
  std::vector<Transform> transforms;
  std::vector<VoxelGrid> grids;
  std::vector<Proposal> proposals;
  std::vector<std::vector<RoiFeature>> features;  // [proposal][channel]
  std::vector<std::vector<Box3D>> anchors;        // [proposal][channel], channel frames
};

ForwardPass forward(const ChannelSet& channels, const DetectorParams& params,
                    const DetectorConfig& cfg);

std::vector<Detection> refine(std::span<const Proposal> proposals, std::span<const VoxelGrid> grids,
                              std::span<const Transform> transforms, const DetectorParams& params,
                              const DetectorConfig& cfg);

/// Refinement reusing the features of a forward pass.
std::vector<Detection> refine(const ForwardPass& pass, const DetectorParams& params);

std::vector<Detection> detect(std::span<const Point> pc, const ChannelPolicy& policy,
                              const DetectorParams& params, const DetectorConfig& cfg,
                              std::uint64_t seed);

// Training ------------------------------------------------------------------

/// One proposal with its supervision in every channel frame.
struct TrainSample {
  RoiFeature cls_feature{};
  std::vector<RoiFeature> channel_features;
  std::vector<Box3D> channel_anchors;
  std::vector<Box3D> channel_targets;  // yaw-aligned to the anchors; empty for background
  int label = 0;                       // 0 background, 1..C foreground
  double weight = 1.0;
  /// Head losses only count when the predicted class equals `label`.
  bool head_requires_class_match = false;
  /// Filled by prepare_objectness_targets: IoU of the decoded box with the
  /// target per channel (0 for background).
  std::vector<double> objectness_targets;
};

struct Losses {
  double cls = 0.0;
  double reg = 0.0;
  double obj = 0.0;
  double total() const { return cls + reg + obj; }
};

/// Target boxes in the original scene frame.
struct TargetSet {
  std::vector<Box3D> boxes;
  std::vector<ObjectClass> classes;
  std::vector<double> weights;
};

/// Assigns every proposal of `pass` to a target by BEV IoU in the channel-1
/// frame: foreground at >= fg_iou, background below bg_iou, ignored between.
std::vector<TrainSample> build_train_samples(const ForwardPass& pass, const TargetSet& targets,
                                             const DetectorConfig& cfg,
                                             bool head_requires_class_match = false);

void prepare_objectness_targets(const DetectorParams& params, std::span<TrainSample> batch);

/// Weighted losses (cross-entropy, smooth-L1, L2) averaged over the batch,
/// with objectness targets treated as constants.
Losses compute_losses(const DetectorParams& params, std::span<const TrainSample> batch);
Losses loss_and_gradient(const DetectorParams& params, std::span<const TrainSample> batch,
                         std::vector<double>& grad);

/// One SGD step. Throws NonFiniteLossError and leaves `params` untouched when
/// the loss is not finite.
Losses train_step(DetectorParams& params, std::span<TrainSample> batch);

struct JointLosses {
  Losses labeled;
  Losses unlabeled;
};

/// One SGD step on the sum of two batch-mean losses (labeled + unlabeled).
JointLosses train_step(DetectorParams& params, std::span<TrainSample> labeled,
                       std::span<TrainSample> unlabeled);

// Serialization ---------------------------------------------------------------

/// Little-endian: 8-byte magic, u32 version, u32 tensor count, per tensor
/// u32 rank + u32 dims, f64 learning rate, then f64 values.
void save_params(const DetectorParams& params, const std::filesystem::path& path);
DetectorParams load_params(const std::filesystem::path& path);

}  // namespace chanssl
