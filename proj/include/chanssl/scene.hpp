#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "chanssl/geom.hpp"

namespace chanssl {

enum class ObjectClass : int { Background = 0, Car = 1, Pedestrian = 2, Cyclist = 3 };

inline constexpr int kNumClasses = 3;  // foreground classes

inline constexpr std::array<ObjectClass, kNumClasses> kForegroundClasses{
    ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist};

std::string_view class_name(ObjectClass c);
std::optional<ObjectClass> class_from_name(std::string_view name);

inline int class_index(ObjectClass c) { return static_cast<int>(c); }

/// A point cloud with optional annotations. Unlabeled scenes may still carry
/// hidden ground truth that is only used for metrics.
struct Scene {
  std::string id;
  PointCloud cloud;
  std::vector<Box3D> gt_boxes;
  std::vector<ObjectClass> gt_classes;
};

}  // namespace chanssl
