#include "chanssl/scene.hpp"

namespace chanssl {

std::string_view class_name(ObjectClass c) {
  switch (c) {
    case ObjectClass::Car:
      return "Car";
    case ObjectClass::Pedestrian:
      return "Pedestrian";
    case ObjectClass::Cyclist:
      return "Cyclist";
    case ObjectClass::Background:
      break;
  }
  return "Background";
}

std::optional<ObjectClass> class_from_name(std::string_view name) {
  if (name == "Car") return ObjectClass::Car;
  if (name == "Pedestrian") return ObjectClass::Pedestrian;
  if (name == "Cyclist") return ObjectClass::Cyclist;
  return std::nullopt;
}

}  // namespace chanssl
