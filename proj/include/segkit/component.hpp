#pragma once

#include <array>
#include <string>
#include <string_view>

namespace segkit {

enum class ComponentKind { model, backbone, loss, transform, dataset };

inline constexpr std::array<ComponentKind, 5> kComponentKinds = {
    ComponentKind::model, ComponentKind::backbone, ComponentKind::loss, ComponentKind::transform, ComponentKind::dataset};

inline std::string_view to_string(ComponentKind kind) {
  switch (kind) {
    case ComponentKind::model: return "model";
    case ComponentKind::backbone: return "backbone";
    case ComponentKind::loss: return "loss";
    case ComponentKind::transform: return "transform";
    case ComponentKind::dataset: return "dataset";
  }
  return "?";
}

/// Anything the registry can build. Instances report the name they were
/// registered under.
class Component {
 public:
  virtual ~Component() = default;
  virtual std::string component_name() const = 0;
};

}  // namespace segkit
