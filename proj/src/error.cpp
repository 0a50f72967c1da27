#include "collapse_lab/error.hpp"

namespace collapse_lab {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::ZeroVariance: return "ZeroVariance";
        case ErrorKind::Unbalanced: return "Unbalanced";
        case ErrorKind::DegenerateBetweenClass: return "DegenerateBetweenClass";
        case ErrorKind::ZeroGram: return "ZeroGram";
        case ErrorKind::ZeroVector: return "ZeroVector";
        case ErrorKind::DegenerateClass: return "DegenerateClass";
        case ErrorKind::DimensionTooSmall: return "DimensionTooSmall";
        case ErrorKind::NonFinite: return "NonFinite";
        case ErrorKind::CollisionPersists: return "CollisionPersists";
        case ErrorKind::MarginBelowFloor: return "MarginBelowFloor";
        case ErrorKind::ShapeMismatch: return "ShapeMismatch";
        case ErrorKind::Config: return "Config";
        case ErrorKind::Io: return "Io";
    }
    return "Unknown";
}

}  // namespace collapse_lab
