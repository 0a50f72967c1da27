#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace collapse_lab {

enum class ErrorKind {
    ZeroVariance,
    Unbalanced,
    DegenerateBetweenClass,
    ZeroGram,
    ZeroVector,
    DegenerateClass,
    DimensionTooSmall,
    NonFinite,
    CollisionPersists,
    MarginBelowFloor,
    ShapeMismatch,
    Config,
    Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Library-wide exception. `kind` lets callers (the CLI in particular) map
/// failures onto exit codes without parsing messages.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

    [[nodiscard]] ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool condition, ErrorKind kind, const std::string& what) {
    if (!condition) {
        throw Error(kind, what);
    }
}

}  // namespace collapse_lab
