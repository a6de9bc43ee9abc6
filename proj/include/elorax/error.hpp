#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace elorax {

enum class ErrorKind {
  MalformedManifest,
  NonFinite,
  ShapeMismatch,
  IoFailure,
  AmbientDimMismatch,
  EmptyIntersection,
  DegenerateStack,
  OutOfRange,
  AugmentationExhausted,
  RankDeficient,
  DimMismatch,
  SubspaceHashMismatch,
  RankMismatch,
  Diverged,
  SpecInfeasible,
  InvalidArgument,
};

std::string_view to_string(ErrorKind kind);

/// True for failures of the numerics rather than of the inputs. The CLI maps
/// these to exit code 3 and everything else to exit code 2.
bool is_numerical(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace elorax
