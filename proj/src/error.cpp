#include "elorax/error.hpp"

namespace elorax {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedManifest: return "MalformedManifest";
    case ErrorKind::NonFinite: return "NonFinite";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::AmbientDimMismatch: return "AmbientDimMismatch";
    case ErrorKind::EmptyIntersection: return "EmptyIntersection";
    case ErrorKind::DegenerateStack: return "DegenerateStack";
    case ErrorKind::OutOfRange: return "OutOfRange";
    case ErrorKind::AugmentationExhausted: return "AugmentationExhausted";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::DimMismatch: return "DimMismatch";
    case ErrorKind::SubspaceHashMismatch: return "SubspaceHashMismatch";
    case ErrorKind::RankMismatch: return "RankMismatch";
    case ErrorKind::Diverged: return "Diverged";
    case ErrorKind::SpecInfeasible: return "SpecInfeasible";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

bool is_numerical(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::DegenerateStack:
    case ErrorKind::AugmentationExhausted:
    case ErrorKind::RankDeficient:
    case ErrorKind::Diverged:
      return true;
    default:
      return false;
  }
}

}  // namespace elorax
