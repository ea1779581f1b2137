#include "strata/error.hpp"

namespace strata {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::OrderingViolation: return "OrderingViolation";
    case ErrorKind::EmptyLayer: return "EmptyLayer";
    case ErrorKind::ResolutionTooCoarse: return "ResolutionTooCoarse";
    case ErrorKind::FlatInterface: return "FlatInterface";
    case ErrorKind::NotSPD: return "NotSPD";
    case ErrorKind::EllipticityViolation: return "EllipticityViolation";
    case ErrorKind::JumpViolation: return "JumpViolation";
    case ErrorKind::SingularTensor: return "SingularTensor";
    case ErrorKind::InverseMapDiverged: return "InverseMapDiverged";
    case ErrorKind::NotBoundaryFixing: return "NotBoundaryFixing";
    case ErrorKind::TagOutOfRange: return "TagOutOfRange";
    case ErrorKind::IncompatibleFlux: return "IncompatibleFlux";
    case ErrorKind::SolverDiverged: return "SolverDiverged";
    case ErrorKind::SourceOffPatch: return "SourceOffPatch";
    case ErrorKind::LinearDependence: return "LinearDependence";
    case ErrorKind::MeshMismatch: return "MeshMismatch";
    case ErrorKind::BasisMismatch: return "BasisMismatch";
    case ErrorKind::InsufficientNormals: return "InsufficientNormals";
    case ErrorKind::NotConsistent: return "NotConsistent";
    case ErrorKind::LineSearchFailed: return "LineSearchFailed";
    case ErrorKind::HitEllipticityBound: return "HitEllipticityBound";
    case ErrorKind::NonIdentifiable: return "NonIdentifiable";
    case ErrorKind::MeshingFailed: return "MeshingFailed";
    case ErrorKind::MaxIterations: return "MaxIterations";
    case ErrorKind::ConfigParse: return "ConfigParse";
    case ErrorKind::ConfigValidation: return "ConfigValidation";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

}  // namespace strata
