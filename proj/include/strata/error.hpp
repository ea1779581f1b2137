#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace strata {

enum class ErrorKind {
  // geometry
  OrderingViolation,
  EmptyLayer,
  ResolutionTooCoarse,
  FlatInterface,
  // conductivity
  NotSPD,
  EllipticityViolation,
  JumpViolation,
  SingularTensor,
  InverseMapDiverged,
  NotBoundaryFixing,
  // forward
  TagOutOfRange,
  IncompatibleFlux,
  SolverDiverged,
  SourceOffPatch,
  // ndmap
  LinearDependence,
  MeshMismatch,
  BasisMismatch,
  // identify
  InsufficientNormals,
  NotConsistent,
  LineSearchFailed,
  HitEllipticityBound,
  NonIdentifiable,
  MeshingFailed,
  MaxIterations,
  // configuration / io
  ConfigParse,
  ConfigValidation,
  Io,
};

std::string_view to_string(ErrorKind kind);

/// Exception type used throughout the toolkit. The kind is stable and is what
/// callers (and the CLI exit-code mapping) dispatch on; the message is free text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what);

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace strata
