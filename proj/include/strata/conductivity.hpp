#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Core>

#include "strata/geometry.hpp"

namespace strata {

using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Constant symmetric positive-definite 3x3 conductivity of one layer.
/// Stored as the six upper-triangle values (s11, s12, s13, s22, s23, s33), so
/// symmetry holds exactly.
class AnisoTensor {
 public:
  AnisoTensor() : AnisoTensor(identity()) {}
  /// Throws Error{NotSPD} if `upper` does not describe an SPD matrix.
  explicit AnisoTensor(const std::array<double, 6>& upper);
  /// Accepts a matrix that is symmetric to 1e-12 relative; throws otherwise.
  static AnisoTensor from_matrix(const Mat3& m);
  static AnisoTensor identity() { return AnisoTensor({1, 0, 0, 1, 0, 1}); }
  static AnisoTensor diagonal(double a, double b, double c) { return AnisoTensor({a, 0, 0, b, 0, c}); }

  const std::array<double, 6>& upper() const { return upper_; }
  Mat3 matrix() const;
  Eigen::Vector3d eigenvalues() const;

  /// True iff all eigenvalues lie in [1/lambda, lambda].
  bool elliptic(double lambda) const;
  /// Throws Error{EllipticityViolation} unless elliptic(lambda).
  void check_ellipticity(double lambda) const;

  AnisoTensor scaled(double c) const;

  friend bool operator==(const AnisoTensor& a, const AnisoTensor& b) { return a.upper_ == b.upper_; }

 private:
  std::array<double, 6> upper_;
};

double frobenius_distance(const AnisoTensor& a, const AnisoTensor& b);

/// Index of upper-triangle entry p (0..5) as (row, col).
std::array<int, 2> upper_index(int p);

struct ModelOptions {
  double lambda = 100.0;
  /// Quantitative visibility margin: ||sigma_k - sigma_{k+1}||_F >= jump_tolerance.
  double jump_tolerance = 1e-6;
  /// Experiments that deliberately build invisible interfaces turn this off.
  bool enforce_jump = true;
};

/// Layered conductivity: region plus one tensor per layer (top to bottom).
class StrataModel {
 public:
  /// Throws Error{ConfigValidation} on a count mismatch, Error{EllipticityViolation}
  /// or Error{JumpViolation} when the invariants fail.
  StrataModel(StrataRegion region, std::vector<AnisoTensor> tensors, ModelOptions options = {});

  const StrataRegion& region() const { return region_; }
  const std::vector<AnisoTensor>& tensors() const { return tensors_; }
  const ModelOptions& options() const { return options_; }
  int num_layers() const { return static_cast<int>(tensors_.size()); }
  /// Tensor of layer k in 1..K+1.
  const AnisoTensor& layer_tensor(int k) const;

  bool satisfies_jump_condition() const;
  /// Conductivity at a point (layer lookup through the interfaces).
  Mat3 at(const Vec3& x) const;
  /// Per-element tensors from the mesh region tags; Error{TagOutOfRange}.
  std::vector<Mat3> element_tensors(const Mesh& mesh) const;

  std::uint64_t id() const;

 private:
  StrataRegion region_;
  std::vector<AnisoTensor> tensors_;
  ModelOptions options_;
};

/// g = (det sigma)^{1/(n-2)} sigma^{-1}. Only n = 3 is supported.
/// Throws Error{SingularTensor} when cond(sigma) > 1e12 or sigma is not SPD.
Mat3 metric_of(const Mat3& sigma, int n = 3);
inline Mat3 metric_of(const AnisoTensor& sigma, int n = 3) { return metric_of(sigma.matrix(), n); }

struct TangentFrame {
  Vec3 t1;
  Vec3 t2;
};

/// Orthonormal tangent pair for a unit normal: the first two columns of the
/// Householder reflector with v = e3 + n, so n = e3 gives {e1, e2} and the
/// frame is continuous everywhere except at n = -e3.
TangentFrame tangent_frame(const Vec3& normal);

struct TangentialBlock {
  Mat2 block;  // [t_a . g t_b]
  TangentFrame frame;
};

TangentialBlock tangential_submatrix(const Mat3& g, const Vec3& normal);

/// Displacement a * B(x) * d, where B is a product of C-infinity bumps
/// exp(1 - 1/(1 - t^2)) supported in the box |x_i - c_i| < w_i.
struct BumpDisplacement {
  Vec3 center = Vec3::Zero();
  Vec3 half_widths = Vec3::Ones();
  Vec3 direction = Vec3::UnitX();
  double amplitude = 0.0;

  double bump(const Vec3& x) const;
  Vec3 bump_gradient(const Vec3& x) const;
};

/// Boundary-fixing map of the region onto itself: a composition of
/// identity-plus-bump stages, applied first to last.
class Diffeo {
 public:
  Diffeo() = default;
  static Diffeo identity() { return Diffeo(); }
  static Diffeo bump(const BumpDisplacement& b);

  /// outer o this.
  Diffeo then(const Diffeo& outer) const;

  Vec3 apply(const Vec3& x) const;
  Mat3 jacobian(const Vec3& x) const;
  /// Newton iteration per stage to residual 1e-12; Error{InverseMapDiverged}.
  Vec3 inverse(const Vec3& x) const;

  const std::vector<BumpDisplacement>& stages() const { return stages_; }
  bool is_identity() const { return stages_.empty(); }

  /// Checks that every bump support lies strictly inside the region (so the
  /// map and its Jacobian are the identity on the boundary) and that
  /// det DPsi > 0 on a samples^3 grid. Throws Error{NotBoundaryFixing}.
  void validate(const StrataRegion& region, int samples = 24) const;

 private:
  std::vector<BumpDisplacement> stages_;
};

using TensorField = std::function<Mat3(const Vec3&)>;

/// (DPsi sigma DPsi^T / det DPsi) evaluated at Psi^{-1}(at).
Mat3 pushforward(const TensorField& sigma, const Diffeo& psi, const Vec3& at);
Mat3 pushforward(const AnisoTensor& sigma, const Diffeo& psi, const Vec3& at);

}  // namespace strata
