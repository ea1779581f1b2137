#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCore>

#include "strata/conductivity.hpp"
#include "strata/geometry.hpp"

namespace strata {

using Vector = Eigen::VectorXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

/// Facet-piecewise-constant Neumann datum: one current density per boundary
/// facet of the mesh (same order as Mesh::boundary_facets).
struct BoundaryFlux {
  std::vector<double> density;
};

BoundaryFlux zero_flux(const Mesh& mesh);
/// Sum of density * area over all boundary facets.
double total_flux(const Mesh& mesh, const BoundaryFlux& flux);
/// |total| <= tol * sum |density| * area.
bool is_compatible(const Mesh& mesh, const BoundaryFlux& flux, double tol = 1e-12);
/// Load vector b_i = sum_f q_f |f| / 3 over facets touching vertex i. The
/// pairing <psi, u> of a flux with a P1 trace is load(psi) . u.
Vector load_vector(const Mesh& mesh, const BoundaryFlux& flux);
/// m_i = integral of the nodal hat function over the boundary.
Vector boundary_mass(const Mesh& mesh);

/// Volume and barycentric gradients (columns) of a P1 tetrahedron.
struct P1Element {
  double volume;
  Eigen::Matrix<double, 3, 4> grads;
};
P1Element p1_element(const Mesh& mesh, std::size_t e);
Vec3 element_gradient(const Mesh& mesh, std::size_t e, const Vector& u);

/// A(sigma) with A_ij = sum_e vol_e grad(l_i)^T sigma_e grad(l_j). Elements are
/// processed in fixed chunks whose triplets are concatenated in order, so the
/// result is bitwise independent of `threads`.
SparseMatrix assemble_matrix(const Mesh& mesh, const std::vector<Mat3>& element_tensors, unsigned threads = 1);

struct SolverOptions {
  /// Unknown count at or above which conjugate gradients replaces the direct solver.
  std::size_t direct_limit = 20000;
  double cg_tolerance = 1e-12;
  int cg_max_iterations = 50000;
  double residual_tolerance = 1e-10;
};

struct NeumannSolution {
  Vector u;
  /// Lagrange multiplier of the zero-mean constraint (0 for compatible data).
  double multiplier = 0.0;
  double relative_residual = 0.0;
};

/// Stiffness matrix, boundary mass vector and a factorization for the pure
/// Neumann problem with the constraint  integral_{dOmega} u = 0. Copies share
/// the read-only factorization; concurrent solves are safe.
class StiffnessSystem {
 public:
  /// Throws Error{TagOutOfRange} if the model has fewer layers than the mesh tags.
  static StiffnessSystem assemble(const Mesh& mesh, const StrataModel& model, const SolverOptions& options = {},
                                  unsigned threads = 1);
  static StiffnessSystem assemble(const Mesh& mesh, const std::vector<Mat3>& element_tensors,
                                  const SolverOptions& options = {}, unsigned threads = 1);

  const SparseMatrix& matrix() const { return A_; }
  const Vector& boundary_mass() const { return m_; }
  std::uint64_t mesh_id() const { return mesh_id_; }
  std::size_t size() const { return static_cast<std::size_t>(A_.rows()); }
  bool uses_direct_solver() const { return static_cast<bool>(direct_); }

  /// Solves [A m; m^T 0][u; mu] = [b; 0] for a compatible load b (1^T b = 0).
  /// Throws Error{IncompatibleFlux} or Error{SolverDiverged}.
  NeumannSolution solve_load(const Vector& b) const;

 private:
  struct Direct;
  SparseMatrix A_;
  Vector m_;
  std::uint64_t mesh_id_ = 0;
  SolverOptions options_;
  std::shared_ptr<const Direct> direct_;
};

NeumannSolution solve_neumann(const Mesh& mesh, const StiffnessSystem& sys, const BoundaryFlux& flux);

/// u^T A u.
double energy(const StiffnessSystem& sys, const Vector& u);

/// Indices of the SIGMA facets, in mesh order.
std::vector<std::size_t> sigma_facets(const Mesh& mesh);
/// Facet-averaged nodal values on each SIGMA facet (order of sigma_facets).
std::vector<double> boundary_trace(const Mesh& mesh, const Vector& u);

/// Flux of the smoothed point source at y (on the top surface, given by its
/// horizontal position) minus the uniform density 1/|dOmega|. The source is
/// (1 - (r/eps)^2)^2 over SIGMA facets, normalised to unit mass.
/// Throws Error{SourceOffPatch} if the smoothed source reaches a non-SIGMA facet
/// or covers fewer than 6 facets.
BoundaryFlux kernel_probe_flux(const Mesh& mesh, const Vec2& y, double eps);
Vector neumann_kernel_probe(const Mesh& mesh, const StiffnessSystem& sys, const Vec2& y, double eps);

}  // namespace strata
