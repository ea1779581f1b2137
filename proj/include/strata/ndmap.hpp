#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "strata/conductivity.hpp"
#include "strata/forward.hpp"
#include "strata/geometry.hpp"

namespace strata {

/// Polar facet groups over SIGMA: a central disk plus `rings` annuli of equal
/// width, annulus j split into sectors_per_ring * j sectors.
struct FluxBasisOptions {
  int rings = 2;
  int sectors_per_ring = 10;
  double max_gram_condition = 1e8;
};

/// Zero-mean facet-constant current patterns supported on SIGMA.
class FluxBasis {
 public:
  /// Validates each pattern (support in SIGMA, zero net current) and the Gram
  /// condition number. Throws Error{IncompatibleFlux}, Error{SourceOffPatch} or
  /// Error{LinearDependence}.
  FluxBasis(const Mesh& mesh, std::vector<BoundaryFlux> patterns, double max_gram_condition = 1e8);

  std::size_t size() const { return patterns_.size(); }
  const std::vector<BoundaryFlux>& patterns() const { return patterns_; }
  const BoundaryFlux& operator[](std::size_t j) const { return patterns_[j]; }
  /// Load vectors b_j (see load_vector), one column per pattern.
  const Eigen::MatrixXd& loads() const { return loads_; }
  /// Surface L2 Gram matrix of the patterns.
  const Eigen::MatrixXd& gram() const { return gram_; }
  double gram_condition() const { return gram_condition_; }
  std::uint64_t id() const { return id_; }
  std::uint64_t mesh_id() const { return mesh_id_; }

  /// This basis followed by `extra`, with the first patterns reused verbatim.
  FluxBasis extended(const Mesh& mesh, const std::vector<BoundaryFlux>& extra) const;

 private:
  std::vector<BoundaryFlux> patterns_;
  Eigen::MatrixXd loads_;
  Eigen::MatrixXd gram_;
  double gram_condition_ = 0.0;
  double max_gram_condition_ = 1e8;
  std::uint64_t id_ = 0;
  std::uint64_t mesh_id_ = 0;
};

/// Facet indices of each polar group, in group order.
std::vector<std::vector<std::size_t>> sigma_facet_groups(const Mesh& mesh, const FluxBasisOptions& options = {});

/// Consecutive differences of area-normalised group indicators.
/// Throws Error{ConfigValidation} if a group contains no facet.
FluxBasis make_dipole_basis(const Mesh& mesh, const FluxBasisOptions& options = {});

/// Discrete N-D matrix N_ij = <psi_i, u_j> over a flux basis.
struct NDMatrix {
  Eigen::MatrixXd N;
  std::uint64_t mesh_id = 0;
  std::uint64_t model_id = 0;
  std::uint64_t basis_id = 0;

  std::size_t size() const { return static_cast<std::size_t>(N.rows()); }
  /// ||N - N^T||_F / ||N||_F.
  double asymmetry() const;
  double min_eigenvalue() const;
};

/// Solves one Neumann problem per basis pattern; columns run concurrently
/// against the shared factorization.
std::vector<Vector> solve_basis(const Mesh& mesh, const StiffnessSystem& sys, const FluxBasis& basis,
                                unsigned threads = 1);

NDMatrix nd_from_fields(const FluxBasis& basis, const std::vector<Vector>& fields, std::uint64_t mesh_id,
                        std::uint64_t model_id);

struct NDOptions {
  SolverOptions solver;
  unsigned threads = 1;
};

NDMatrix build_nd(const Mesh& mesh, const StrataModel& model, const FluxBasis& basis, const NDOptions& options = {});
/// Per-element tensors; `model_id` is recorded as provenance only.
NDMatrix build_nd(const Mesh& mesh, const std::vector<Mat3>& element_tensors, std::uint64_t model_id,
                  const FluxBasis& basis, const NDOptions& options = {});

/// Pairing <phi, u> computed from SIGMA facet traces only.
double sigma_pairing(const Mesh& mesh, const BoundaryFlux& phi, const Vector& u);

struct AlessandriniGap {
  Eigen::MatrixXd lhs;  // N2 - N1
  Eigen::MatrixXd rhs;  // sum_e vol_e (sigma1_e - sigma2_e) grad u1_i . grad u2_j
  double residual = 0.0;
};

/// Throws Error{MeshMismatch} if a tensor list does not match the mesh.
AlessandriniGap alessandrini_gap(const Mesh& mesh, const std::vector<Mat3>& sigma1, const std::vector<Mat3>& sigma2,
                                 const FluxBasis& basis, const NDOptions& options = {});
AlessandriniGap alessandrini_gap(const Mesh& mesh, const StrataModel& model1, const StrataModel& model2,
                                 const FluxBasis& basis, const NDOptions& options = {});

/// ||N1 - N2||_F / ||N1||_F. Throws Error{BasisMismatch} unless both matrices
/// were built over the same basis.
double distinguishability(const NDMatrix& nd1, const NDMatrix& nd2);

/// Tensors of `model` pushed forward by psi at each element centroid, each
/// element keeping its own layer tensor. For flat layers and a horizontal
/// displacement this is the exact push-forward of the layered conductivity.
std::vector<Mat3> layer_preserving_pushforward(const Mesh& mesh, const StrataModel& model, const Diffeo& psi);

struct GaugeGap {
  double gap = 0.0;
  NDMatrix original;
  NDMatrix pushed;
};

/// Validates psi (Error{NotBoundaryFixing}) and compares the N-D matrices of
/// the model and of its layer-preserving push-forward.
GaugeGap gauge_counterexample_gap(const Mesh& mesh, const StrataModel& model, const Diffeo& psi,
                                  const FluxBasis& basis, const NDOptions& options = {});

/// CSV with a provenance header line; values printed with %.17g.
void write_nd_csv(std::ostream& out, const NDMatrix& nd);
/// Throws Error{ConfigParse}.
NDMatrix read_nd_csv(std::istream& in);

}  // namespace strata
