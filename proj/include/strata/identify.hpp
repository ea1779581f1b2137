#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "strata/conductivity.hpp"
#include "strata/geometry.hpp"
#include "strata/ndmap.hpp"

namespace strata {

/// Tangential restriction of a metric at one surface point, expressed in
/// tangent_frame(normal).
struct TangentialSample {
  Vec3 point = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  Mat2 block = Mat2::Identity();
};

struct TensorRecovery {
  Mat3 metric;
  AnisoTensor sigma;
  double residual = 0.0;  // ||A g - d|| / ||d||
  int rank = 0;
};

/// Least-squares recovery of a constant metric from tangential blocks, then
/// sigma = sqrt(det g) g^{-1}. Each plane contributes 3 equations on the 6
/// entries of g; two planes only ever give rank 5 (the entry along
/// n1 x n2 is seen twice), so at least three normals are needed.
/// Throws Error{InsufficientNormals}, Error{NotConsistent} or Error{NotSPD}.
TensorRecovery recover_tensor_from_tangential(const std::vector<TangentialSample>& samples,
                                              double consistency_tolerance = 1e-8);

enum class TensorJacobian { Analytic, ForwardDifference };

/// Shared controls of the Gauss-Newton (Levenberg-Marquardt) fits.
struct FitOptions {
  TensorJacobian tensor_jacobian = TensorJacobian::Analytic;
  /// Relative step for forward-difference tensor columns.
  double tensor_fd_step = 1e-4;
  /// Central-difference step for interface coefficients, in units of M.
  double interface_fd_step = 1e-4;
  int max_iterations = 60;
  /// Stop when the relative misfit falls below this value.
  double misfit_tolerance = 1e-20;
  /// Stop when an accepted step reduces the misfit by less than this fraction.
  double stall_tolerance = 1e-6;
  double initial_damping = 1e-3;
  int max_rejections = 12;
  /// Eigenvalue bounds [1/lambda, lambda] of the SPD projection.
  double lambda = 100.0;
  NDOptions nd;
};

struct TopFit {
  AnisoTensor sigma;
  double misfit = 0.0;  // ||N - N_meas||_F^2 / ||N_meas||_F^2
  std::vector<double> history;
  int jacobian_rank = 0;
  int iterations = 0;
};

/// Best homogeneous tensor for the measured matrix on a fixed mesh.
/// Throws Error{NonIdentifiable} when the Jacobian has rank < 6,
/// Error{LineSearchFailed} or Error{HitEllipticityBound}.
TopFit fit_top_tensor(const NDMatrix& measured, const Mesh& mesh, const FluxBasis& basis,
                      const FitOptions& options = {}, const std::optional<AnisoTensor>& initial = std::nullopt);

/// Everything about the region and discretisation that the inversion treats
/// as known: footprint, cap, top surface, mesh family and probing patterns.
struct InversionSetup {
  double radius = 1.0;
  double cap_height = 1.0;
  Footprint footprint = Footprint::Disk;
  double top_offset = 0.0;
  std::vector<CosineMode> top_modes;
  double h = 0.125;
  double sigma_radius = 0.8;
  int sublayers_per_layer = 4;
  std::optional<double> min_gap;
  /// (i, j) modes of every unknown interface; amplitudes are the unknowns.
  std::vector<std::array<int, 2>> interface_modes = {{1, 0}, {0, 1}, {1, 1}};
  FluxBasisOptions basis;

  StrataRegion region(const std::vector<Interface>& interfaces) const;
  Mesh mesh(const StrataRegion& region) const;
  Interface flat_interface(double offset) const;
  /// Flat interface halfway between the deepest top point and the cap; a
  /// homogeneous model is meshed with it and the same tensor on both sides.
  Interface placeholder_interface() const;
};

struct StripOptions {
  int k_max = 3;
  double accept_ratio = 10.0;
  double jump_tolerance = 1e-6;
  /// Relative misfit regarded as fully explained; no further layer is accepted.
  double misfit_floor = 1e-14;
  /// Depth offsets tried for a new interface, as fractions of the free span.
  std::vector<double> offset_starts = {0.25, 0.5, 0.75};
  /// Initial sigma_{k+1} = factor * sigma_k.
  std::vector<double> contrast_starts = {3.0, 1.0 / 3.0};
  int start_iterations = 4;
  /// Interfaces with all |amplitude| <= flat_tolerance * M count as flat.
  double flat_tolerance = 1e-3;
  double rank_tolerance = 1e-10;
  FitOptions fit;
};

struct StageRecord {
  int k = 0;
  bool accepted = false;
  double misfit_before = 0.0;
  double misfit_after = 0.0;
  double jump = 0.0;
  std::string decision;
  std::vector<double> interface_coefficients;
  std::array<double, 6> tensor_below{};
};

/// Layer-stripping state: surfaces and tensors above the current interface
/// are frozen once committed and never enter a parameter vector again.
struct InversionState {
  int k = 0;
  std::vector<Interface> frozen_interfaces;
  std::vector<AnisoTensor> frozen_tensors;
  std::vector<Interface> working_interfaces;
  std::vector<AnisoTensor> working_tensors;
  std::vector<double> misfit_history;
};

/// Misfits of one Levenberg-Marquardt run: the start and every accepted step.
struct RunHistory {
  std::string label;
  std::vector<double> misfits;
};

struct InversionReport {
  int num_interfaces = 0;
  std::vector<Interface> interfaces;
  std::vector<AnisoTensor> tensors;
  double misfit = 0.0;
  /// Committed misfits: homogeneous fit, each accepted layer, joint refinement.
  std::vector<double> misfit_history;
  std::vector<RunHistory> runs;
  std::vector<StageRecord> stages;
  std::string stopping_reason;
  bool identifiable = false;
  std::vector<std::string> identifiability_notes;
  double jacobian_condition = 0.0;
  int total_iterations = 0;
};

struct StripResult {
  StrataModel model;
  InversionReport report;
  /// State after the homogeneous fit, after each accepted layer and at the end.
  std::vector<InversionState> snapshots;
};

/// Layer stripping from the top: fit a homogeneous tensor, then for
/// k = 1..k_max fit interface k, sigma_k and sigma_{k+1} with the layers
/// above frozen, keep the interface only if the misfit drops by accept_ratio
/// and the jump exceeds jump_tolerance, and finish with a joint refinement.
/// Throws Error{MaxIterations} or Error{LineSearchFailed}.
StripResult strip_layers(const NDMatrix& measured, const InversionSetup& setup, const StripOptions& options = {});

/// Relative error of Jacobian-vector products against central differences
/// of the residual, along `directions` random unit directions in the full
/// parameter space (all interfaces and tensors) of `model`.
struct JacobianCheck {
  std::vector<double> relative_errors;
  double max_error = 0.0;
};
JacobianCheck jacobian_check(const NDMatrix& measured, const InversionSetup& setup, const StrataModel& model,
                             int directions, std::uint64_t seed, double step = 1e-5, const FitOptions& options = {});

struct KernelFitRow {
  double eps = 0.0;
  Mat2 form;  // fitted tangential form, normalised to det 1
  double condition = 0.0;
  double axis_deg = 0.0;          // major-axis angle of the fitted form in the tangent frame
  double expected_axis_deg = 0.0;  // same for the tangential metric
  double axis_error_deg = 0.0;
  double expected_condition = 0.0;
  double fit_residual = 0.0;  // relative rms
  int samples = 0;
};

/// Fits u(z) ~ c + b.z + kappa / sqrt(z^T Q z) to the probe trace on the top
/// surface annulus 2 eps <= |z| <= 4 eps around y, for each eps, and compares
/// Q with the tangential metric of the top layer at y.
/// Throws Error{SourceOffPatch}.
std::vector<KernelFitRow> kernel_asymptotics_demo(const Mesh& mesh, const StrataModel& model, const Vec2& y,
                                                  const std::vector<double>& radii, const SolverOptions& solver = {});

}  // namespace strata
