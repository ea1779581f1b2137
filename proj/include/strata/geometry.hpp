#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

namespace strata {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;

/// One term of the interface basis: amplitude * cos(i*pi*x1/R) * cos(j*pi*x2/R).
struct CosineMode {
  int i = 0;
  int j = 0;
  double amplitude = 0.0;
};

/// A graph surface x3 = phi(x1, x2) over the region footprint, written as a
/// depth offset plus a finite sum of tensor-product cosine modes. x3 grows with
/// depth, so the measurement surface is the interface with the smallest x3.
class Interface {
 public:
  Interface() = default;
  /// `scale` is the footprint radius R that sets the mode wavelengths.
  /// The constant mode (0, 0) is rejected; use the offset instead.
  Interface(double offset, std::vector<CosineMode> modes, double scale);

  static Interface flat(double offset, double scale) { return Interface(offset, {}, scale); }

  double operator()(const Vec2& x) const;
  Vec2 gradient(const Vec2& x) const;
  /// Unit normal of the graph, oriented towards increasing x3.
  Vec3 unit_normal(const Vec2& x) const;

  /// True iff some mode amplitude is nonzero. For this analytic basis this is
  /// equivalent to phi not being constant on any open set.
  bool non_flat() const;

  double offset() const { return offset_; }
  double scale() const { return scale_; }
  const std::vector<CosineMode>& modes() const { return modes_; }

  /// Same basis, new coefficients (offset first, then amplitudes in mode order).
  Interface with_coefficients(const std::vector<double>& coeffs) const;
  std::vector<double> coefficients() const;

 private:
  double offset_ = 0.0;
  double scale_ = 1.0;
  std::vector<CosineMode> modes_;
};

enum class Footprint { Disk, Square };

/// Input description of a layered region; validated by build_strata_region.
struct StrataRegionSpec {
  double radius = 1.0;
  double cap_height = 1.0;
  Footprint footprint = Footprint::Disk;
  double top_offset = 0.0;
  std::vector<CosineMode> top_modes;
  struct InterfaceSpec {
    double offset = 0.0;
    std::vector<CosineMode> modes;
  };
  std::vector<InterfaceSpec> interfaces;
  /// Minimum admissible layer thickness; defaults to 0.05 * cap_height.
  std::optional<double> min_gap;
  /// Samples per axis for the ordering check (at least 64).
  int check_samples = 64;
};

/// Cylinder {x' in footprint, phi_0(x') <= x3 <= M} cut into K+1 layers by the
/// graph interfaces phi_1 < ... < phi_K. Layer k (1-based) lies between
/// phi_{k-1} and phi_k; layer K+1 lies between phi_K and the flat cap x3 = M.
class StrataRegion {
 public:
  double radius() const { return radius_; }
  double cap_height() const { return cap_height_; }
  Footprint footprint() const { return footprint_; }
  const Interface& top_surface() const { return top_; }
  const std::vector<Interface>& interfaces() const { return interfaces_; }
  int num_interfaces() const { return static_cast<int>(interfaces_.size()); }
  int num_layers() const { return num_interfaces() + 1; }
  double min_gap() const { return min_gap_; }
  /// Smallest layer thickness seen on the validation grid.
  double measured_min_gap() const { return measured_min_gap_; }

  /// Surface k in 0..K (0 is the top surface).
  const Interface& surface(int k) const;
  /// Height of surface k at x' for k in 0..K+1, where K+1 is the cap x3 = M.
  /// Layer k lies between surface_height(k-1, .) and surface_height(k, .).
  double surface_height(int k, const Vec2& x) const;

  bool in_footprint(const Vec2& x, double tol = 0.0) const;
  /// Layer index 1..K+1 containing x, or 0 when x is outside the region.
  int layer_at(const Vec3& x) const;

  /// Footprint sample points used for validation (grid plus boundary ring).
  std::vector<Vec2> sample_points(int per_axis) const;

 private:
  friend StrataRegion build_strata_region(const StrataRegionSpec&);
  friend StrataRegion with_interfaces(const StrataRegion&, std::vector<Interface>);

  double radius_ = 1.0;
  double cap_height_ = 1.0;
  Footprint footprint_ = Footprint::Disk;
  Interface top_;
  std::vector<Interface> interfaces_;
  double min_gap_ = 0.0;
  double measured_min_gap_ = 0.0;
  int check_samples_ = 64;
};

/// Validates ordering phi_0 < phi_1 < ... < phi_K < M (with min_gap margin).
/// Throws Error{OrderingViolation} or Error{EmptyLayer}.
StrataRegion build_strata_region(const StrataRegionSpec& spec);

/// Copy of `region` with its interfaces replaced, re-validated.
StrataRegion with_interfaces(const StrataRegion& region, std::vector<Interface> interfaces);

enum class FacetTag : int { Sigma = 1, OtherBoundary = 2 };

/// Conforming P1 tetrahedral mesh of a StrataRegion.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 4>> tets;
  std::vector<int> region_tags;  // 1..num_regions
  std::vector<std::array<int, 3>> boundary_facets;
  std::vector<FacetTag> facet_tags;
  std::vector<Vec3> outward_normals;
  std::vector<double> facet_areas;
  int num_regions = 0;
  double sigma_radius = 0.0;
  std::uint64_t id = 0;  // content hash of vertices, tets and tags

  std::size_t num_vertices() const { return vertices.size(); }
  std::size_t num_tets() const { return tets.size(); }
  double tet_volume(std::size_t e) const;
  Vec3 tet_centroid(std::size_t e) const;
  Vec3 facet_centroid(std::size_t f) const;
  double boundary_area() const;
  double tagged_area(FacetTag tag) const;
};

struct MeshOptions {
  double h = 0.1;
  /// SIGMA is the part of the top surface with |x'| <= sigma_radius.
  double sigma_radius = 0.5;
  /// Sublayers per layer. Empty: ceil(max thickness / h) per layer. A fixed
  /// count keeps the mesh topology independent of interface positions.
  std::vector<int> sublayers;
};

/// Structured prism-extrusion mesh: 2D triangulation of the footprint,
/// extruded between consecutive interfaces, each prism split into 3 tets.
/// Throws Error{ResolutionTooCoarse} when 2 * region.measured_min_gap() < h.
Mesh mesh_region(const StrataRegion& region, const MeshOptions& options);

struct SurfacePoint {
  Vec3 point;
  Vec3 normal;
};

/// Surface points with pairwise-distinct normals (angle >= min_angle_deg),
/// chosen by farthest-point selection on an n_samples x n_samples grid over
/// the disk |x'| <= iface.scale(). Returns between 3 and max_points entries;
/// throws Error{FlatInterface}.
std::vector<SurfacePoint> non_flatness_certificate(const Interface& iface, int n_samples,
                                                   double min_angle_deg = 1.0, int max_points = 6);

double angle_between_deg(const Vec3& a, const Vec3& b);

}  // namespace strata
