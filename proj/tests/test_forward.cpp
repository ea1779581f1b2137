#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include <Eigen/Geometry>

#include "strata/error.hpp"
#include "strata/forward.hpp"

using namespace strata;

namespace {

StrataRegion unit_box() {
  StrataRegionSpec s;
  s.radius = 0.5;
  s.cap_height = 1.0;
  s.footprint = Footprint::Square;
  s.interfaces.push_back({0.5, {}});
  return build_strata_region(s);
}

StrataRegion bumpy_disk() {
  StrataRegionSpec s;
  s.radius = 1.0;
  s.cap_height = 1.0;
  s.top_modes = {{1, 0, 0.05}, {0, 1, 0.04}};
  s.interfaces.push_back({0.45, {{1, 0, 0.08}, {0, 1, -0.06}, {1, 1, 0.05}}});
  return build_strata_region(s);
}

ModelOptions no_jump() {
  ModelOptions o;
  o.enforce_jump = false;
  return o;
}

// V grad(l_a) . grad(l_b) = N_a . N_b / (9 V) with N_a the outward area vector
// of the face opposite vertex a.
SparseMatrix laplacian_by_face_normals(const Mesh& m) {
  std::vector<Eigen::Triplet<double>> trip;
  for (std::size_t e = 0; e < m.num_tets(); ++e) {
    const auto& t = m.tets[e];
    std::array<Vec3, 4> N;
    for (int a = 0; a < 4; ++a) {
      const Vec3& p = m.vertices[t[(a + 1) % 4]];
      const Vec3& q = m.vertices[t[(a + 2) % 4]];
      const Vec3& r = m.vertices[t[(a + 3) % 4]];
      Vec3 n = 0.5 * (q - p).cross(r - p);
      if (n.dot(m.vertices[t[a]] - p) > 0.0) n = -n;
      N[a] = n;
    }
    const double V = m.tet_volume(e);
    for (int a = 0; a < 4; ++a) {
      for (int b = 0; b < 4; ++b) trip.emplace_back(t[a], t[b], N[a].dot(N[b]) / (9.0 * V));
    }
  }
  const auto n = static_cast<Eigen::Index>(m.num_vertices());
  SparseMatrix A(n, n);
  A.setFromTriplets(trip.begin(), trip.end());
  return A;
}

double max_abs(const SparseMatrix& A) {
  double s = 0.0;
  for (int k = 0; k < A.outerSize(); ++k) {
    for (SparseMatrix::InnerIterator it(A, k); it; ++it) s = std::max(s, std::abs(it.value()));
  }
  return s;
}

// Exact conormal flux of u = a.x for constant sigma on planar facets.
BoundaryFlux linear_flux(const Mesh& m, const Mat3& sigma, const Vec3& a) {
  BoundaryFlux f = zero_flux(m);
  for (std::size_t i = 0; i < f.density.size(); ++i) f.density[i] = (sigma * a).dot(m.outward_normals[i]);
  return f;
}

// Dipole: +1 on one SIGMA facet group, -1 (area-balanced) on another.
BoundaryFlux dipole(const Mesh& m, const Vec2& p, const Vec2& q, double r) {
  BoundaryFlux f = zero_flux(m);
  double ap = 0.0, aq = 0.0;
  for (std::size_t i : sigma_facets(m)) {
    const Vec3 c = m.facet_centroid(i);
    if ((Vec2(c.x(), c.y()) - p).norm() < r) ap += m.facet_areas[i];
    if ((Vec2(c.x(), c.y()) - q).norm() < r) aq += m.facet_areas[i];
  }
  for (std::size_t i : sigma_facets(m)) {
    const Vec3 c = m.facet_centroid(i);
    if ((Vec2(c.x(), c.y()) - p).norm() < r) f.density[i] += 1.0 / ap;
    if ((Vec2(c.x(), c.y()) - q).norm() < r) f.density[i] -= 1.0 / aq;
  }
  return f;
}

double pairing(const Mesh& m, const BoundaryFlux& psi, const Vector& u) {
  // Facet quadrature of the P1 trace, written independently of load_vector.
  double s = 0.0;
  for (std::size_t f = 0; f < m.boundary_facets.size(); ++f) {
    const auto& t = m.boundary_facets[f];
    s += psi.density[f] * m.facet_areas[f] * (u[t[0]] + u[t[1]] + u[t[2]]) / 3.0;
  }
  return s;
}

double gradient_energy(const Mesh& m, const std::vector<Mat3>& sigma, const Vector& u) {
  double s = 0.0;
  for (std::size_t e = 0; e < m.num_tets(); ++e) {
    const Vec3 g = element_gradient(m, e, u);
    s += m.tet_volume(e) * g.dot(sigma[e] * g);
  }
  return s;
}

void expect_kind(ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

}  // namespace

TEST(Assemble, IsotropicMatchesScalarLaplacian) {
  const StrataRegion r = unit_box();
  const Mesh m = mesh_region(r, {0.25, 0.3, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::identity()}, no_jump());
  const SparseMatrix A = StiffnessSystem::assemble(m, model).matrix();
  const SparseMatrix L = laplacian_by_face_normals(m);
  EXPECT_LE(max_abs(A - L), 1e-12 * max_abs(L));
}

TEST(Assemble, SymmetricWithConstantKernel) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.25, 0.6, {}});
  const StrataModel model(r, {AnisoTensor({1.0, 0.1, 0.05, 1.3, -0.08, 0.8}), AnisoTensor({3, -0.3, 0.2, 2.2, 0.15, 4})});
  const SparseMatrix A = StiffnessSystem::assemble(m, model).matrix();
  const SparseMatrix At = A.transpose();
  EXPECT_LE(max_abs(A - At), 1e-15 * max_abs(A));
  const Vector ones = Vector::Ones(A.rows());
  EXPECT_LE((A * ones).cwiseAbs().maxCoeff(), 1e-12 * max_abs(A));
}

TEST(Assemble, LinearInTensorAndAdditiveOverRegions) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.25, 0.6, {}});
  const AnisoTensor s1({1.0, 0.1, 0.05, 1.3, -0.08, 0.8}), s2({3, -0.3, 0.2, 2.2, 0.15, 4});
  const StrataModel model(r, {s1, s2});
  const StrataModel scaled(r, {s1.scaled(7.0), s2.scaled(7.0)});
  const SparseMatrix A = StiffnessSystem::assemble(m, model).matrix();
  EXPECT_LE(max_abs(StiffnessSystem::assemble(m, scaled).matrix() - 7.0 * A), 1e-12 * 7.0 * max_abs(A));

  std::vector<Mat3> only1 = model.element_tensors(m), only2 = only1;
  for (std::size_t e = 0; e < m.num_tets(); ++e) (m.region_tags[e] == 1 ? only2 : only1)[e].setZero();
  const SparseMatrix sum = assemble_matrix(m, only1) + assemble_matrix(m, only2);
  EXPECT_LE(max_abs(A - sum), 1e-12 * max_abs(A));
}

TEST(Assemble, ThreadCountDoesNotChangeResult) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.125, 0.6, {}});
  const StrataModel model(r, {AnisoTensor::diagonal(1, 2, 3), AnisoTensor::identity()});
  const SparseMatrix a = assemble_matrix(m, model.element_tensors(m), 1);
  const SparseMatrix b = assemble_matrix(m, model.element_tensors(m), 4);
  ASSERT_EQ(a.nonZeros(), b.nonZeros());
  EXPECT_EQ(max_abs(a - b), 0.0);
}

TEST(Assemble, TagOutOfRange) {
  const StrataRegion r = unit_box();
  Mesh m = mesh_region(r, {0.25, 0.3, {}});
  m.region_tags[0] = 3;
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::diagonal(2, 2, 2)});
  expect_kind(ErrorKind::TagOutOfRange, [&] { StiffnessSystem::assemble(m, model); });
}

TEST(Solve, ZeroFluxGivesZero) {
  const StrataRegion r = unit_box();
  const Mesh m = mesh_region(r, {0.25, 0.3, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::diagonal(2, 2, 2)});
  const auto sys = StiffnessSystem::assemble(m, model);
  EXPECT_EQ(solve_neumann(m, sys, zero_flux(m)).u.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Solve, IncompatibleFluxRejected) {
  const StrataRegion r = unit_box();
  const Mesh m = mesh_region(r, {0.25, 0.3, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::diagonal(2, 2, 2)});
  const auto sys = StiffnessSystem::assemble(m, model);
  BoundaryFlux f = zero_flux(m);
  f.density[0] = 1.0;
  expect_kind(ErrorKind::IncompatibleFlux, [&] { solve_neumann(m, sys, f); });
}

TEST(Solve, ManufacturedLinearSolution) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.2, 0.6, {}});
  const Mat3 sigma = AnisoTensor({2.0, 0.3, -0.2, 1.4, 0.25, 0.9}).matrix();
  ModelOptions o = no_jump();
  const AnisoTensor s = AnisoTensor::from_matrix(sigma);
  const StrataModel model(r, {s, s}, o);
  const auto sys = StiffnessSystem::assemble(m, model);
  const Vec3 a(0.7, -1.1, 0.4);
  const NeumannSolution sol = solve_neumann(m, sys, linear_flux(m, sigma, a));
  const Vector mass = boundary_mass(m);
  Vector exact(static_cast<Eigen::Index>(m.num_vertices()));
  for (std::size_t v = 0; v < m.num_vertices(); ++v) exact[v] = a.dot(m.vertices[v]);
  exact.array() -= mass.dot(exact) / mass.sum();
  EXPECT_LE((sol.u - exact).cwiseAbs().maxCoeff(), 1e-10 * exact.cwiseAbs().maxCoeff());
  EXPECT_LE(std::abs(mass.dot(sol.u)), 1e-12 * mass.cwiseAbs().dot(sol.u.cwiseAbs()));
  EXPECT_LE(sol.relative_residual, 1e-10);
}

TEST(Solve, LinearityReciprocityAndEnergy) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.2, 0.6, {}});
  const StrataModel model(r, {AnisoTensor({1.0, 0.1, 0.05, 1.3, -0.08, 0.8}), AnisoTensor({3, -0.3, 0.2, 2.2, 0.15, 4})});
  const auto sys = StiffnessSystem::assemble(m, model);
  const BoundaryFlux p1 = dipole(m, Vec2(-0.3, 0.0), Vec2(0.3, 0.1), 0.2);
  const BoundaryFlux p2 = dipole(m, Vec2(0.0, -0.35), Vec2(0.05, 0.35), 0.2);
  const Vector u1 = solve_neumann(m, sys, p1).u, u2 = solve_neumann(m, sys, p2).u;

  BoundaryFlux twice = p1;
  for (double& d : twice.density) d *= 2.0;
  EXPECT_LE((solve_neumann(m, sys, twice).u - 2.0 * u1).norm(), 1e-10 * 2.0 * u1.norm());

  const double a = pairing(m, p1, u2), b = pairing(m, p2, u1);
  EXPECT_LE(std::abs(a - b), 1e-10 * std::max(std::abs(a), std::abs(b)));

  const double e = energy(sys, u1);
  EXPECT_GT(e, 0.0);
  EXPECT_LE(std::abs(e - pairing(m, p1, u1)), 1e-10 * e);
  EXPECT_LE(std::abs(e - gradient_energy(m, model.element_tensors(m), u1)), 1e-10 * e);
}

TEST(Energy, ConstantAndLinearFields) {
  const StrataRegion r = unit_box();
  const Mesh m = mesh_region(r, {0.25, 0.3, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::identity()}, no_jump());
  const auto sys = StiffnessSystem::assemble(m, model);
  const auto n = static_cast<Eigen::Index>(m.num_vertices());
  EXPECT_LE(std::abs(energy(sys, Vector::Constant(n, 3.7))), 1e-12);
  const Vec3 a(1.0, -2.0, 0.5);
  Vector u(n);
  for (Eigen::Index v = 0; v < n; ++v) u[v] = a.dot(m.vertices[v]);
  EXPECT_NEAR(energy(sys, u), a.squaredNorm(), 1e-12 * a.squaredNorm());
}

TEST(Trace, FacetAverages) {
  const StrataRegion r = unit_box();
  const Mesh m = mesh_region(r, {0.25, 0.3, {}});
  Vector u(static_cast<Eigen::Index>(m.num_vertices()));
  for (std::size_t v = 0; v < m.num_vertices(); ++v) u[v] = m.vertices[v].x() + 2.0 * m.vertices[v].y();
  const auto sig = sigma_facets(m);
  const auto tr = boundary_trace(m, u);
  ASSERT_EQ(tr.size(), sig.size());
  for (std::size_t i = 0; i < sig.size(); ++i) {
    const Vec3 c = m.facet_centroid(sig[i]);
    EXPECT_NEAR(tr[i], c.x() + 2.0 * c.y(), 1e-15);
  }
}

TEST(Solve, ConjugateGradientPathAgreesWithDirect) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.2, 0.6, {}});
  const StrataModel model(r, {AnisoTensor({1.0, 0.1, 0.05, 1.3, -0.08, 0.8}), AnisoTensor({3, -0.3, 0.2, 2.2, 0.15, 4})});
  SolverOptions iterative;
  iterative.direct_limit = 0;
  const auto direct = StiffnessSystem::assemble(m, model);
  const auto cg = StiffnessSystem::assemble(m, model, iterative);
  ASSERT_TRUE(direct.uses_direct_solver());
  ASSERT_FALSE(cg.uses_direct_solver());
  const BoundaryFlux p = dipole(m, Vec2(-0.3, 0.0), Vec2(0.3, 0.1), 0.2);
  const Vector a = solve_neumann(m, direct, p).u, b = solve_neumann(m, cg, p).u;
  EXPECT_LE((a - b).norm(), 1e-9 * a.norm());
}

TEST(Solve, MeshMismatch) {
  const StrataRegion r = unit_box();
  const Mesh m1 = mesh_region(r, {0.25, 0.3, {}});
  const Mesh m2 = mesh_region(r, {0.125, 0.3, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::diagonal(2, 2, 2)});
  const auto sys = StiffnessSystem::assemble(m1, model);
  expect_kind(ErrorKind::MeshMismatch, [&] { solve_neumann(m2, sys, zero_flux(m2)); });
}

TEST(KernelProbe, ZeroFluxAndZeroMean) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.1, 0.6, {}});
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::diagonal(2, 2, 3)});
  const auto sys = StiffnessSystem::assemble(m, model);
  const BoundaryFlux f = kernel_probe_flux(m, Vec2(0.1, 0.0), 0.25);
  double abs_total = 0.0;
  for (std::size_t i = 0; i < f.density.size(); ++i) abs_total += std::abs(f.density[i]) * m.facet_areas[i];
  EXPECT_LE(std::abs(total_flux(m, f)), 1e-12 * abs_total);
  const Vector u = neumann_kernel_probe(m, sys, Vec2(0.1, 0.0), 0.25);
  const Vector mass = boundary_mass(m);
  EXPECT_LE(std::abs(mass.dot(u)), 1e-12 * mass.dot(u.cwiseAbs()));
}

TEST(KernelProbe, SourceOffPatch) {
  const StrataRegion r = bumpy_disk();
  const Mesh m = mesh_region(r, {0.1, 0.4, {}});
  expect_kind(ErrorKind::SourceOffPatch, [&] { kernel_probe_flux(m, Vec2(0.3, 0.0), 0.2); });
  expect_kind(ErrorKind::SourceOffPatch, [&] { kernel_probe_flux(m, Vec2(0.0, 0.0), 0.04); });
}

// Nested meshes h, h/2, h/4: differences at the coarse vertices far from the
// source shrink at least linearly.
TEST(KernelProbe, SelfConvergesAwayFromSource) {
  StrataRegionSpec s;
  s.radius = 1.0;
  s.cap_height = 0.6;
  s.interfaces.push_back({0.3, {}});
  const StrataRegion r = build_strata_region(s);
  const StrataModel model(r, {AnisoTensor::identity(), AnisoTensor::identity()}, no_jump());
  const double eps = 0.25;
  const Vec2 y(0.0, 0.0);
  std::vector<Mesh> meshes;
  std::vector<Vector> fields;
  for (int level = 0; level < 3; ++level) {
    const int sub = 3 << level;
    meshes.push_back(mesh_region(r, {0.125 / (1 << level), 0.6, {sub, sub}}));
    const auto sys = StiffnessSystem::assemble(meshes.back(), model);
    fields.push_back(neumann_kernel_probe(meshes.back(), sys, y, eps));
  }
  auto key = [](const Vec3& p) {
    return std::array<long, 3>{std::lround(p.x() * 1e9), std::lround(p.y() * 1e9), std::lround(p.z() * 1e9)};
  };
  std::vector<std::map<std::array<long, 3>, double>> at(3);
  for (int l = 0; l < 3; ++l) {
    for (std::size_t v = 0; v < meshes[l].num_vertices(); ++v) at[l][key(meshes[l].vertices[v])] = fields[l][v];
  }
  double d01 = 0.0, d12 = 0.0;
  int used = 0;
  for (const Vec3& p : meshes[0].vertices) {
    if ((p - Vec3(y.x(), y.y(), 0.0)).norm() <= 4.0 * eps) continue;
    const auto k = key(p);
    ASSERT_TRUE(at[1].count(k) && at[2].count(k));
    d01 = std::max(d01, std::abs(at[0][k] - at[1][k]));
    d12 = std::max(d12, std::abs(at[1][k] - at[2][k]));
    ++used;
  }
  ASSERT_GT(used, 20);
  EXPECT_GT(d01, 0.0);
  EXPECT_LE(d12 / d01, 0.6) << "d01 = " << d01 << ", d12 = " << d12;
}
