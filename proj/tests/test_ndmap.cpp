#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include <Eigen/Geometry>

#include "strata/error.hpp"
#include "strata/ndmap.hpp"

using namespace strata;

namespace {

const AnisoTensor kTop({1.0, 0.1, 0.05, 1.3, -0.08, 0.8});
const AnisoTensor kBottom({3.0, -0.3, 0.2, 2.2, 0.15, 4.0});

StrataRegionSpec bumpy_spec() {
  StrataRegionSpec s;
  s.radius = 1.0;
  s.cap_height = 1.0;
  s.top_modes = {{1, 0, 0.05}, {0, 1, 0.04}};
  s.interfaces.push_back({0.45, {{1, 0, 0.08}, {0, 1, -0.06}, {1, 1, 0.05}}});
  return s;
}

AnisoTensor random_tensor(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), ev(0.3, 4.0);
  const Eigen::Quaterniond q = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
  const Mat3 Q = q.toRotationMatrix();
  return AnisoTensor::from_matrix(Q * Eigen::Vector3d(ev(rng), ev(rng), ev(rng)).asDiagonal() * Q.transpose());
}

ModelOptions no_jump() {
  ModelOptions o;
  o.enforce_jump = false;
  return o;
}

void expect_kind(ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

class NDMapTest : public ::testing::Test {
 protected:
  NDMapTest()
      : region(build_strata_region(bumpy_spec())),
        mesh(mesh_region(region, {0.125, 0.8, {4, 4}})),
        basis(make_dipole_basis(mesh)),
        model(region, {kTop, kBottom}) {}

  StrataRegion region;
  Mesh mesh;
  FluxBasis basis;
  StrataModel model;
};

}  // namespace

TEST_F(NDMapTest, DipoleBasisIsZeroMeanAndIndependent) {
  EXPECT_EQ(basis.size(), 30u);
  for (const auto& p : basis.patterns()) {
    double abs_total = 0.0;
    for (std::size_t f = 0; f < p.density.size(); ++f) {
      abs_total += std::abs(p.density[f]) * mesh.facet_areas[f];
      if (p.density[f] != 0.0) EXPECT_EQ(mesh.facet_tags[f], FacetTag::Sigma);
    }
    EXPECT_LE(std::abs(total_flux(mesh, p)), 1e-12 * abs_total);
  }
  EXPECT_LT(basis.gram_condition(), 1e8);
}

TEST_F(NDMapTest, DuplicatePatternIsLinearDependence) {
  expect_kind(ErrorKind::LinearDependence, [&] { basis.extended(mesh, {basis[3]}); });
}

TEST_F(NDMapTest, PatternOffPatchRejected) {
  BoundaryFlux p = zero_flux(mesh);
  std::size_t other = 0;
  while (mesh.facet_tags[other] == FacetTag::Sigma) ++other;
  const std::size_t sig = sigma_facets(mesh).front();
  p.density[other] = 1.0 / mesh.facet_areas[other];
  p.density[sig] = -1.0 / mesh.facet_areas[sig];
  expect_kind(ErrorKind::SourceOffPatch, [&] { FluxBasis(mesh, {p}); });
}

TEST(NDMap, TwoPatternBoxIsSymmetricPositiveDefinite) {
  StrataRegionSpec s;
  s.radius = 0.5;
  s.cap_height = 1.0;
  s.footprint = Footprint::Square;
  s.interfaces.push_back({0.5, {}});
  const StrataRegion r = build_strata_region(s);
  const Mesh m = mesh_region(r, {0.1, 0.4, {}});
  const FluxBasis full = make_dipole_basis(m, {1, 4, 1e8});
  const FluxBasis two(m, {full[0], full[2]});
  const StrataModel iso(r, {AnisoTensor::identity(), AnisoTensor::identity()}, no_jump());
  const NDMatrix nd = build_nd(m, iso, two);
  ASSERT_EQ(nd.size(), 2u);
  EXPECT_LE(nd.asymmetry(), 1e-10);
  EXPECT_GT(nd.min_eigenvalue(), 0.0);
}

TEST_F(NDMapTest, SelfAdjointAndPositiveDefinite) {
  const NDMatrix nd = build_nd(mesh, model, basis);
  EXPECT_LE(nd.asymmetry(), 1e-10);
  EXPECT_GT(nd.min_eigenvalue(), 0.0);
  EXPECT_EQ(nd.mesh_id, mesh.id);
  EXPECT_EQ(nd.model_id, model.id());
  EXPECT_EQ(nd.basis_id, basis.id());
}

TEST_F(NDMapTest, ScalingConductivityScalesInverse) {
  const NDMatrix nd = build_nd(mesh, model, basis);
  for (double c : {0.25, 3.0}) {
    const StrataModel scaled(region, {kTop.scaled(c), kBottom.scaled(c)});
    const NDMatrix ndc = build_nd(mesh, scaled, basis);
    EXPECT_LE((ndc.N - nd.N / c).norm(), 1e-10 * nd.N.norm() / c);
  }
}

TEST_F(NDMapTest, ThreadsGiveIdenticalMatrix) {
  NDOptions par;
  par.threads = 4;
  EXPECT_EQ(build_nd(mesh, model, basis).N, build_nd(mesh, model, basis, par).N);
}

TEST_F(NDMapTest, ExtendingBasisKeepsPrincipalSubmatrix) {
  const FluxBasis head(mesh, std::vector<BoundaryFlux>(basis.patterns().begin(), basis.patterns().begin() + 12));
  const FluxBasis grown =
      head.extended(mesh, std::vector<BoundaryFlux>(basis.patterns().begin() + 12, basis.patterns().end()));
  const NDMatrix small = build_nd(mesh, model, head), big = build_nd(mesh, model, grown);
  EXPECT_LE((big.N.topLeftCorner(12, 12) - small.N).cwiseAbs().maxCoeff(), 1e-12 * small.N.cwiseAbs().maxCoeff());
}

TEST_F(NDMapTest, LocalPairingEqualsGlobalPairing) {
  const auto sys = StiffnessSystem::assemble(mesh, model);
  const auto fields = solve_basis(mesh, sys, basis);
  const NDMatrix nd = nd_from_fields(basis, fields, mesh.id, model.id());
  for (std::size_t i = 0; i < basis.size(); i += 7) {
    for (std::size_t j = 0; j < basis.size(); j += 5) {
      const double local = sigma_pairing(mesh, basis[i], fields[j]);
      EXPECT_NEAR(local, nd.N(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)),
                  1e-12 * nd.N.cwiseAbs().maxCoeff());
    }
  }
}

TEST_F(NDMapTest, AlessandriniIdenticalModels) {
  const AlessandriniGap g = alessandrini_gap(mesh, model, model, basis);
  EXPECT_LE(g.lhs.cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LE(g.rhs.cwiseAbs().maxCoeff(), 1e-10);
}

TEST_F(NDMapTest, AlessandriniScaledModelMatchesCrossEnergy) {
  const double c = 2.5;
  const StrataModel scaled(region, {kTop.scaled(c), kBottom.scaled(c)});
  const AlessandriniGap g = alessandrini_gap(mesh, model, scaled, basis);
  // u2 = u1 / c, so rhs = (1 - c) / c * E with E_ij = u1_i^T A1 u1_j.
  const auto sys = StiffnessSystem::assemble(mesh, model);
  const auto u = solve_basis(mesh, sys, basis);
  const auto m = static_cast<Eigen::Index>(basis.size());
  Eigen::MatrixXd E(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const Vector Au = sys.matrix() * u[static_cast<std::size_t>(i)];
    for (Eigen::Index j = 0; j < m; ++j) E(i, j) = Au.dot(u[static_cast<std::size_t>(j)]);
  }
  const Eigen::MatrixXd oracle = (1.0 - c) / c * E;
  EXPECT_LE((g.rhs - oracle).norm(), 1e-9 * oracle.norm());
  EXPECT_LE((g.lhs - oracle).norm(), 1e-9 * oracle.norm());
  EXPECT_LE(g.residual, 1e-9);
}

TEST_F(NDMapTest, AlessandriniRandomLayeredPairs) {
  std::mt19937_64 rng(2024);
  for (int c = 0; c < 20; ++c) {
    const StrataModel a(region, {random_tensor(rng), random_tensor(rng)});
    const StrataModel b(region, {random_tensor(rng), random_tensor(rng)});
    EXPECT_LE(alessandrini_gap(mesh, a, b, basis).residual, 1e-9) << "pair " << c;
  }
}

TEST_F(NDMapTest, AlessandriniTwoLayerDifferingInBottomOnly) {
  const StrataModel other(region, {kTop, AnisoTensor::diagonal(1.5, 2.5, 0.7)});
  EXPECT_LE(alessandrini_gap(mesh, model, other, basis).residual, 1e-9);
}

TEST_F(NDMapTest, DistinguishabilityOfIdenticalModelsIsZero) {
  const NDMatrix a = build_nd(mesh, model, basis), b = build_nd(mesh, model, basis);
  EXPECT_LE(distinguishability(a, b), 1e-10);
}

TEST_F(NDMapTest, BasisMismatchRejected) {
  const NDMatrix a = build_nd(mesh, model, basis);
  const FluxBasis fewer(mesh, std::vector<BoundaryFlux>(basis.patterns().begin(), basis.patterns().begin() + 10));
  const NDMatrix b = build_nd(mesh, model, fewer);
  expect_kind(ErrorKind::BasisMismatch, [&] { distinguishability(a, b); });
}

// Splitting the bottom layer at phi_2 = (phi_1 + M) / 2 with sigma_3 = sigma_2.
// The split mesh uses half the sublayers in each half, so both meshes share
// their vertices and only the region tags differ.
TEST(Invisible, SplitLayerWithEqualTensorsIsInvisible) {
  const StrataRegionSpec s = bumpy_spec();
  StrataRegionSpec split = s;
  StrataRegionSpec::InterfaceSpec mid{0.5 * (s.interfaces[0].offset + s.cap_height), s.interfaces[0].modes};
  for (auto& m : mid.modes) m.amplitude *= 0.5;
  split.interfaces.push_back(mid);
  const StrataRegion r1 = build_strata_region(s), r2 = build_strata_region(split);
  const Mesh m1 = mesh_region(r1, {0.125, 0.8, {4, 6}});
  const Mesh m2 = mesh_region(r2, {0.125, 0.8, {4, 3, 3}});
  ASSERT_EQ(m1.num_vertices(), m2.num_vertices());
  double worst = 0.0;
  for (std::size_t v = 0; v < m1.num_vertices(); ++v) worst = std::max(worst, (m1.vertices[v] - m2.vertices[v]).norm());
  EXPECT_LE(worst, 1e-15);
  const StrataModel merged(r1, {kTop, kBottom});
  const StrataModel splitm(r2, {kTop, kBottom, kBottom}, no_jump());
  EXPECT_FALSE(splitm.satisfies_jump_condition());
  const FluxBasis b1 = make_dipole_basis(m1), b2 = make_dipole_basis(m2);
  ASSERT_EQ(b1.id(), b2.id());
  EXPECT_LE(distinguishability(build_nd(m1, merged, b1), build_nd(m2, splitm, b2)), 1e-10);
}

TEST_F(NDMapTest, BottomTensorChangeIsVisible) {
  // ||sigma_2 - sigma_2'||_F = 1.
  const Mat3 d = Eigen::Vector3d(0.6, 0.0, -0.8).asDiagonal();
  const StrataModel other(region, {kTop, AnisoTensor::from_matrix(kBottom.matrix() + d)});
  ASSERT_NEAR(frobenius_distance(kBottom, other.layer_tensor(2)), 1.0, 1e-14);
  const double dist = distinguishability(build_nd(mesh, model, basis), build_nd(mesh, other, basis));
  EXPECT_GE(dist, 1e3 * 1e-12);
}

TEST_F(NDMapTest, GaugeIdentityHasNoGap) {
  EXPECT_LE(gauge_counterexample_gap(mesh, model, Diffeo::identity(), basis).gap, 1e-10);
}

TEST_F(NDMapTest, GaugeRejectsMapMovingTheBoundary) {
  BumpDisplacement b;
  b.center = Vec3(0.0, 0.0, 0.1);
  b.half_widths = Vec3(0.3, 0.3, 0.3);
  b.amplitude = 0.1;
  expect_kind(ErrorKind::NotBoundaryFixing, [&] { gauge_counterexample_gap(mesh, model, Diffeo::bump(b), basis); });
}

TEST(Gauge, FlatLayersGapShrinksUnderRefinement) {
  StrataRegionSpec s;
  s.radius = 1.0;
  s.cap_height = 1.0;
  s.interfaces.push_back({0.45, {}});
  const StrataRegion r = build_strata_region(s);
  const StrataModel model(r, {kTop, kTop.scaled(10.0)});
  BumpDisplacement b;
  b.center = Vec3(0.45, 0.0, 0.45);
  b.half_widths = Vec3(0.4, 0.5, 0.35);
  b.direction = Vec3::UnitX();
  b.amplitude = 0.12;
  const Diffeo psi = Diffeo::bump(b);
  std::vector<double> gaps;
  for (double h : {0.25, 0.125}) {
    const Mesh m = mesh_region(r, {h, 0.8, {}});
    gaps.push_back(gauge_counterexample_gap(m, model, psi, make_dipole_basis(m, {1, 6, 1e8})).gap);
  }
  EXPECT_GT(gaps[0], 0.0);
  EXPECT_LE(gaps[1] / gaps[0], 0.7);
}

TEST(Gauge, FlatLayerPushforwardKeepsPartition) {
  StrataRegionSpec s;
  s.radius = 1.0;
  s.cap_height = 1.0;
  s.interfaces.push_back({0.45, {}});
  const StrataRegion r = build_strata_region(s);
  BumpDisplacement b;
  b.center = Vec3(0.45, 0.0, 0.45);
  b.half_widths = Vec3(0.4, 0.5, 0.35);
  b.direction = Vec3::UnitX();
  b.amplitude = 0.12;
  const Diffeo psi = Diffeo::bump(b);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (int c = 0; c < 200; ++c) {
    const Vec3 x(0.45 + u(rng), u(rng), 0.45 + u(rng));
    EXPECT_EQ(r.layer_at(psi.apply(x)), r.layer_at(x));
  }
}

TEST_F(NDMapTest, CsvRoundTrip) {
  const NDMatrix nd = build_nd(mesh, model, basis);
  std::stringstream ss;
  write_nd_csv(ss, nd);
  const NDMatrix back = read_nd_csv(ss);
  EXPECT_EQ(back.N, nd.N);
  EXPECT_EQ(back.mesh_id, nd.mesh_id);
  EXPECT_EQ(back.model_id, nd.model_id);
  EXPECT_EQ(back.basis_id, nd.basis_id);
}

TEST(NDCsv, MalformedInput) {
  for (const char* text : {"1,2\n3,4\n", "# ndmap m=2\n1,2\n", "# ndmap m=2\n1,2\n3\n", "# ndmap m=1 x=3\n1\n",
                           "# ndmap m=1\nabc\n"}) {
    std::istringstream in(text);
    expect_kind(ErrorKind::ConfigParse, [&] { read_nd_csv(in); });
  }
}
