#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include <Eigen/Geometry>

#include "strata/error.hpp"
#include "strata/identify.hpp"

using namespace strata;

namespace {

Mat3 random_spd(std::mt19937_64& rng, double lo = 0.2, double hi = 5.0) {
  std::uniform_real_distribution<double> u(-1.0, 1.0), ev(lo, hi);
  const Eigen::Quaterniond q = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
  const Mat3 Q = q.toRotationMatrix();
  return Q * Eigen::Vector3d(ev(rng), ev(rng), ev(rng)).asDiagonal() * Q.transpose();
}

Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return Vec3(n(rng), n(rng), n(rng)).normalized();
}

// Cofactor matrix; equals det(s) s^{-1} for SPD s.
Mat3 adjugate(const Mat3& a) {
  Mat3 c;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      const int i1 = (i + 1) % 3, i2 = (i + 2) % 3, j1 = (j + 1) % 3, j2 = (j + 2) % 3;
      c(j, i) = a(i1, j1) * a(i2, j2) - a(i1, j2) * a(i2, j1);
    }
  }
  return c;
}

TangentialSample sample_of(const Mat3& g, const Vec3& normal) {
  return {Vec3::Zero(), normal, tangential_submatrix(g, normal).block};
}

// Three normals with pairwise angles of at least 20 degrees.
std::vector<Vec3> spread_normals(std::mt19937_64& rng) {
  for (;;) {
    std::vector<Vec3> n = {random_unit(rng), random_unit(rng), random_unit(rng)};
    bool ok = true;
    for (int a = 0; a < 3; ++a)
      for (int b = a + 1; b < 3; ++b) ok = ok && angle_between_deg(n[a], n[b]) > 20.0 &&
                                           angle_between_deg(n[a], -n[b]) > 20.0;
    // Keep away from the frame singularity at -e3.
    for (const auto& v : n) ok = ok && v.z() > -0.9;
    if (ok) return n;
  }
}

void expect_kind(ErrorKind kind, const std::function<void()>& f) {
  try {
    f();
    ADD_FAILURE() << "expected " << to_string(kind);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), kind) << e.what();
  }
}

TEST(TangentRecovery, IdentityMetric) {
  std::mt19937_64 rng(1);
  std::vector<TangentialSample> s;
  for (const auto& n : spread_normals(rng)) s.push_back(sample_of(Mat3::Identity(), n));
  const TensorRecovery r = recover_tensor_from_tangential(s);
  EXPECT_LE((r.sigma.matrix() - Mat3::Identity()).norm(), 1e-12);
  EXPECT_EQ(r.rank, 6);
}

TEST(TangentRecovery, RandomRoundTrip) {
  std::mt19937_64 rng(2);
  double worst = 0.0;
  for (int c = 0; c < 100; ++c) {
    const Mat3 sigma = random_spd(rng);
    const Mat3 g = metric_of(sigma);
    std::vector<TangentialSample> s;
    for (const auto& n : spread_normals(rng)) s.push_back(sample_of(g, n));
    const TensorRecovery r = recover_tensor_from_tangential(s);
    worst = std::max(worst, (r.sigma.matrix() - sigma).norm() / sigma.norm());
    EXPECT_LE((r.metric - g).norm(), 1e-9 * g.norm());
  }
  EXPECT_LE(worst, 1e-9);
}

TEST(TangentRecovery, BlocksFromCofactorOracle) {
  // Blocks built from the cofactor matrix and the frame vectors directly.
  std::mt19937_64 rng(3);
  for (int c = 0; c < 20; ++c) {
    const Mat3 sigma = random_spd(rng);
    const Mat3 g = adjugate(sigma);
    std::vector<TangentialSample> s;
    for (const auto& n : spread_normals(rng)) {
      const TangentFrame f = tangent_frame(n);
      Mat2 b;
      b << f.t1.dot(g * f.t1), f.t1.dot(g * f.t2), f.t2.dot(g * f.t1), f.t2.dot(g * f.t2);
      b(1, 0) = b(0, 1);
      s.push_back({Vec3::Zero(), n, b});
    }
    EXPECT_LE((recover_tensor_from_tangential(s).sigma.matrix() - sigma).norm(), 1e-9 * sigma.norm());
  }
}

TEST(TangentRecovery, ManyNormalsOverdetermined) {
  std::mt19937_64 rng(4);
  const Mat3 sigma = random_spd(rng);
  std::vector<TangentialSample> s;
  for (int i = 0; i < 8; ++i) {
    Vec3 n = random_unit(rng);
    if (n.z() < 0) n = -n;
    s.push_back(sample_of(metric_of(sigma), n));
  }
  const TensorRecovery r = recover_tensor_from_tangential(s);
  EXPECT_LE((r.sigma.matrix() - sigma).norm(), 1e-10 * sigma.norm());
  EXPECT_LE(r.residual, 1e-12);
}

TEST(TangentRecovery, SingleNormalIsRankDeficient) {
  std::mt19937_64 rng(5);
  const Mat3 g = metric_of(random_spd(rng));
  const Vec3 n = Vec3(0.2, -0.1, 1.0).normalized();
  expect_kind(ErrorKind::InsufficientNormals,
              [&] { recover_tensor_from_tangential({sample_of(g, n), sample_of(g, n), sample_of(g, n)}); });
}

TEST(TangentRecovery, TwoNormalsGiveRankFive) {
  // Both planes contain n1 x n2, so g(a, b) with a, b orthogonal to that line
  // and lying in different planes is never observed.
  std::mt19937_64 rng(6);
  const Mat3 g = metric_of(random_spd(rng));
  const auto n = spread_normals(rng);
  try {
    recover_tensor_from_tangential({sample_of(g, n[0]), sample_of(g, n[1])});
    ADD_FAILURE();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::InsufficientNormals);
    EXPECT_NE(std::string(e.what()).find("rank 5"), std::string::npos) << e.what();
  }
}

TEST(TangentRecovery, MixedTensorsAreInconsistent) {
  std::mt19937_64 rng(7);
  const Mat3 g1 = metric_of(random_spd(rng)), g2 = metric_of(random_spd(rng));
  const auto n = spread_normals(rng);
  const Vec3 n4 = (n[0] + n[1] + n[2]).normalized();
  expect_kind(ErrorKind::NotConsistent, [&] {
    recover_tensor_from_tangential({sample_of(g1, n[0]), sample_of(g1, n[1]), sample_of(g1, n[2]), sample_of(g2, n4)});
  });
}

TEST(TangentRecovery, NegativeMetricRejected) {
  std::mt19937_64 rng(8);
  std::vector<TangentialSample> s;
  for (const auto& n : spread_normals(rng)) s.push_back(sample_of(-Mat3::Identity(), n));
  expect_kind(ErrorKind::NotSPD, [&] { recover_tensor_from_tangential(s); });
}

// Small homogeneous problem with a non-flat measurement surface.
class TopFitTest : public ::testing::Test {
 protected:
  static StrataRegion make_region() {
    StrataRegionSpec s;
    s.top_modes = {{1, 0, 0.06}, {0, 1, 0.05}};
    s.interfaces.push_back({0.55, {}});
    return build_strata_region(s);
  }
  TopFitTest()
      : region(make_region()), mesh(mesh_region(region, {0.25, 0.8, {2, 2}})), basis(make_dipole_basis(mesh, {1, 6})) {}

  NDMatrix data(const AnisoTensor& s) const {
    ModelOptions o;
    o.enforce_jump = false;
    return build_nd(mesh, StrataModel(region, {s, s}, o), basis);
  }

  StrataRegion region;
  Mesh mesh;
  FluxBasis basis;
};

const AnisoTensor kStar({1.4, 0.2, -0.1, 0.9, 0.15, 2.1});

TEST_F(TopFitTest, HomogeneousRoundTrip) {
  const TopFit fit = fit_top_tensor(data(kStar), mesh, basis);
  EXPECT_LE(frobenius_distance(fit.sigma, kStar) / kStar.matrix().norm(), 1e-6);
  EXPECT_EQ(fit.jacobian_rank, 6);
  for (std::size_t i = 1; i < fit.history.size(); ++i) EXPECT_LE(fit.history[i], fit.history[i - 1]);
}

TEST_F(TopFitTest, ForwardDifferenceJacobianRoundTrip) {
  FitOptions o;
  o.tensor_jacobian = TensorJacobian::ForwardDifference;
  const TopFit fit = fit_top_tensor(data(kStar), mesh, basis, o);
  EXPECT_LE(frobenius_distance(fit.sigma, kStar) / kStar.matrix().norm(), 1e-6);
}

TEST_F(TopFitTest, ScalingConsistency) {
  for (double c : {0.5, 4.0}) {
    const TopFit fit = fit_top_tensor(data(kStar.scaled(c)), mesh, basis);
    EXPECT_LE(frobenius_distance(fit.sigma, kStar.scaled(c)) / (c * kStar.matrix().norm()), 1e-6) << c;
  }
}

TEST_F(TopFitTest, SinglePatternIsNonIdentifiable) {
  const FluxBasis one(mesh, {basis[0]});
  ModelOptions o;
  o.enforce_jump = false;
  const NDMatrix nd = build_nd(mesh, StrataModel(region, {kStar, kStar}, o), one);
  expect_kind(ErrorKind::NonIdentifiable, [&] { fit_top_tensor(nd, mesh, one); });
}

TEST_F(TopFitTest, BasisFromOtherMeshRejected) {
  const Mesh other = mesh_region(region, {0.25, 0.8, {3, 3}});
  expect_kind(ErrorKind::MeshMismatch, [&] { fit_top_tensor(data(kStar), other, basis); });
}

InversionSetup small_setup() {
  InversionSetup s;
  s.top_modes = {{1, 0, 0.06}, {0, 1, 0.05}};
  s.h = 0.25;
  s.sublayers_per_layer = 2;
  s.basis = {1, 6};
  return s;
}

TEST(JacobianCheck, CentralDifferencesAgree) {
  const InversionSetup setup = small_setup();
  const Interface phi(0.5, {{1, 0, 0.07}, {0, 1, -0.04}, {1, 1, 0.03}}, 1.0);
  const StrataModel model(setup.region({phi}), {kStar, AnisoTensor({3.0, -0.3, 0.2, 2.2, 0.15, 4.0})});
  const Mesh mesh = setup.mesh(model.region());
  const NDMatrix nd = build_nd(mesh, model, make_dipole_basis(mesh, setup.basis));
  // Evaluate away from the data so the residual is not zero.
  const StrataModel probe(setup.region({phi.with_coefficients({0.47, 0.05, -0.02, 0.0})}),
                          {kStar.scaled(1.2), AnisoTensor({2.5, -0.2, 0.1, 2.0, 0.1, 3.5})});
  const JacobianCheck jc = jacobian_check(nd, setup, probe, 5, 11);
  ASSERT_EQ(jc.relative_errors.size(), 5u);
  EXPECT_LE(jc.max_error, 1e-4);
}

// Flat top, flat placeholder interface, one tensor everywhere.
class KernelDemoTest : public ::testing::Test {
 protected:
  static StrataRegion make_region() {
    StrataRegionSpec s;
    s.cap_height = 0.6;
    s.interfaces.push_back({0.36, {}});
    return build_strata_region(s);
  }
  KernelDemoTest() : region(make_region()), mesh(mesh_region(region, {0.05, 0.9, {}})) {}

  std::vector<KernelFitRow> run(const AnisoTensor& s, std::vector<double> radii = {0.2, 0.1}) const {
    ModelOptions o;
    o.enforce_jump = false;
    return kernel_asymptotics_demo(mesh, StrataModel(region, {s, s}, o), Vec2::Zero(), radii);
  }

  StrataRegion region;
  Mesh mesh;
};

TEST_F(KernelDemoTest, IsotropicGivesIsotropicForm) {
  const auto rows = run(AnisoTensor::identity());
  EXPECT_LE(rows.back().condition, 1.2);
  EXPECT_NEAR(rows.back().form.determinant(), 1.0, 1e-12);
}

TEST_F(KernelDemoTest, VerticalAxisTensorIsTangentiallyIsotropic) {
  EXPECT_LE(run(AnisoTensor::diagonal(2.0, 2.0, 0.5)).back().condition, 1.2);
}

TEST_F(KernelDemoTest, AxisFollowsTangentialMetric) {
  const auto rows = run(AnisoTensor({2.0, 0.6, 0.3, 1.0, -0.2, 1.5}));
  EXPECT_GT(rows.back().expected_condition, 2.0);
  EXPECT_LE(rows.back().axis_error_deg, 10.0);
}

TEST_F(KernelDemoTest, SourceBeyondPatchRejected) {
  expect_kind(ErrorKind::SourceOffPatch, [&] {
    ModelOptions o;
    o.enforce_jump = false;
    const AnisoTensor s = AnisoTensor::identity();
    kernel_asymptotics_demo(mesh, StrataModel(region, {s, s}, o), Vec2(0.8, 0.0), {0.2});
  });
}

}  // namespace
