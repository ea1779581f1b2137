#include "strata/forward.hpp"

#include <cmath>
#include <sstream>

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/LU>
#include <Eigen/SparseCholesky>

#include "strata/error.hpp"
#include "strata/util.hpp"

namespace strata {

BoundaryFlux zero_flux(const Mesh& mesh) { return {std::vector<double>(mesh.boundary_facets.size(), 0.0)}; }

double total_flux(const Mesh& mesh, const BoundaryFlux& flux) {
  double s = 0.0;
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f) s += flux.density[f] * mesh.facet_areas[f];
  return s;
}

bool is_compatible(const Mesh& mesh, const BoundaryFlux& flux, double tol) {
  double s = 0.0, a = 0.0;
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f) {
    s += flux.density[f] * mesh.facet_areas[f];
    a += std::abs(flux.density[f]) * mesh.facet_areas[f];
  }
  return std::abs(s) <= tol * a;
}

Vector load_vector(const Mesh& mesh, const BoundaryFlux& flux) {
  if (flux.density.size() != mesh.boundary_facets.size()) {
    throw Error(ErrorKind::MeshMismatch, "flux does not match the mesh boundary");
  }
  Vector b = Vector::Zero(static_cast<Eigen::Index>(mesh.num_vertices()));
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f) {
    if (flux.density[f] == 0.0) continue;
    const double w = flux.density[f] * mesh.facet_areas[f] / 3.0;
    for (int v : mesh.boundary_facets[f]) b[v] += w;
  }
  return b;
}

Vector boundary_mass(const Mesh& mesh) {
  Vector m = Vector::Zero(static_cast<Eigen::Index>(mesh.num_vertices()));
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f) {
    for (int v : mesh.boundary_facets[f]) m[v] += mesh.facet_areas[f] / 3.0;
  }
  return m;
}

P1Element p1_element(const Mesh& mesh, std::size_t e) {
  const auto& t = mesh.tets[e];
  const Vec3& x0 = mesh.vertices[t[0]];
  Mat3 J;
  J.col(0) = mesh.vertices[t[1]] - x0;
  J.col(1) = mesh.vertices[t[2]] - x0;
  J.col(2) = mesh.vertices[t[3]] - x0;
  const Mat3 Jinv = J.inverse();
  P1Element el;
  el.volume = J.determinant() / 6.0;
  // Rows of J^{-1} are the gradients of barycentric coordinates 1..3.
  for (int a = 0; a < 3; ++a) el.grads.col(a + 1) = Jinv.row(a).transpose();
  el.grads.col(0) = -(el.grads.col(1) + el.grads.col(2) + el.grads.col(3));
  return el;
}

Vec3 element_gradient(const Mesh& mesh, std::size_t e, const Vector& u) {
  const P1Element el = p1_element(mesh, e);
  Vec3 g = Vec3::Zero();
  for (int a = 0; a < 4; ++a) g += u[mesh.tets[e][a]] * el.grads.col(a);
  return g;
}

SparseMatrix assemble_matrix(const Mesh& mesh, const std::vector<Mat3>& sigma, unsigned threads) {
  if (sigma.size() != mesh.num_tets()) throw Error(ErrorKind::MeshMismatch, "one tensor per element is required");
  const std::size_t ne = mesh.num_tets();
  constexpr std::size_t kChunk = 4096;
  const std::size_t nchunks = (ne + kChunk - 1) / kChunk;
  std::vector<std::vector<Eigen::Triplet<double>>> parts(nchunks);
  parallel_for(nchunks, threads, [&](std::size_t c) {
    auto& trip = parts[c];
    const std::size_t lo = c * kChunk, hi = std::min(ne, lo + kChunk);
    trip.reserve((hi - lo) * 16);
    for (std::size_t e = lo; e < hi; ++e) {
      const P1Element el = p1_element(mesh, e);
      const Eigen::Matrix4d K = el.volume * el.grads.transpose() * sigma[e] * el.grads;
      const auto& t = mesh.tets[e];
      for (int a = 0; a < 4; ++a) {
        for (int b = 0; b < 4; ++b) trip.emplace_back(t[a], t[b], K(a, b));
      }
    }
  });
  std::vector<Eigen::Triplet<double>> all;
  all.reserve(ne * 16);
  for (auto& p : parts) all.insert(all.end(), p.begin(), p.end());
  const auto n = static_cast<Eigen::Index>(mesh.num_vertices());
  SparseMatrix A(n, n);
  A.setFromTriplets(all.begin(), all.end());
  return A;
}

// Constant functions span ker A. Fixing the last unknown leaves an SPD block;
// its solution satisfies every row of A u = b for compatible b, and the shift
// by a constant then enforces m^T u = 0. This is the exact solution of the
// bordered system with mu = 1^T b / 1^T m.
struct StiffnessSystem::Direct {
  Eigen::SimplicialLDLT<SparseMatrix, Eigen::Lower, Eigen::AMDOrdering<int>> ldlt;
};

StiffnessSystem StiffnessSystem::assemble(const Mesh& mesh, const StrataModel& model, const SolverOptions& options,
                                          unsigned threads) {
  return assemble(mesh, model.element_tensors(mesh), options, threads);
}

StiffnessSystem StiffnessSystem::assemble(const Mesh& mesh, const std::vector<Mat3>& element_tensors,
                                          const SolverOptions& options, unsigned threads) {
  StiffnessSystem s;
  s.A_ = assemble_matrix(mesh, element_tensors, threads);
  s.m_ = strata::boundary_mass(mesh);
  s.mesh_id_ = mesh.id;
  s.options_ = options;
  const Eigen::Index n = s.A_.rows();
  if (static_cast<std::size_t>(n) < options.direct_limit) {
    auto d = std::make_shared<Direct>();
    const SparseMatrix reduced = s.A_.topLeftCorner(n - 1, n - 1);
    d->ldlt.compute(reduced);
    if (d->ldlt.info() != Eigen::Success) {
      throw Error(ErrorKind::SolverDiverged, "sparse factorization of the stiffness matrix failed");
    }
    s.direct_ = std::move(d);
  }
  return s;
}

NeumannSolution StiffnessSystem::solve_load(const Vector& b) const {
  const Eigen::Index n = A_.rows();
  if (b.size() != n) throw Error(ErrorKind::MeshMismatch, "load vector size differs from system size");
  const double total = b.sum();
  const double scale = b.cwiseAbs().sum();
  if (std::abs(total) > 1e-12 * scale) {
    std::ostringstream os;
    os << "net boundary current " << total << " is not zero";
    throw Error(ErrorKind::IncompatibleFlux, os.str());
  }
  NeumannSolution sol;
  if (scale == 0.0) {
    sol.u = Vector::Zero(n);
    return sol;
  }
  if (direct_) {
    sol.u.resize(n);
    sol.u.head(n - 1) = direct_->ldlt.solve(b.head(n - 1));
    sol.u[n - 1] = 0.0;
  } else {
    Eigen::ConjugateGradient<SparseMatrix, Eigen::Lower | Eigen::Upper, Eigen::DiagonalPreconditioner<double>> cg;
    cg.setTolerance(options_.cg_tolerance);
    cg.setMaxIterations(options_.cg_max_iterations);
    cg.compute(A_);
    sol.u = cg.solve(b);
    if (cg.info() != Eigen::Success) throw Error(ErrorKind::SolverDiverged, "conjugate gradients did not converge");
  }
  sol.u.array() -= m_.dot(sol.u) / m_.sum();
  sol.multiplier = total / m_.sum();
  const Vector r = A_ * sol.u + sol.multiplier * m_ - b;
  sol.relative_residual = r.norm() / b.norm();
  if (!(sol.relative_residual <= options_.residual_tolerance)) {
    std::ostringstream os;
    os << "relative residual " << sol.relative_residual << " exceeds " << options_.residual_tolerance;
    throw Error(ErrorKind::SolverDiverged, os.str());
  }
  return sol;
}

NeumannSolution solve_neumann(const Mesh& mesh, const StiffnessSystem& sys, const BoundaryFlux& flux) {
  if (mesh.id != sys.mesh_id()) throw Error(ErrorKind::MeshMismatch, "system was assembled on another mesh");
  if (!is_compatible(mesh, flux)) {
    std::ostringstream os;
    os << "net boundary current " << total_flux(mesh, flux) << " is not zero";
    throw Error(ErrorKind::IncompatibleFlux, os.str());
  }
  return sys.solve_load(load_vector(mesh, flux));
}

double energy(const StiffnessSystem& sys, const Vector& u) { return u.dot(sys.matrix() * u); }

std::vector<std::size_t> sigma_facets(const Mesh& mesh) {
  std::vector<std::size_t> out;
  for (std::size_t f = 0; f < mesh.facet_tags.size(); ++f) {
    if (mesh.facet_tags[f] == FacetTag::Sigma) out.push_back(f);
  }
  return out;
}

std::vector<double> boundary_trace(const Mesh& mesh, const Vector& u) {
  std::vector<double> out;
  for (std::size_t f : sigma_facets(mesh)) {
    const auto& t = mesh.boundary_facets[f];
    out.push_back((u[t[0]] + u[t[1]] + u[t[2]]) / 3.0);
  }
  return out;
}

BoundaryFlux kernel_probe_flux(const Mesh& mesh, const Vec2& y, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorKind::ConfigValidation, "mollifier radius must be positive");
  BoundaryFlux flux = zero_flux(mesh);
  double mass = 0.0;
  int support = 0;
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f) {
    const Vec3 c = mesh.facet_centroid(f);
    const double r = (Vec2(c.x(), c.y()) - y).norm();
    if (r >= eps) continue;
    // Only facets of the top surface can be this close in x' (their normal points to -x3).
    if (mesh.outward_normals[f].z() >= 0.0) continue;
    if (mesh.facet_tags[f] != FacetTag::Sigma) {
      throw Error(ErrorKind::SourceOffPatch, "smoothed source reaches outside the SIGMA patch");
    }
    const double s = 1.0 - (r / eps) * (r / eps);
    flux.density[f] = s * s;
    mass += s * s * mesh.facet_areas[f];
    ++support;
  }
  if (support < 6) throw Error(ErrorKind::SourceOffPatch, "smoothed source is not resolved by the mesh (< 6 facets)");
  const double uniform = 1.0 / mesh.boundary_area();
  for (std::size_t f = 0; f < flux.density.size(); ++f) flux.density[f] = flux.density[f] / mass - uniform;
  return flux;
}

Vector neumann_kernel_probe(const Mesh& mesh, const StiffnessSystem& sys, const Vec2& y, double eps) {
  return solve_neumann(mesh, sys, kernel_probe_flux(mesh, y, eps)).u;
}

}  // namespace strata
