#include "strata/ndmap.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <istream>
#include <limits>
#include <numbers>
#include <ostream>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "strata/error.hpp"
#include "strata/util.hpp"

namespace strata {

namespace {

// Provenance of a pattern set: support geometry and densities, independent of
// how the rest of the mesh is numbered.
std::uint64_t hash_patterns(const Mesh& mesh, const std::vector<BoundaryFlux>& patterns) {
  Fnv1a h;
  for (const auto& p : patterns) {
    h.text("pattern");
    for (std::size_t f = 0; f < p.density.size(); ++f) {
      if (p.density[f] == 0.0) continue;
      for (int v : mesh.boundary_facets[f]) {
        h.value(mesh.vertices[v].x());
        h.value(mesh.vertices[v].y());
        h.value(mesh.vertices[v].z());
      }
      h.value(p.density[f]);
    }
  }
  return h.digest();
}

double gram_condition_of(const Eigen::MatrixXd& G) {
  const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(G, Eigen::EigenvaluesOnly).eigenvalues();
  if (!(ev.minCoeff() > 0.0)) return std::numeric_limits<double>::infinity();
  return ev.maxCoeff() / ev.minCoeff();
}

}  // namespace

FluxBasis::FluxBasis(const Mesh& mesh, std::vector<BoundaryFlux> patterns, double max_gram_condition)
    : patterns_(std::move(patterns)), max_gram_condition_(max_gram_condition), mesh_id_(mesh.id) {
  if (patterns_.empty()) throw Error(ErrorKind::ConfigValidation, "flux basis is empty");
  const auto nf = mesh.boundary_facets.size();
  const auto m = static_cast<Eigen::Index>(patterns_.size());
  loads_.resize(static_cast<Eigen::Index>(mesh.num_vertices()), m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const BoundaryFlux& p = patterns_[static_cast<std::size_t>(j)];
    if (p.density.size() != nf) throw Error(ErrorKind::MeshMismatch, "pattern does not match the mesh boundary");
    for (std::size_t f = 0; f < nf; ++f) {
      if (p.density[f] != 0.0 && mesh.facet_tags[f] != FacetTag::Sigma) {
        std::ostringstream os;
        os << "pattern " << j << " is nonzero on facet " << f << " outside SIGMA";
        throw Error(ErrorKind::SourceOffPatch, os.str());
      }
    }
    if (!is_compatible(mesh, p)) {
      std::ostringstream os;
      os << "pattern " << j << " carries net current " << total_flux(mesh, p);
      throw Error(ErrorKind::IncompatibleFlux, os.str());
    }
    loads_.col(j) = load_vector(mesh, p);
  }
  gram_.resize(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      double s = 0.0;
      const auto& a = patterns_[static_cast<std::size_t>(i)].density;
      const auto& b = patterns_[static_cast<std::size_t>(j)].density;
      for (std::size_t f = 0; f < nf; ++f) s += a[f] * b[f] * mesh.facet_areas[f];
      gram_(i, j) = gram_(j, i) = s;
    }
  }
  gram_condition_ = gram_condition_of(gram_);
  if (!(gram_condition_ < max_gram_condition_)) {
    std::ostringstream os;
    os << "flux patterns are linearly dependent (Gram condition " << gram_condition_ << ")";
    throw Error(ErrorKind::LinearDependence, os.str());
  }
  id_ = hash_patterns(mesh, patterns_);
}

FluxBasis FluxBasis::extended(const Mesh& mesh, const std::vector<BoundaryFlux>& extra) const {
  std::vector<BoundaryFlux> all = patterns_;
  all.insert(all.end(), extra.begin(), extra.end());
  return FluxBasis(mesh, std::move(all), max_gram_condition_);
}

std::vector<std::vector<std::size_t>> sigma_facet_groups(const Mesh& mesh, const FluxBasisOptions& options) {
  if (options.rings < 0 || options.sectors_per_ring < 1) {
    throw Error(ErrorKind::ConfigValidation, "flux basis needs rings >= 0 and sectors_per_ring >= 1");
  }
  const double width = mesh.sigma_radius / (options.rings + 1);
  std::vector<int> first(static_cast<std::size_t>(options.rings) + 1);
  int total = 1;
  for (int j = 1; j <= options.rings; ++j) {
    first[static_cast<std::size_t>(j)] = total;
    total += options.sectors_per_ring * j;
  }
  std::vector<std::vector<std::size_t>> groups(static_cast<std::size_t>(total));
  for (std::size_t f : sigma_facets(mesh)) {
    const Vec3 c = mesh.facet_centroid(f);
    const double r = std::hypot(c.x(), c.y());
    const int ring = std::min(options.rings, static_cast<int>(r / width));
    if (ring == 0) {
      groups[0].push_back(f);
      continue;
    }
    const int sectors = options.sectors_per_ring * ring;
    double theta = std::atan2(c.y(), c.x());
    if (theta < 0.0) theta += 2.0 * std::numbers::pi;
    const int s = std::min(sectors - 1, static_cast<int>(theta / (2.0 * std::numbers::pi) * sectors));
    groups[static_cast<std::size_t>(first[static_cast<std::size_t>(ring)] + s)].push_back(f);
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) {
      std::ostringstream os;
      os << "flux group " << g << " contains no SIGMA facet; refine the mesh or use fewer groups";
      throw Error(ErrorKind::ConfigValidation, os.str());
    }
  }
  return groups;
}

FluxBasis make_dipole_basis(const Mesh& mesh, const FluxBasisOptions& options) {
  const auto groups = sigma_facet_groups(mesh, options);
  if (groups.size() < 2) throw Error(ErrorKind::ConfigValidation, "dipole basis needs at least two facet groups");
  std::vector<double> area(groups.size(), 0.0);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t f : groups[g]) area[g] += mesh.facet_areas[f];
  }
  std::vector<BoundaryFlux> patterns;
  for (std::size_t g = 0; g + 1 < groups.size(); ++g) {
    BoundaryFlux p = zero_flux(mesh);
    for (std::size_t f : groups[g]) p.density[f] = 1.0 / area[g];
    for (std::size_t f : groups[g + 1]) p.density[f] = -1.0 / area[g + 1];
    patterns.push_back(std::move(p));
  }
  return FluxBasis(mesh, std::move(patterns), options.max_gram_condition);
}

double NDMatrix::asymmetry() const {
  const double n = N.norm();
  return n > 0.0 ? (N - N.transpose()).norm() / n : 0.0;
}

double NDMatrix::min_eigenvalue() const {
  const Eigen::MatrixXd S = 0.5 * (N + N.transpose());
  return Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(S, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
}

std::vector<Vector> solve_basis(const Mesh& mesh, const StiffnessSystem& sys, const FluxBasis& basis,
                                unsigned threads) {
  if (basis.mesh_id() != mesh.id || sys.mesh_id() != mesh.id) {
    throw Error(ErrorKind::MeshMismatch, "basis, system and mesh must come from the same mesh");
  }
  std::vector<Vector> fields(basis.size());
  parallel_for(basis.size(), threads, [&](std::size_t j) {
    fields[j] = sys.solve_load(basis.loads().col(static_cast<Eigen::Index>(j))).u;
  });
  return fields;
}

NDMatrix nd_from_fields(const FluxBasis& basis, const std::vector<Vector>& fields, std::uint64_t mesh_id,
                        std::uint64_t model_id) {
  const auto m = static_cast<Eigen::Index>(basis.size());
  NDMatrix nd;
  nd.N.resize(m, m);
  for (Eigen::Index j = 0; j < m; ++j) nd.N.col(j) = basis.loads().transpose() * fields[static_cast<std::size_t>(j)];
  nd.mesh_id = mesh_id;
  nd.model_id = model_id;
  nd.basis_id = basis.id();
  return nd;
}

NDMatrix build_nd(const Mesh& mesh, const StrataModel& model, const FluxBasis& basis, const NDOptions& options) {
  return build_nd(mesh, model.element_tensors(mesh), model.id(), basis, options);
}

NDMatrix build_nd(const Mesh& mesh, const std::vector<Mat3>& element_tensors, std::uint64_t model_id,
                  const FluxBasis& basis, const NDOptions& options) {
  const auto sys = StiffnessSystem::assemble(mesh, element_tensors, options.solver, options.threads);
  return nd_from_fields(basis, solve_basis(mesh, sys, basis, options.threads), mesh.id, model_id);
}

double sigma_pairing(const Mesh& mesh, const BoundaryFlux& phi, const Vector& u) {
  const auto facets = sigma_facets(mesh);
  const auto trace = boundary_trace(mesh, u);
  double s = 0.0;
  for (std::size_t i = 0; i < facets.size(); ++i) s += phi.density[facets[i]] * mesh.facet_areas[facets[i]] * trace[i];
  return s;
}

AlessandriniGap alessandrini_gap(const Mesh& mesh, const std::vector<Mat3>& sigma1, const std::vector<Mat3>& sigma2,
                                 const FluxBasis& basis, const NDOptions& options) {
  if (sigma1.size() != mesh.num_tets() || sigma2.size() != mesh.num_tets()) {
    throw Error(ErrorKind::MeshMismatch, "both models must be given on the same mesh");
  }
  const auto s1 = StiffnessSystem::assemble(mesh, sigma1, options.solver, options.threads);
  const auto s2 = StiffnessSystem::assemble(mesh, sigma2, options.solver, options.threads);
  const auto u1 = solve_basis(mesh, s1, basis, options.threads);
  const auto u2 = solve_basis(mesh, s2, basis, options.threads);
  const NDMatrix n1 = nd_from_fields(basis, u1, mesh.id, 0), n2 = nd_from_fields(basis, u2, mesh.id, 0);

  const auto m = static_cast<Eigen::Index>(basis.size());
  AlessandriniGap out;
  out.lhs = n2.N - n1.N;
  out.rhs = Eigen::MatrixXd::Zero(m, m);
  Eigen::Matrix<double, 3, Eigen::Dynamic> g1(3, m), g2(3, m);
  for (std::size_t e = 0; e < mesh.num_tets(); ++e) {
    const Mat3 d = sigma1[e] - sigma2[e];
    if (d.isZero(0.0)) continue;
    const P1Element el = p1_element(mesh, e);
    const auto& t = mesh.tets[e];
    for (Eigen::Index j = 0; j < m; ++j) {
      const auto& a = u1[static_cast<std::size_t>(j)];
      const auto& b = u2[static_cast<std::size_t>(j)];
      g1.col(j) = el.grads * Eigen::Vector4d(a[t[0]], a[t[1]], a[t[2]], a[t[3]]);
      g2.col(j) = el.grads * Eigen::Vector4d(b[t[0]], b[t[1]], b[t[2]], b[t[3]]);
    }
    out.rhs.noalias() += el.volume * (g1.transpose() * d * g2);
  }
  const double scale = std::max({out.lhs.norm(), out.rhs.norm(), 1e-12 * n1.N.norm()});
  out.residual = scale > 0.0 ? (out.lhs - out.rhs).norm() / scale : 0.0;
  return out;
}

AlessandriniGap alessandrini_gap(const Mesh& mesh, const StrataModel& model1, const StrataModel& model2,
                                 const FluxBasis& basis, const NDOptions& options) {
  return alessandrini_gap(mesh, model1.element_tensors(mesh), model2.element_tensors(mesh), basis, options);
}

double distinguishability(const NDMatrix& nd1, const NDMatrix& nd2) {
  if (nd1.basis_id != nd2.basis_id || nd1.N.rows() != nd2.N.rows()) {
    throw Error(ErrorKind::BasisMismatch, "N-D matrices were built over different flux bases");
  }
  const double n = nd1.N.norm();
  if (!(n > 0.0)) throw Error(ErrorKind::BasisMismatch, "reference N-D matrix is zero");
  return (nd1.N - nd2.N).norm() / n;
}

std::vector<Mat3> layer_preserving_pushforward(const Mesh& mesh, const StrataModel& model, const Diffeo& psi) {
  std::vector<Mat3> out = model.element_tensors(mesh);
  if (psi.is_identity()) return out;
  for (std::size_t e = 0; e < mesh.num_tets(); ++e) {
    const Mat3 s = out[e];
    out[e] = pushforward([&s](const Vec3&) { return s; }, psi, mesh.tet_centroid(e));
  }
  return out;
}

GaugeGap gauge_counterexample_gap(const Mesh& mesh, const StrataModel& model, const Diffeo& psi,
                                  const FluxBasis& basis, const NDOptions& options) {
  psi.validate(model.region());
  GaugeGap g;
  g.original = build_nd(mesh, model, basis, options);
  Fnv1a h;
  h.value(model.id());
  for (const auto& s : psi.stages()) {
    h.value(s.center);
    h.value(s.half_widths);
    h.value(s.direction);
    h.value(s.amplitude);
  }
  g.pushed = build_nd(mesh, layer_preserving_pushforward(mesh, model, psi), h.digest(), basis, options);
  g.gap = distinguishability(g.original, g.pushed);
  return g;
}

void write_nd_csv(std::ostream& out, const NDMatrix& nd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, nd.mesh_id);
  out << "# ndmap mesh=" << buf;
  std::snprintf(buf, sizeof buf, "%016" PRIx64, nd.model_id);
  out << " model=" << buf;
  std::snprintf(buf, sizeof buf, "%016" PRIx64, nd.basis_id);
  out << " basis=" << buf << " m=" << nd.N.rows() << "\n";
  for (Eigen::Index i = 0; i < nd.N.rows(); ++i) {
    for (Eigen::Index j = 0; j < nd.N.cols(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", nd.N(i, j));
      out << (j ? "," : "") << buf;
    }
    out << "\n";
  }
}

NDMatrix read_nd_csv(std::istream& in) {
  std::string header;
  if (!std::getline(in, header) || header.rfind("# ndmap ", 0) != 0) {
    throw Error(ErrorKind::ConfigParse, "missing N-D CSV provenance header");
  }
  NDMatrix nd;
  long long m = -1;
  std::istringstream hs(header.substr(8));
  std::string tok;
  while (hs >> tok) {
    const auto eq = tok.find('=');
    if (eq == std::string::npos) throw Error(ErrorKind::ConfigParse, "malformed header field '" + tok + "'");
    const std::string key = tok.substr(0, eq), val = tok.substr(eq + 1);
    try {
      if (key == "mesh") nd.mesh_id = std::stoull(val, nullptr, 16);
      else if (key == "model") nd.model_id = std::stoull(val, nullptr, 16);
      else if (key == "basis") nd.basis_id = std::stoull(val, nullptr, 16);
      else if (key == "m") m = std::stoll(val);
      else throw Error(ErrorKind::ConfigParse, "unknown header field '" + key + "'");
    } catch (const std::logic_error&) {
      throw Error(ErrorKind::ConfigParse, "bad value in header field '" + tok + "'");
    }
  }
  if (m <= 0) throw Error(ErrorKind::ConfigParse, "header does not give the matrix size");
  nd.N.resize(m, m);
  std::string line;
  for (long long i = 0; i < m; ++i) {
    if (!std::getline(in, line)) throw Error(ErrorKind::ConfigParse, "N-D CSV has fewer rows than m");
    std::istringstream ls(line);
    std::string cell;
    long long j = 0;
    while (std::getline(ls, cell, ',')) {
      if (j >= m) throw Error(ErrorKind::ConfigParse, "N-D CSV row is longer than m");
      char* end = nullptr;
      nd.N(i, j) = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str()) throw Error(ErrorKind::ConfigParse, "non-numeric N-D CSV entry '" + cell + "'");
      ++j;
    }
    if (j != m) throw Error(ErrorKind::ConfigParse, "N-D CSV row is shorter than m");
  }
  return nd;
}

}  // namespace strata
