#include "strata/identify.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SVD>
#include <unsupported/Eigen/NonLinearOptimization>
#include <unsupported/Eigen/NumericalDiff>

#include "strata/error.hpp"
#include "strata/forward.hpp"
#include "strata/util.hpp"

namespace strata {

namespace {

using Upper = std::array<double, 6>;

Mat3 upper_to_matrix(const Upper& u) {
  Mat3 m;
  m << u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5];
  return m;
}

Upper matrix_to_upper(const Mat3& m) {
  return {m(0, 0), 0.5 * (m(0, 1) + m(1, 0)), 0.5 * (m(0, 2) + m(2, 0)), m(1, 1), 0.5 * (m(1, 2) + m(2, 1)), m(2, 2)};
}

// Coefficient of g_p in t_a^T g t_b.
double tangential_coefficient(const Vec3& ta, const Vec3& tb, int p) {
  const auto [r, c] = upper_index(p);
  if (r == c) return ta[r] * tb[r];
  return ta[r] * tb[c] + ta[c] * tb[r];
}

}  // namespace

TensorRecovery recover_tensor_from_tangential(const std::vector<TangentialSample>& samples,
                                              double consistency_tolerance) {
  if (samples.empty()) throw Error(ErrorKind::InsufficientNormals, "no tangential samples");
  const Eigen::Index rows = static_cast<Eigen::Index>(3 * samples.size());
  Eigen::MatrixXd A(rows, 6);
  Eigen::VectorXd d(rows);
  Eigen::Index row = 0;
  for (const auto& s : samples) {
    const double len = s.normal.norm();
    if (std::abs(len - 1.0) > 1e-9) throw Error(ErrorKind::ConfigValidation, "sample normal is not unit length");
    if (std::abs(s.block(0, 1) - s.block(1, 0)) > 1e-12 * (1.0 + s.block.norm()))
      throw Error(ErrorKind::ConfigValidation, "tangential block is not symmetric");
    const TangentFrame f = tangent_frame(s.normal);
    const std::array<std::pair<const Vec3*, const Vec3*>, 3> pairs = {
        {{&f.t1, &f.t1}, {&f.t1, &f.t2}, {&f.t2, &f.t2}}};
    const std::array<double, 3> values = {s.block(0, 0), s.block(0, 1), s.block(1, 1)};
    for (int q = 0; q < 3; ++q, ++row) {
      for (int p = 0; p < 6; ++p) A(row, p) = tangential_coefficient(*pairs[q].first, *pairs[q].second, p);
      d(row) = values[q];
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const auto& sv = svd.singularValues();
  int rank = 0;
  for (Eigen::Index i = 0; i < sv.size(); ++i)
    if (sv(i) > 1e-10 * sv(0)) ++rank;
  if (rank < 6) {
    std::ostringstream msg;
    msg << "tangential system has rank " << rank << " < 6; the sample normals span too few tangent planes";
    throw Error(ErrorKind::InsufficientNormals, msg.str());
  }
  const Eigen::VectorXd x = svd.solve(d);
  const double scale = std::max(d.norm(), std::numeric_limits<double>::min());
  const double residual = (A * x - d).norm() / scale;
  if (residual > consistency_tolerance) {
    std::ostringstream msg;
    msg << "tangential samples are not consistent with one constant metric (residual " << residual << ")";
    throw Error(ErrorKind::NotConsistent, msg.str());
  }
  const Mat3 g = upper_to_matrix({x(0), x(1), x(2), x(3), x(4), x(5)});
  Eigen::SelfAdjointEigenSolver<Mat3> eig(g, Eigen::EigenvaluesOnly);
  if (eig.eigenvalues().minCoeff() <= 0.0) throw Error(ErrorKind::NotSPD, "recovered metric is not positive definite");
  const double det_sigma = std::sqrt(g.determinant());
  const Mat3 sigma = det_sigma * g.inverse();
  return {g, AnisoTensor(matrix_to_upper(sigma)), residual, rank};
}

namespace {

// Residual of a symmetric matrix difference: upper triangle with sqrt(2)
// weights off the diagonal, so ||r||^2 is the Frobenius norm squared.
Vector upper_residual(const Eigen::MatrixXd& D, double scale) {
  const Eigen::Index m = D.rows();
  Vector r(m * (m + 1) / 2);
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = i; j < m; ++j) {
      const double v = 0.5 * (D(i, j) + D(j, i));
      r(idx++) = (i == j ? v : std::numbers::sqrt2 * v) / scale;
    }
  }
  return r;
}

struct Evaluation {
  std::shared_ptr<const Mesh> mesh;
  std::vector<Vector> fields;
  Eigen::MatrixXd N;
  Vector r;
  double misfit = 0.0;
};

// Sum over the elements of one layer of vol * G_r^T G_c, where G (3 x m) holds
// the gradients of all basis fields on an element.
struct LayerSensitivity {
  std::array<Eigen::MatrixXd, 6> S;  // indexed like upper_index
};

std::vector<LayerSensitivity> layer_sensitivities(const Mesh& mesh, const std::vector<Vector>& fields) {
  const Eigen::Index m = static_cast<Eigen::Index>(fields.size());
  std::vector<LayerSensitivity> out(static_cast<std::size_t>(mesh.num_regions));
  for (auto& l : out)
    for (auto& s : l.S) s = Eigen::MatrixXd::Zero(m, m);
  Eigen::Matrix<double, 3, Eigen::Dynamic> G(3, m);
  for (std::size_t e = 0; e < mesh.num_tets(); ++e) {
    const P1Element el = p1_element(mesh, e);
    G.setZero();
    for (int a = 0; a < 4; ++a) {
      const int v = mesh.tets[e][a];
      for (Eigen::Index j = 0; j < m; ++j) G.col(j) += el.grads.col(a) * fields[j](v);
    }
    auto& l = out[static_cast<std::size_t>(mesh.region_tags[e] - 1)];
    for (int p = 0; p < 6; ++p) {
      const auto [r, c] = upper_index(p);
      l.S[p].noalias() += el.volume * G.row(r).transpose() * G.row(c);
    }
  }
  return out;
}

// dN / d sigma_p for a constant tensor perturbation on one layer.
Eigen::MatrixXd tensor_derivative(const LayerSensitivity& l, int p) {
  const auto [r, c] = upper_index(p);
  if (r == c) return -l.S[p];
  return -(l.S[p] + l.S[p].transpose());
}

bool is_geometry_failure(ErrorKind k) {
  return k == ErrorKind::OrderingViolation || k == ErrorKind::EmptyLayer || k == ErrorKind::ResolutionTooCoarse ||
         k == ErrorKind::MeshingFailed;
}

// Clamp eigenvalues into [1/lambda, lambda]; reports whether anything moved.
Upper project_spd(const Upper& u, double lambda, bool* clamped) {
  Eigen::SelfAdjointEigenSolver<Mat3> eig(upper_to_matrix(u));
  Eigen::Vector3d ev = eig.eigenvalues();
  bool moved = false;
  for (int i = 0; i < 3; ++i) {
    const double c = std::clamp(ev(i), 1.0 / lambda, lambda);
    if (c != ev(i)) moved = true;
    ev(i) = c;
  }
  if (!moved) return u;
  if (clamped) *clamped = true;
  return matrix_to_upper(eig.eigenvectors() * ev.asDiagonal() * eig.eigenvectors().transpose());
}

// A layered model with a subset of its parameters free. Parameter order: the
// coefficients of each free interface, then the six entries of each free
// tensor (or one shared tensor when `tied`).
class LayeredProblem {
 public:
  LayeredProblem(const NDMatrix& measured, const FitOptions& options) : measured_(&measured), options_(options) {
    scale_ = measured.N.norm();
    if (!(scale_ > 0.0)) throw Error(ErrorKind::ConfigValidation, "measured N-D matrix is zero");
  }

  // Geometry comes from the setup and is rebuilt for every parameter vector.
  void use_setup(const InversionSetup* setup) { setup_ = setup; }
  // Geometry is this mesh, unchanged; all tags share tensor 0.
  void use_fixed_mesh(std::shared_ptr<const Mesh> mesh, const FluxBasis* basis) {
    fixed_mesh_ = std::move(mesh);
    fixed_basis_ = basis;
  }

  std::vector<Interface> interfaces;
  std::vector<Upper> tensors;
  std::vector<int> free_interfaces;
  std::vector<int> free_tensors;
  bool tied = false;

  Eigen::Index size() const {
    Eigen::Index n = 0;
    for (int k : free_interfaces) n += static_cast<Eigen::Index>(interfaces[k].coefficients().size());
    return n + 6 * static_cast<Eigen::Index>(free_tensors.size());
  }
  Eigen::Index interface_parameter_count() const {
    Eigen::Index n = 0;
    for (int k : free_interfaces) n += static_cast<Eigen::Index>(interfaces[k].coefficients().size());
    return n;
  }

  Vector pack() const {
    Vector p(size());
    Eigen::Index i = 0;
    for (int k : free_interfaces)
      for (double c : interfaces[k].coefficients()) p(i++) = c;
    for (int k : free_tensors)
      for (double c : tensors[k]) p(i++) = c;
    return p;
  }

  void unpack(const Vector& p, std::vector<Interface>& ifaces, std::vector<Upper>& tens) const {
    ifaces = interfaces;
    tens = tensors;
    Eigen::Index i = 0;
    for (int k : free_interfaces) {
      std::vector<double> c(interfaces[k].coefficients().size());
      for (double& x : c) x = p(i++);
      ifaces[k] = interfaces[k].with_coefficients(c);
    }
    for (int k : free_tensors)
      for (double& x : tens[k]) x = p(i++);
    if (tied)
      for (auto& t : tens) t = tens[free_tensors.front()];
  }

  void commit(const Vector& p) { unpack(p, interfaces, tensors); }

  Vector project(const Vector& p, bool* clamped = nullptr) const {
    Vector q = p;
    Eigen::Index i = interface_parameter_count();
    for (std::size_t t = 0; t < free_tensors.size(); ++t, i += 6) {
      Upper u;
      for (int a = 0; a < 6; ++a) u[a] = q(i + a);
      u = project_spd(u, options_.lambda, clamped);
      for (int a = 0; a < 6; ++a) q(i + a) = u[a];
    }
    return q;
  }

  std::optional<Evaluation> evaluate(const Vector& p, unsigned threads) const {
    std::vector<Interface> ifaces;
    std::vector<Upper> tens;
    unpack(p, ifaces, tens);
    Evaluation ev;
    std::unique_ptr<FluxBasis> own_basis;
    const FluxBasis* basis = fixed_basis_;
    if (fixed_mesh_) {
      ev.mesh = fixed_mesh_;
    } else {
      try {
        ev.mesh = std::make_shared<const Mesh>(setup_->mesh(setup_->region(ifaces)));
      } catch (const Error& e) {
        if (is_geometry_failure(e.kind())) return std::nullopt;
        throw;
      }
      own_basis = std::make_unique<FluxBasis>(make_dipole_basis(*ev.mesh, setup_->basis));
      basis = own_basis.get();
    }
    if (basis->id() != measured_->basis_id || basis->size() != measured_->size())
      throw Error(ErrorKind::BasisMismatch, "inversion basis differs from the measured basis");
    const Mesh& mesh = *ev.mesh;
    std::vector<Mat3> layer(tens.size());
    for (std::size_t k = 0; k < tens.size(); ++k) layer[k] = upper_to_matrix(tens[k]);
    std::vector<Mat3> elem(mesh.num_tets());
    for (std::size_t e = 0; e < mesh.num_tets(); ++e) {
      const int tag = mesh.region_tags[e];
      elem[e] = tied ? layer.front() : layer.at(static_cast<std::size_t>(tag - 1));
    }
    const StiffnessSystem sys = StiffnessSystem::assemble(mesh, elem, options_.nd.solver, threads);
    ev.fields = solve_basis(mesh, sys, *basis, threads);
    ev.N = nd_from_fields(*basis, ev.fields, mesh.id, 0).N;
    ev.r = upper_residual(ev.N - measured_->N, scale_);
    ev.misfit = ev.r.squaredNorm();
    return ev;
  }

  Vector residual_at(const Vector& p) const {
    auto ev = evaluate(p, options_.nd.threads);
    if (!ev) throw Error(ErrorKind::MeshingFailed, "parameter vector gives an invalid region");
    return ev->r;
  }

  Eigen::MatrixXd jacobian(const Vector& p, const Evaluation& base) const {
    const Eigen::Index n = size();
    Eigen::MatrixXd J(base.r.size(), n);
    const Eigen::Index ni = interface_parameter_count();
    const double M = setup_ ? setup_->cap_height : 1.0;
    const double hstep = options_.interface_fd_step * M;

    // Interface columns: central differences with a remesh per side. Columns
    // are independent, so they run concurrently with serial inner solves.
    const unsigned outer = std::max(1u, options_.nd.threads);
    std::vector<Vector> plus(static_cast<std::size_t>(ni)), minus(static_cast<std::size_t>(ni));
    std::vector<char> ok_plus(static_cast<std::size_t>(ni), 0), ok_minus(static_cast<std::size_t>(ni), 0);
    parallel_for(static_cast<std::size_t>(2 * ni), outer, [&](std::size_t t) {
      const Eigen::Index j = static_cast<Eigen::Index>(t / 2);
      const bool up = (t % 2) == 0;
      Vector q = p;
      q(j) += up ? hstep : -hstep;
      auto ev = evaluate(q, outer > 1 ? 1 : options_.nd.threads);
      if (!ev) return;
      (up ? plus : minus)[static_cast<std::size_t>(j)] = ev->r;
      (up ? ok_plus : ok_minus)[static_cast<std::size_t>(j)] = 1;
    });
    for (Eigen::Index j = 0; j < ni; ++j) {
      const auto s = static_cast<std::size_t>(j);
      if (ok_plus[s] && ok_minus[s]) J.col(j) = (plus[s] - minus[s]) / (2.0 * hstep);
      else if (ok_plus[s]) J.col(j) = (plus[s] - base.r) / hstep;
      else if (ok_minus[s]) J.col(j) = (base.r - minus[s]) / hstep;
      else J.col(j).setZero();
    }

    if (options_.tensor_jacobian == TensorJacobian::Analytic) {
      const auto sens = layer_sensitivities(*base.mesh, base.fields);
      Eigen::Index col = ni;
      for (int k : free_tensors) {
        for (int q = 0; q < 6; ++q, ++col) {
          Eigen::MatrixXd dN = Eigen::MatrixXd::Zero(base.N.rows(), base.N.cols());
          if (tied) {
            for (const auto& l : sens) dN += tensor_derivative(l, q);
          } else {
            dN = tensor_derivative(sens[static_cast<std::size_t>(k)], q);
          }
          J.col(col) = upper_residual(dN, scale_);
        }
      }
    } else {
      std::vector<Vector> cols(static_cast<std::size_t>(n - ni));
      std::vector<double> steps(cols.size());
      parallel_for(cols.size(), outer, [&](std::size_t t) {
        const Eigen::Index j = ni + static_cast<Eigen::Index>(t);
        const Eigen::Index first = ni + 6 * static_cast<Eigen::Index>(t / 6);
        const double tensor_scale = p.segment(first, 6).norm();
        const double step = options_.tensor_fd_step * std::max(tensor_scale, 1e-12);
        Vector q = p;
        q(j) += step;
        auto ev = evaluate(q, outer > 1 ? 1 : options_.nd.threads);
        if (!ev) throw Error(ErrorKind::MeshingFailed, "tensor perturbation gave an invalid model");
        cols[t] = (ev->r - base.r) / step;
      });
      for (std::size_t t = 0; t < cols.size(); ++t) J.col(ni + static_cast<Eigen::Index>(t)) = cols[t];
    }
    return J;
  }

  const FitOptions& options() const { return options_; }

 private:
  const NDMatrix* measured_;
  FitOptions options_;
  double scale_ = 1.0;
  const InversionSetup* setup_ = nullptr;
  std::shared_ptr<const Mesh> fixed_mesh_;
  const FluxBasis* fixed_basis_ = nullptr;
};

struct LMResult {
  Vector p;
  Evaluation eval;
  std::vector<double> history;  // misfit of the start and of every accepted step
  int iterations = 0;
  bool hit_max = false;
  bool clamped = false;
  std::string reason;
  Eigen::MatrixXd last_jacobian;
};

// Levenberg-Marquardt with Marquardt scaling. A trial step is accepted only if
// its model is valid and its misfit is strictly lower, so the history is
// non-increasing.
LMResult levenberg_marquardt(const LayeredProblem& prob, const Vector& p0, int max_iterations) {
  const FitOptions& opt = prob.options();
  LMResult res;
  res.p = prob.project(p0, &res.clamped);
  auto ev = prob.evaluate(res.p, opt.nd.threads);
  if (!ev) throw Error(ErrorKind::MeshingFailed, "initial model gives an invalid region");
  res.eval = std::move(*ev);
  res.history.push_back(res.eval.misfit);
  double mu = opt.initial_damping;
  for (int it = 0; it < max_iterations; ++it) {
    if (res.eval.misfit <= opt.misfit_tolerance) {
      res.reason = "misfit below tolerance";
      return res;
    }
    const Eigen::MatrixXd J = prob.jacobian(res.p, res.eval);
    res.last_jacobian = J;
    const Eigen::MatrixXd A = J.transpose() * J;
    const Vector g = J.transpose() * res.eval.r;
    Vector D = A.diagonal();
    const double dmax = std::max(D.maxCoeff(), std::numeric_limits<double>::min());
    for (Eigen::Index i = 0; i < D.size(); ++i) D(i) = std::max(D(i), 1e-12 * dmax);
    bool accepted = false;
    for (int rej = 0; rej < opt.max_rejections && !accepted; ++rej) {
      Eigen::MatrixXd H = A;
      H.diagonal() += mu * D;
      const Vector step = H.ldlt().solve(-g);
      bool clamped = false;
      const Vector trial = prob.project(res.p + step, &clamped);
      auto tev = prob.evaluate(trial, opt.nd.threads);
      if (tev && tev->misfit < res.eval.misfit) {
        const double drop = (res.eval.misfit - tev->misfit) / res.eval.misfit;
        res.p = trial;
        res.eval = std::move(*tev);
        res.history.push_back(res.eval.misfit);
        res.clamped = res.clamped || clamped;
        mu = std::max(mu / 10.0, 1e-15);
        accepted = true;
        ++res.iterations;
        if (drop < opt.stall_tolerance) {
          res.reason = "converged (stalled)";
          return res;
        }
      } else {
        mu *= 10.0;
      }
    }
    if (!accepted) {
      res.reason = "converged (no decreasing step)";
      return res;
    }
  }
  res.hit_max = true;
  res.reason = "iteration limit";
  return res;
}

double isotropic_start(const LayeredProblem& prob, const NDMatrix& measured) {
  LayeredProblem unit = prob;
  for (auto& t : unit.tensors) t = {1, 0, 0, 1, 0, 1};
  auto ev = unit.evaluate(unit.pack(), prob.options().nd.threads);
  if (!ev) throw Error(ErrorKind::MeshingFailed, "reference model gives an invalid region");
  const double num = ev->N.squaredNorm();
  const double den = (ev->N.array() * measured.N.array()).sum();
  if (!(den > 0.0)) return 1.0;
  return std::clamp(num / den, 1.0 / prob.options().lambda, prob.options().lambda);
}

int numerical_rank(const Eigen::MatrixXd& J, double tol, double* condition = nullptr) {
  if (J.size() == 0) return 0;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(J);
  const auto& s = svd.singularValues();
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    if (s(i) > tol * s(0)) ++rank;
  if (condition) {
    const bool full = s.size() == J.cols() && s(s.size() - 1) > 0.0;
    *condition = full ? s(0) / s(s.size() - 1) : std::numeric_limits<double>::infinity();
  }
  return rank;
}

AnisoTensor to_tensor(const Upper& u) { return AnisoTensor(u); }

bool at_bound(const Upper& u, double lambda) {
  Eigen::SelfAdjointEigenSolver<Mat3> eig(upper_to_matrix(u), Eigen::EigenvaluesOnly);
  const auto& ev = eig.eigenvalues();
  const double lo = 1.0 / lambda, hi = lambda;
  return ev.minCoeff() <= lo * (1.0 + 1e-12) || ev.maxCoeff() >= hi * (1.0 - 1e-12);
}

}  // namespace

TopFit fit_top_tensor(const NDMatrix& measured, const Mesh& mesh, const FluxBasis& basis, const FitOptions& options,
                      const std::optional<AnisoTensor>& initial) {
  if (basis.mesh_id() != mesh.id) throw Error(ErrorKind::MeshMismatch, "basis was built on a different mesh");
  LayeredProblem prob(measured, options);
  prob.use_fixed_mesh(std::make_shared<const Mesh>(mesh), &basis);
  prob.tensors = {Upper{1, 0, 0, 1, 0, 1}};
  prob.free_tensors = {0};
  prob.tied = true;
  if (initial) {
    prob.tensors[0] = initial->upper();
  } else {
    const double s = isotropic_start(prob, measured);
    prob.tensors[0] = {s, 0, 0, s, 0, s};
  }
  const Vector p0 = prob.pack();
  {
    auto ev = prob.evaluate(p0, options.nd.threads);
    const Eigen::MatrixXd J = prob.jacobian(p0, *ev);
    const int rank = numerical_rank(J, 1e-10);
    if (rank < 6) {
      std::ostringstream msg;
      msg << "homogeneous tensor fit has Jacobian rank " << rank << " < 6 with " << measured.size()
          << " patterns; the data cannot determine all six entries";
      throw Error(ErrorKind::NonIdentifiable, msg.str());
    }
  }
  LMResult lm = levenberg_marquardt(prob, p0, options.max_iterations);
  Upper u;
  for (int a = 0; a < 6; ++a) u[a] = lm.p(a);
  if (lm.clamped && at_bound(u, options.lambda))
    throw Error(ErrorKind::HitEllipticityBound, "homogeneous fit ended on the ellipticity bound");
  TopFit out;
  out.sigma = to_tensor(u);
  out.misfit = lm.eval.misfit;
  out.history = lm.history;
  out.jacobian_rank = 6;
  out.iterations = lm.iterations;
  return out;
}

StrataRegion InversionSetup::region(const std::vector<Interface>& interfaces) const {
  StrataRegionSpec spec;
  spec.radius = radius;
  spec.cap_height = cap_height;
  spec.footprint = footprint;
  spec.top_offset = top_offset;
  spec.top_modes = top_modes;
  spec.min_gap = min_gap;
  for (const auto& i : interfaces) spec.interfaces.push_back({i.offset(), i.modes()});
  return build_strata_region(spec);
}

Mesh InversionSetup::mesh(const StrataRegion& region) const {
  MeshOptions mo;
  mo.h = h;
  mo.sigma_radius = sigma_radius;
  mo.sublayers.assign(static_cast<std::size_t>(region.num_layers()), sublayers_per_layer);
  return mesh_region(region, mo);
}

Interface InversionSetup::flat_interface(double offset) const {
  std::vector<CosineMode> modes;
  for (const auto& [i, j] : interface_modes) modes.push_back({i, j, 0.0});
  return Interface(offset, modes, radius);
}

namespace {

// Deepest point of a surface over the footprint, bounded by the offset plus
// the sum of |amplitude| since every mode is bounded by 1.
double surface_max(const Interface& s) {
  double v = s.offset();
  for (const auto& m : s.modes()) v += std::abs(m.amplitude);
  return v;
}

Interface top_surface_of(const InversionSetup& setup) {
  return Interface(setup.top_offset, setup.top_modes, setup.radius);
}

bool same_interface(const Interface& a, const Interface& b) { return a.coefficients() == b.coefficients(); }

void check_frozen(const InversionState& before, const InversionState& after) {
  for (std::size_t i = 0; i < before.frozen_interfaces.size(); ++i)
    if (!same_interface(before.frozen_interfaces[i], after.frozen_interfaces.at(i)))
      throw std::logic_error("frozen interface modified");
  for (std::size_t i = 0; i < before.frozen_tensors.size(); ++i)
    if (!(before.frozen_tensors[i] == after.frozen_tensors.at(i))) throw std::logic_error("frozen tensor modified");
}

}  // namespace

Interface InversionSetup::placeholder_interface() const {
  return flat_interface(0.5 * (surface_max(top_surface_of(*this)) + cap_height));
}

StripResult strip_layers(const NDMatrix& measured, const InversionSetup& setup, const StripOptions& options) {
  const double M = setup.cap_height;
  const Interface top = top_surface_of(setup);
  const double gap = std::max(setup.min_gap.value_or(0.05 * M), 0.5 * setup.h) * 1.5;

  InversionReport report;
  std::vector<InversionState> snapshots;
  InversionState state;

  // Homogeneous start on a mesh with one placeholder interface.
  const Interface placeholder = setup.placeholder_interface();
  const Mesh mesh0 = setup.mesh(setup.region({placeholder}));
  const FluxBasis basis0 = make_dipole_basis(mesh0, setup.basis);
  if (basis0.id() != measured.basis_id || basis0.size() != measured.size())
    throw Error(ErrorKind::BasisMismatch, "inversion basis differs from the measured basis");
  const TopFit top_fit = fit_top_tensor(measured, mesh0, basis0, options.fit);
  state.working_tensors = {top_fit.sigma};
  state.misfit_history = {top_fit.misfit};
  report.runs.push_back({"homogeneous", top_fit.history});
  report.total_iterations += top_fit.iterations;
  double misfit = top_fit.misfit;
  snapshots.push_back(state);

  for (int k = 1; k <= options.k_max; ++k) {
    state.k = k;
    StageRecord rec;
    rec.k = k;
    rec.misfit_before = misfit;

    const double lo = (k == 1 ? surface_max(top) : surface_max(state.frozen_interfaces.back())) + gap;
    const double hi = M - gap;
    if (hi <= lo) {
      rec.decision = "merge: no room for another layer";
      report.stages.push_back(rec);
      report.stopping_reason = rec.decision;
      break;
    }
    const AnisoTensor sigma_k = state.working_tensors.back();

    auto stage_problem = [&](double offset, double factor) {
      LayeredProblem prob(measured, options.fit);
      prob.use_setup(&setup);
      for (const auto& i : state.frozen_interfaces) prob.interfaces.push_back(i);
      prob.interfaces.push_back(setup.flat_interface(offset));
      for (const auto& t : state.frozen_tensors) prob.tensors.push_back(t.upper());
      prob.tensors.push_back(sigma_k.upper());
      prob.tensors.push_back(sigma_k.scaled(factor).upper());
      prob.free_interfaces = {k - 1};
      prob.free_tensors = {k - 1, k};
      return prob;
    };

    // Short runs from every start, then the best one to convergence.
    std::optional<LayeredProblem> best_prob;
    LMResult best;
    bool have_best = false;
    for (double f : options.offset_starts) {
      for (double c : options.contrast_starts) {
        LayeredProblem prob = stage_problem(lo + f * (hi - lo), c);
        LMResult r;
        try {
          r = levenberg_marquardt(prob, prob.pack(), options.start_iterations);
        } catch (const Error& e) {
          if (e.kind() == ErrorKind::MeshingFailed) continue;
          throw;
        }
        if (!have_best || r.eval.misfit < best.eval.misfit) {
          best = std::move(r);
          best_prob = prob;
          have_best = true;
        }
      }
    }
    if (!have_best) throw Error(ErrorKind::MeshingFailed, "no admissible start for the next interface");
    LMResult lm = levenberg_marquardt(*best_prob, best.p, options.fit.max_iterations);
    report.total_iterations += best.iterations + lm.iterations;
    {
      std::vector<double> h = best.history;
      h.insert(h.end(), lm.history.begin() + 1, lm.history.end());
      report.runs.push_back({"stage " + std::to_string(k), std::move(h)});
    }
    best_prob->commit(lm.p);

    rec.misfit_after = lm.eval.misfit;
    rec.interface_coefficients = best_prob->interfaces[static_cast<std::size_t>(k - 1)].coefficients();
    rec.tensor_below = best_prob->tensors[static_cast<std::size_t>(k)];
    rec.jump = frobenius_distance(to_tensor(best_prob->tensors[static_cast<std::size_t>(k - 1)]),
                                  to_tensor(best_prob->tensors[static_cast<std::size_t>(k)]));
    const double ratio = lm.eval.misfit > 0.0 ? misfit / lm.eval.misfit : std::numeric_limits<double>::infinity();
    const bool at_floor = misfit <= options.misfit_floor;
    const bool drops = ratio >= options.accept_ratio;
    const bool visible = rec.jump >= options.jump_tolerance;
    rec.accepted = !at_floor && drops && visible;
    std::ostringstream why;
    if (rec.accepted) {
      why << "accept: misfit drop " << ratio << ", jump " << rec.jump;
    } else {
      why << "merge:";
      if (at_floor) why << " misfit already at floor (" << misfit << ")";
      if (!drops) why << " misfit drop " << ratio << " < " << options.accept_ratio;
      if (!visible) why << " jump " << rec.jump << " < " << options.jump_tolerance;
    }
    rec.decision = why.str();
    report.stages.push_back(rec);
    if (!rec.accepted) {
      std::ostringstream stop;
      stop << "interface " << k << " merged (" << rec.decision << ")";
      report.stopping_reason = stop.str();
      break;
    }

    const InversionState before = state;
    state.frozen_interfaces.push_back(best_prob->interfaces[static_cast<std::size_t>(k - 1)]);
    state.frozen_tensors.push_back(to_tensor(best_prob->tensors[static_cast<std::size_t>(k - 1)]));
    state.working_interfaces = {};
    state.working_tensors = {to_tensor(best_prob->tensors[static_cast<std::size_t>(k)])};
    state.misfit_history.push_back(lm.eval.misfit);
    check_frozen(before, state);
    misfit = lm.eval.misfit;
    snapshots.push_back(state);
    if (k == options.k_max) report.stopping_reason = "reached k_max";
  }

  // Joint refinement over every parameter of the accepted model.
  std::vector<Interface> ifaces = state.frozen_interfaces;
  std::vector<Upper> tens;
  for (const auto& t : state.frozen_tensors) tens.push_back(t.upper());
  tens.push_back(state.working_tensors.back().upper());
  LayeredProblem joint(measured, options.fit);
  joint.use_setup(&setup);
  const int K = static_cast<int>(ifaces.size());
  if (K == 0) {
    // Homogeneous model: keep the placeholder interface with a tied tensor.
    joint.interfaces = {placeholder};
    joint.tensors = {tens[0], tens[0]};
    joint.free_tensors = {0};
    joint.tied = true;
  } else {
    joint.interfaces = ifaces;
    joint.tensors = tens;
    for (int k = 0; k < K; ++k) joint.free_interfaces.push_back(k);
    for (int k = 0; k <= K; ++k) joint.free_tensors.push_back(k);
  }
  LMResult lm = levenberg_marquardt(joint, joint.pack(), options.fit.max_iterations);
  report.total_iterations += lm.iterations;
  if (lm.hit_max) throw Error(ErrorKind::MaxIterations, "joint refinement did not converge");
  joint.commit(lm.p);
  report.runs.push_back({"joint", lm.history});
  state.misfit_history.push_back(lm.eval.misfit);
  snapshots.push_back(state);

  report.num_interfaces = K;
  report.interfaces = K == 0 ? std::vector<Interface>{} : joint.interfaces;
  for (int k = 0; k <= K; ++k) report.tensors.push_back(to_tensor(joint.tensors[static_cast<std::size_t>(k)]));
  report.misfit = lm.eval.misfit;
  report.misfit_history = state.misfit_history;
  if (report.stopping_reason.empty()) report.stopping_reason = "reached k_max";
  report.stopping_reason += "; joint refinement " + lm.reason;

  // Identifiability: non-flat surfaces and a well-conditioned final Jacobian.
  if (!top.non_flat()) report.identifiability_notes.push_back("top surface is flat");
  for (int k = 0; k < K; ++k) {
    double amp = 0.0;
    for (const auto& m : report.interfaces[static_cast<std::size_t>(k)].modes())
      amp = std::max(amp, std::abs(m.amplitude));
    if (amp <= options.flat_tolerance * M)
      report.identifiability_notes.push_back("interface " + std::to_string(k + 1) + " is flat");
  }
  {
    Eigen::MatrixXd J = lm.last_jacobian;
    if (J.size() == 0 || J.cols() != joint.size()) J = joint.jacobian(lm.p, lm.eval);
    const int rank = numerical_rank(J, options.rank_tolerance, &report.jacobian_condition);
    if (rank < J.cols())
      report.identifiability_notes.push_back("Jacobian rank " + std::to_string(rank) + " < " +
                                             std::to_string(J.cols()));
  }
  report.identifiable = report.identifiability_notes.empty();

  // Final model: jump condition is reported through the stage records rather
  // than enforced, since a merged model has no interface left to test.
  std::vector<Interface> final_ifaces = report.interfaces;
  std::vector<AnisoTensor> final_tensors = report.tensors;
  ModelOptions mo;
  mo.lambda = options.fit.lambda;
  mo.enforce_jump = false;
  if (K == 0) {
    final_ifaces = {placeholder};
    final_tensors = {report.tensors[0], report.tensors[0]};
  }
  StrataModel model(setup.region(final_ifaces), final_tensors, mo);
  return {std::move(model), std::move(report), std::move(snapshots)};
}

JacobianCheck jacobian_check(const NDMatrix& measured, const InversionSetup& setup, const StrataModel& model,
                             int directions, std::uint64_t seed, double step, const FitOptions& options) {
  LayeredProblem prob(measured, options);
  prob.use_setup(&setup);
  prob.interfaces = model.region().interfaces();
  for (const auto& t : model.tensors()) prob.tensors.push_back(t.upper());
  for (int k = 0; k < model.region().num_interfaces(); ++k) prob.free_interfaces.push_back(k);
  for (int k = 0; k < model.num_layers(); ++k) prob.free_tensors.push_back(k);
  const Vector p = prob.pack();
  auto base = prob.evaluate(p, options.nd.threads);
  if (!base) throw Error(ErrorKind::MeshingFailed, "model gives an invalid region");
  const Eigen::MatrixXd J = prob.jacobian(p, *base);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  JacobianCheck out;
  for (int d = 0; d < directions; ++d) {
    Vector v(p.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
    v.normalize();
    const Vector jv = J * v;
    const Vector fd = (prob.residual_at(p + step * v) - prob.residual_at(p - step * v)) / (2.0 * step);
    const double err = (jv - fd).norm() / std::max(fd.norm(), std::numeric_limits<double>::min());
    out.relative_errors.push_back(err);
    out.max_error = std::max(out.max_error, err);
  }
  return out;
}

namespace {

struct KernelSamples {
  std::vector<Vec2> z;
  std::vector<double> u;
};

// Variable projection: for a unit-determinant form Q(theta, s), the best
// c + b.z + kappa / sqrt(z^T Q z) is a linear least-squares problem.
Mat2 unit_form(double theta, double s) {
  const double c = std::cos(theta), sn = std::sin(theta);
  Mat2 R;
  R << c, -sn, sn, c;
  return R * Eigen::Vector2d(std::exp(s), std::exp(-s)).asDiagonal() * R.transpose();
}

Vector kernel_residual(const KernelSamples& data, const Mat2& Q) {
  const Eigen::Index n = static_cast<Eigen::Index>(data.z.size());
  Eigen::MatrixXd B(n, 4);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec2& z = data.z[static_cast<std::size_t>(i)];
    B(i, 0) = 1.0;
    B(i, 1) = z.x();
    B(i, 2) = z.y();
    B(i, 3) = 1.0 / std::sqrt(z.dot(Q * z));
    y(i) = data.u[static_cast<std::size_t>(i)];
  }
  const Vector coef = B.colPivHouseholderQr().solve(y);
  return B * coef - y;
}

struct KernelFunctor {
  using Scalar = double;
  using InputType = Eigen::VectorXd;
  using ValueType = Eigen::VectorXd;
  using JacobianType = Eigen::MatrixXd;
  enum { InputsAtCompileTime = Eigen::Dynamic, ValuesAtCompileTime = Eigen::Dynamic };

  const KernelSamples* data;
  int inputs() const { return 2; }
  int values() const { return static_cast<int>(data->z.size()); }
  int operator()(const Eigen::VectorXd& x, Eigen::VectorXd& f) const {
    f = kernel_residual(*data, unit_form(x(0), x(1)));
    return 0;
  }
};

double major_axis_deg(const Mat2& A) {
  Eigen::SelfAdjointEigenSolver<Mat2> eig(A);
  const Eigen::Vector2d v = eig.eigenvectors().col(1);
  double a = std::atan2(v.y(), v.x()) * 180.0 / std::numbers::pi;
  if (a < 0.0) a += 180.0;
  if (a >= 180.0) a -= 180.0;
  return a;
}

double condition_of(const Mat2& A) {
  Eigen::SelfAdjointEigenSolver<Mat2> eig(A, Eigen::EigenvaluesOnly);
  return eig.eigenvalues()(1) / eig.eigenvalues()(0);
}

}  // namespace

std::vector<KernelFitRow> kernel_asymptotics_demo(const Mesh& mesh, const StrataModel& model, const Vec2& y,
                                                  const std::vector<double>& radii, const SolverOptions& solver) {
  for (double eps : radii) kernel_probe_flux(mesh, y, eps);
  const StiffnessSystem sys = StiffnessSystem::assemble(mesh, model, solver);
  const Interface& top = model.region().top_surface();
  const Vec3 normal = top.unit_normal(y);
  const TangentFrame frame = tangent_frame(normal);
  const Vec3 y3(y.x(), y.y(), top(y));
  const Mat2 g_tan = tangential_submatrix(metric_of(model.layer_tensor(1)), normal).block;

  // Vertices of the top surface: facets whose outward normal points up.
  std::vector<char> on_top(mesh.num_vertices(), 0);
  for (std::size_t f = 0; f < mesh.boundary_facets.size(); ++f)
    if (mesh.outward_normals[f].z() < -0.5)
      for (int v : mesh.boundary_facets[f]) on_top[static_cast<std::size_t>(v)] = 1;

  std::vector<KernelFitRow> rows;
  for (double eps : radii) {
    const Vector u = neumann_kernel_probe(mesh, sys, y, eps);
    KernelSamples data;
    for (std::size_t v = 0; v < mesh.num_vertices(); ++v) {
      if (!on_top[v]) continue;
      const Vec3 d = mesh.vertices[v] - y3;
      const Vec2 z(frame.t1.dot(d), frame.t2.dot(d));
      const double r = z.norm();
      if (r < 2.0 * eps || r > 4.0 * eps) continue;
      data.z.push_back(z);
      data.u.push_back(u(static_cast<Eigen::Index>(v)));
    }
    if (data.z.size() < 12) throw Error(ErrorKind::SourceOffPatch, "too few boundary nodes in the fitting annulus");

    // Coarse grid over (theta, s), then Levenberg-Marquardt on both.
    double best = std::numeric_limits<double>::infinity();
    Eigen::VectorXd x(2);
    for (int i = 0; i < 12; ++i) {
      for (double s : {0.0, 0.25, 0.5, 1.0}) {
        const double theta = std::numbers::pi * i / 12.0;
        const double val = kernel_residual(data, unit_form(theta, s)).squaredNorm();
        if (val < best) {
          best = val;
          x << theta, s;
        }
      }
    }
    KernelFunctor fn{&data};
    Eigen::NumericalDiff<KernelFunctor> nd(fn);
    Eigen::LevenbergMarquardt<Eigen::NumericalDiff<KernelFunctor>> lm(nd);
    lm.minimize(x);

    KernelFitRow row;
    row.eps = eps;
    row.form = unit_form(x(0), x(1));
    row.condition = condition_of(row.form);
    row.axis_deg = major_axis_deg(row.form);
    row.expected_axis_deg = major_axis_deg(g_tan);
    row.expected_condition = condition_of(g_tan);
    const double diff = std::abs(row.axis_deg - row.expected_axis_deg);
    row.axis_error_deg = std::min(diff, 180.0 - diff);
    const Vector res = kernel_residual(data, row.form);
    double mean = 0.0;
    for (double v : data.u) mean += v;
    mean /= static_cast<double>(data.u.size());
    double spread = 0.0;
    for (double v : data.u) spread += (v - mean) * (v - mean);
    row.fit_residual = std::sqrt(res.squaredNorm() / std::max(spread, std::numeric_limits<double>::min()));
    row.samples = static_cast<int>(data.z.size());
    rows.push_back(row);
  }
  return rows;
}

}  // namespace strata
