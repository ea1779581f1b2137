#include "strata/conductivity.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/LU>

#include "strata/error.hpp"
#include "strata/util.hpp"

namespace strata {

namespace {

Mat3 from_upper(const std::array<double, 6>& u) {
  Mat3 m;
  m << u[0], u[1], u[2], u[1], u[3], u[4], u[2], u[4], u[5];
  return m;
}

}  // namespace

std::array<int, 2> upper_index(int p) {
  static constexpr std::array<std::array<int, 2>, 6> idx = {{{0, 0}, {0, 1}, {0, 2}, {1, 1}, {1, 2}, {2, 2}}};
  return idx.at(static_cast<std::size_t>(p));
}

AnisoTensor::AnisoTensor(const std::array<double, 6>& upper) : upper_(upper) {
  for (double v : upper_) {
    if (!std::isfinite(v)) throw Error(ErrorKind::NotSPD, "non-finite tensor entry");
  }
  const Eigen::Vector3d ev = eigenvalues();
  if (!(ev.minCoeff() > 0.0)) {
    std::ostringstream os;
    os << "tensor is not positive definite (min eigenvalue " << ev.minCoeff() << ")";
    throw Error(ErrorKind::NotSPD, os.str());
  }
}

AnisoTensor AnisoTensor::from_matrix(const Mat3& m) {
  const double scale = std::max(m.norm(), 1e-300);
  if ((m - m.transpose()).norm() > 1e-12 * scale) throw Error(ErrorKind::NotSPD, "tensor is not symmetric");
  return AnisoTensor({m(0, 0), m(0, 1), m(0, 2), m(1, 1), m(1, 2), m(2, 2)});
}

Mat3 AnisoTensor::matrix() const { return from_upper(upper_); }

Eigen::Vector3d AnisoTensor::eigenvalues() const {
  return Eigen::SelfAdjointEigenSolver<Mat3>(matrix(), Eigen::EigenvaluesOnly).eigenvalues();
}

bool AnisoTensor::elliptic(double lambda) const {
  const Eigen::Vector3d ev = eigenvalues();
  return ev.minCoeff() >= 1.0 / lambda && ev.maxCoeff() <= lambda;
}

void AnisoTensor::check_ellipticity(double lambda) const {
  if (!elliptic(lambda)) {
    const Eigen::Vector3d ev = eigenvalues();
    std::ostringstream os;
    os << "eigenvalues [" << ev.minCoeff() << ", " << ev.maxCoeff() << "] outside [1/" << lambda << ", " << lambda
       << "]";
    throw Error(ErrorKind::EllipticityViolation, os.str());
  }
}

AnisoTensor AnisoTensor::scaled(double c) const {
  std::array<double, 6> u = upper_;
  for (double& v : u) v *= c;
  return AnisoTensor(u);
}

double frobenius_distance(const AnisoTensor& a, const AnisoTensor& b) { return (a.matrix() - b.matrix()).norm(); }

StrataModel::StrataModel(StrataRegion region, std::vector<AnisoTensor> tensors, ModelOptions options)
    : region_(std::move(region)), tensors_(std::move(tensors)), options_(options) {
  if (static_cast<int>(tensors_.size()) != region_.num_layers()) {
    std::ostringstream os;
    os << "model has " << tensors_.size() << " tensors but region has " << region_.num_layers() << " layers";
    throw Error(ErrorKind::ConfigValidation, os.str());
  }
  for (const auto& t : tensors_) t.check_ellipticity(options_.lambda);
  if (options_.enforce_jump && !satisfies_jump_condition()) {
    throw Error(ErrorKind::JumpViolation, "adjacent layers must differ by at least the jump tolerance");
  }
}

const AnisoTensor& StrataModel::layer_tensor(int k) const {
  if (k < 1 || k > num_layers()) throw Error(ErrorKind::TagOutOfRange, "layer index out of range");
  return tensors_[static_cast<std::size_t>(k - 1)];
}

bool StrataModel::satisfies_jump_condition() const {
  for (std::size_t k = 0; k + 1 < tensors_.size(); ++k) {
    if (frobenius_distance(tensors_[k], tensors_[k + 1]) < options_.jump_tolerance) return false;
  }
  return true;
}

Mat3 StrataModel::at(const Vec3& x) const {
  const int k = region_.layer_at(x);
  if (k == 0) throw Error(ErrorKind::TagOutOfRange, "point outside the region");
  return layer_tensor(k).matrix();
}

std::vector<Mat3> StrataModel::element_tensors(const Mesh& mesh) const {
  std::vector<Mat3> out(mesh.num_tets());
  std::vector<Mat3> per_layer;
  for (const auto& t : tensors_) per_layer.push_back(t.matrix());
  for (std::size_t e = 0; e < mesh.num_tets(); ++e) {
    const int tag = mesh.region_tags[e];
    if (tag < 1 || tag > num_layers()) {
      std::ostringstream os;
      os << "element " << e << " has region tag " << tag << " but the model has " << num_layers() << " layers";
      throw Error(ErrorKind::TagOutOfRange, os.str());
    }
    out[e] = per_layer[static_cast<std::size_t>(tag - 1)];
  }
  return out;
}

std::uint64_t StrataModel::id() const {
  Fnv1a h;
  auto iface = [&h](const Interface& i) {
    h.value(i.offset());
    for (const auto& m : i.modes()) {
      h.value(m.i);
      h.value(m.j);
      h.value(m.amplitude);
    }
  };
  h.value(region_.radius());
  h.value(region_.cap_height());
  h.value(static_cast<int>(region_.footprint()));
  iface(region_.top_surface());
  for (const auto& i : region_.interfaces()) iface(i);
  for (const auto& t : tensors_) h.value(t.upper());
  return h.digest();
}

Mat3 metric_of(const Mat3& sigma, int n) {
  if (n != 3) throw Error(ErrorKind::ConfigValidation, "metric_of supports n = 3 only");
  Eigen::SelfAdjointEigenSolver<Mat3> es(sigma, Eigen::EigenvaluesOnly);
  const double lo = es.eigenvalues().minCoeff(), hi = es.eigenvalues().maxCoeff();
  if (!(lo > 0.0) || hi / lo > 1e12) {
    std::ostringstream os;
    os << "tensor eigenvalues [" << lo << ", " << hi << "] are not safely positive definite";
    throw Error(ErrorKind::SingularTensor, os.str());
  }
  const double det = sigma.determinant();
  const Mat3 g = std::pow(det, 1.0 / (n - 2)) * sigma.inverse();
  return 0.5 * (g + g.transpose());
}

TangentFrame tangent_frame(const Vec3& normal) {
  const Vec3 n = normal.normalized();
  const Vec3 v = Vec3::UnitZ() + n;
  const double vv = v.squaredNorm();
  if (vv < 1e-24) return {Vec3::UnitX(), -Vec3::UnitY()};
  const Mat3 H = Mat3::Identity() - (2.0 / vv) * v * v.transpose();
  return {H.col(0), H.col(1)};
}

TangentialBlock tangential_submatrix(const Mat3& g, const Vec3& normal) {
  const TangentFrame f = tangent_frame(normal);
  Eigen::Matrix<double, 3, 2> T;
  T.col(0) = f.t1;
  T.col(1) = f.t2;
  Mat2 b = T.transpose() * g * T;
  b = 0.5 * (b + b.transpose());
  return {b, f};
}

namespace {

double bump1d(double t) {
  if (std::abs(t) >= 1.0) return 0.0;
  return std::exp(1.0 - 1.0 / (1.0 - t * t));
}

double bump1d_prime(double t) {
  if (std::abs(t) >= 1.0) return 0.0;
  const double s = 1.0 - t * t;
  return bump1d(t) * (-2.0 * t / (s * s));
}

}  // namespace

double BumpDisplacement::bump(const Vec3& x) const {
  double b = 1.0;
  for (int i = 0; i < 3; ++i) b *= bump1d((x[i] - center[i]) / half_widths[i]);
  return b;
}

Vec3 BumpDisplacement::bump_gradient(const Vec3& x) const {
  Vec3 t, f, fp;
  for (int i = 0; i < 3; ++i) {
    t[i] = (x[i] - center[i]) / half_widths[i];
    f[i] = bump1d(t[i]);
    fp[i] = bump1d_prime(t[i]) / half_widths[i];
  }
  return Vec3(fp[0] * f[1] * f[2], f[0] * fp[1] * f[2], f[0] * f[1] * fp[2]);
}

Diffeo Diffeo::bump(const BumpDisplacement& b) {
  if (!(b.half_widths.minCoeff() > 0.0)) throw Error(ErrorKind::ConfigValidation, "bump half widths must be positive");
  if (!(b.direction.norm() > 0.0)) throw Error(ErrorKind::ConfigValidation, "bump direction must be nonzero");
  Diffeo d;
  BumpDisplacement s = b;
  s.direction.normalize();
  d.stages_.push_back(s);
  return d;
}

Diffeo Diffeo::then(const Diffeo& outer) const {
  Diffeo d = *this;
  d.stages_.insert(d.stages_.end(), outer.stages_.begin(), outer.stages_.end());
  return d;
}

Vec3 Diffeo::apply(const Vec3& x) const {
  Vec3 y = x;
  for (const auto& s : stages_) y = y + s.amplitude * s.bump(y) * s.direction;
  return y;
}

Mat3 Diffeo::jacobian(const Vec3& x) const {
  Mat3 J = Mat3::Identity();
  Vec3 y = x;
  for (const auto& s : stages_) {
    const Mat3 Js = Mat3::Identity() + s.amplitude * s.direction * s.bump_gradient(y).transpose();
    J = Js * J;
    y = y + s.amplitude * s.bump(y) * s.direction;
  }
  return J;
}

Vec3 Diffeo::inverse(const Vec3& x) const {
  Vec3 y = x;
  for (auto it = stages_.rbegin(); it != stages_.rend(); ++it) {
    const auto& s = *it;
    Vec3 z = y;
    bool ok = false;
    for (int iter = 0; iter < 60; ++iter) {
      const Vec3 r = z + s.amplitude * s.bump(z) * s.direction - y;
      if (r.norm() <= 1e-12 * std::max(1.0, y.norm())) {
        ok = true;
        break;
      }
      const Mat3 Js = Mat3::Identity() + s.amplitude * s.direction * s.bump_gradient(z).transpose();
      z -= Js.lu().solve(r);
    }
    if (!ok) throw Error(ErrorKind::InverseMapDiverged, "Newton iteration for the inverse map did not converge");
    y = z;
  }
  return y;
}

void Diffeo::validate(const StrataRegion& region, int samples) const {
  for (const auto& s : stages_) {
    const Vec3 lo = s.center - s.half_widths, hi = s.center + s.half_widths;
    for (int a = 0; a < 2; ++a) {
      for (int b = 0; b < 2; ++b) {
        const Vec2 corner(a ? hi.x() : lo.x(), b ? hi.y() : lo.y());
        if (region.footprint() == Footprint::Disk && !(corner.norm() < region.radius())) {
          throw Error(ErrorKind::NotBoundaryFixing, "bump support touches the lateral boundary");
        }
        if (region.footprint() == Footprint::Square && !(corner.cwiseAbs().maxCoeff() < region.radius())) {
          throw Error(ErrorKind::NotBoundaryFixing, "bump support touches the lateral boundary");
        }
      }
    }
    if (!(hi.z() < region.cap_height())) throw Error(ErrorKind::NotBoundaryFixing, "bump support touches the cap");
    double top = -std::numeric_limits<double>::infinity();
    for (int a = 0; a <= samples; ++a) {
      for (int b = 0; b <= samples; ++b) {
        const Vec2 x(lo.x() + (hi.x() - lo.x()) * a / samples, lo.y() + (hi.y() - lo.y()) * b / samples);
        top = std::max(top, region.top_surface()(x));
      }
    }
    if (!(lo.z() > top)) throw Error(ErrorKind::NotBoundaryFixing, "bump support touches the top surface");
  }
  // det DPsi is the product of the stage determinants, each of which is 1
  // outside its own support box.
  for (const auto& s : stages_) {
    const Vec3 lo = s.center - s.half_widths, hi = s.center + s.half_widths;
    for (int a = 0; a <= samples; ++a) {
      for (int b = 0; b <= samples; ++b) {
        for (int c = 0; c <= samples; ++c) {
          const Vec3 x = lo + Vec3(a, b, c).cwiseProduct(hi - lo) / samples;
          if (!(1.0 + s.amplitude * s.direction.dot(s.bump_gradient(x)) > 0.0)) {
            throw Error(ErrorKind::NotBoundaryFixing, "det DPsi is not positive on the sample grid");
          }
        }
      }
    }
  }
}

Mat3 pushforward(const TensorField& sigma, const Diffeo& psi, const Vec3& at) {
  const Vec3 y = psi.inverse(at);
  const Mat3 D = psi.jacobian(y);
  const double det = D.determinant();
  if (!(det > 0.0)) throw Error(ErrorKind::NotBoundaryFixing, "det DPsi <= 0 at the preimage point");
  Mat3 out = D * sigma(y) * D.transpose() / det;
  return 0.5 * (out + out.transpose());
}

Mat3 pushforward(const AnisoTensor& sigma, const Diffeo& psi, const Vec3& at) {
  const Mat3 s = sigma.matrix();
  return pushforward([&s](const Vec3&) { return s; }, psi, at);
}

}  // namespace strata
