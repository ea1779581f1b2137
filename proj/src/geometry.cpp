#include "strata/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include <Eigen/Geometry>

#include "strata/error.hpp"
#include "strata/util.hpp"

namespace strata {

namespace {

constexpr double kPi = std::numbers::pi;

std::string fmt_point(const Vec2& x) {
  std::ostringstream os;
  os << "(" << x.x() << ", " << x.y() << ")";
  return os.str();
}

}  // namespace

Interface::Interface(double offset, std::vector<CosineMode> modes, double scale)
    : offset_(offset), scale_(scale), modes_(std::move(modes)) {
  if (!(scale > 0.0)) throw Error(ErrorKind::ConfigValidation, "interface scale must be positive");
  for (const auto& m : modes_) {
    if (m.i < 0 || m.j < 0) throw Error(ErrorKind::ConfigValidation, "mode indices must be non-negative");
    if (m.i == 0 && m.j == 0) {
      throw Error(ErrorKind::ConfigValidation, "constant mode (0,0) is not allowed; use the offset");
    }
    if (!std::isfinite(m.amplitude)) throw Error(ErrorKind::ConfigValidation, "non-finite mode amplitude");
  }
  if (!std::isfinite(offset_)) throw Error(ErrorKind::ConfigValidation, "non-finite interface offset");
}

double Interface::operator()(const Vec2& x) const {
  double v = offset_;
  const double w = kPi / scale_;
  for (const auto& m : modes_) {
    v += m.amplitude * std::cos(m.i * w * x.x()) * std::cos(m.j * w * x.y());
  }
  return v;
}

Vec2 Interface::gradient(const Vec2& x) const {
  Vec2 g = Vec2::Zero();
  const double w = kPi / scale_;
  for (const auto& m : modes_) {
    const double a = m.i * w, b = m.j * w;
    g.x() -= m.amplitude * a * std::sin(a * x.x()) * std::cos(b * x.y());
    g.y() -= m.amplitude * b * std::cos(a * x.x()) * std::sin(b * x.y());
  }
  return g;
}

Vec3 Interface::unit_normal(const Vec2& x) const {
  const Vec2 g = gradient(x);
  return Vec3(-g.x(), -g.y(), 1.0).normalized();
}

bool Interface::non_flat() const {
  return std::any_of(modes_.begin(), modes_.end(), [](const CosineMode& m) { return m.amplitude != 0.0; });
}

Interface Interface::with_coefficients(const std::vector<double>& coeffs) const {
  if (coeffs.size() != modes_.size() + 1) {
    throw Error(ErrorKind::ConfigValidation, "coefficient count does not match interface basis");
  }
  Interface out = *this;
  out.offset_ = coeffs[0];
  for (std::size_t i = 0; i < modes_.size(); ++i) out.modes_[i].amplitude = coeffs[i + 1];
  return out;
}

std::vector<double> Interface::coefficients() const {
  std::vector<double> c;
  c.reserve(modes_.size() + 1);
  c.push_back(offset_);
  for (const auto& m : modes_) c.push_back(m.amplitude);
  return c;
}

const Interface& StrataRegion::surface(int k) const {
  if (k == 0) return top_;
  return interfaces_.at(static_cast<std::size_t>(k - 1));
}

double StrataRegion::surface_height(int k, const Vec2& x) const {
  if (k == num_interfaces() + 1) return cap_height_;
  return surface(k)(x);
}

bool StrataRegion::in_footprint(const Vec2& x, double tol) const {
  if (footprint_ == Footprint::Disk) return x.norm() <= radius_ + tol;
  return std::abs(x.x()) <= radius_ + tol && std::abs(x.y()) <= radius_ + tol;
}

int StrataRegion::layer_at(const Vec3& x) const {
  const Vec2 xp(x.x(), x.y());
  if (!in_footprint(xp, 1e-12)) return 0;
  if (x.z() < top_(xp) || x.z() > cap_height_) return 0;
  for (int k = 1; k <= num_interfaces(); ++k) {
    if (x.z() < interfaces_[static_cast<std::size_t>(k - 1)](xp)) return k;
  }
  return num_layers();
}

std::vector<Vec2> StrataRegion::sample_points(int per_axis) const {
  std::vector<Vec2> pts;
  const int n = std::max(per_axis, 2);
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      const Vec2 x(-radius_ + 2.0 * radius_ * a / (n - 1), -radius_ + 2.0 * radius_ * b / (n - 1));
      if (in_footprint(x)) pts.push_back(x);
    }
  }
  if (footprint_ == Footprint::Disk) {
    const int m = 4 * n;
    for (int t = 0; t < m; ++t) {
      const double th = 2.0 * kPi * t / m;
      pts.emplace_back(radius_ * std::cos(th), radius_ * std::sin(th));
    }
  }
  return pts;
}

namespace {

void validate_region(StrataRegion& r, double& measured, double min_gap, int samples,
                     const std::vector<Vec2>& pts) {
  const int K = r.num_interfaces();
  measured = std::numeric_limits<double>::infinity();
  for (const auto& x : pts) {
    double lower = r.surface_height(0, x);
    for (int k = 1; k <= K + 1; ++k) {
      const double upper = r.surface_height(k, x);
      const double gap = upper - lower;
      measured = std::min(measured, gap);
      if (!(gap >= min_gap)) {
        std::ostringstream os;
        os << "layer " << k << " has thickness " << gap << " < min gap " << min_gap << " at x' = "
           << fmt_point(x) << " (" << samples << "x" << samples << " check grid)";
        throw Error(ErrorKind::OrderingViolation, os.str());
      }
      lower = upper;
    }
  }
}

}  // namespace

StrataRegion build_strata_region(const StrataRegionSpec& spec) {
  if (!(spec.radius > 0.0)) throw Error(ErrorKind::ConfigValidation, "radius must be positive");
  if (spec.interfaces.empty()) throw Error(ErrorKind::EmptyLayer, "at least one interface (K >= 1) is required");
  if (spec.check_samples < 64) throw Error(ErrorKind::ConfigValidation, "ordering check needs >= 64 samples per axis");
  const double min_gap = spec.min_gap.value_or(0.05 * spec.cap_height);
  if (!(min_gap > 0.0)) throw Error(ErrorKind::ConfigValidation, "min_gap must be positive");

  StrataRegion r;
  r.radius_ = spec.radius;
  r.cap_height_ = spec.cap_height;
  r.footprint_ = spec.footprint;
  r.top_ = Interface(spec.top_offset, spec.top_modes, spec.radius);
  for (const auto& is : spec.interfaces) r.interfaces_.emplace_back(is.offset, is.modes, spec.radius);
  r.min_gap_ = min_gap;
  r.check_samples_ = spec.check_samples;
  validate_region(r, r.measured_min_gap_, min_gap, spec.check_samples, r.sample_points(spec.check_samples));
  return r;
}

StrataRegion with_interfaces(const StrataRegion& region, std::vector<Interface> interfaces) {
  if (interfaces.empty()) throw Error(ErrorKind::EmptyLayer, "at least one interface (K >= 1) is required");
  StrataRegion r = region;
  r.interfaces_ = std::move(interfaces);
  for (const auto& i : r.interfaces_) {
    if (i.scale() != r.radius_) throw Error(ErrorKind::ConfigValidation, "interface scale differs from region radius");
  }
  validate_region(r, r.measured_min_gap_, r.min_gap_, r.check_samples_, r.sample_points(r.check_samples_));
  return r;
}

double Mesh::tet_volume(std::size_t e) const {
  const auto& t = tets[e];
  const Vec3& a = vertices[t[0]];
  return (vertices[t[1]] - a).cross(vertices[t[2]] - a).dot(vertices[t[3]] - a) / 6.0;
}

Vec3 Mesh::tet_centroid(std::size_t e) const {
  const auto& t = tets[e];
  return 0.25 * (vertices[t[0]] + vertices[t[1]] + vertices[t[2]] + vertices[t[3]]);
}

Vec3 Mesh::facet_centroid(std::size_t f) const {
  const auto& t = boundary_facets[f];
  return (vertices[t[0]] + vertices[t[1]] + vertices[t[2]]) / 3.0;
}

double Mesh::boundary_area() const {
  double a = 0.0;
  for (double x : facet_areas) a += x;
  return a;
}

double Mesh::tagged_area(FacetTag tag) const {
  double a = 0.0;
  for (std::size_t f = 0; f < facet_areas.size(); ++f) {
    if (facet_tags[f] == tag) a += facet_areas[f];
  }
  return a;
}

namespace {

struct Triangulation2D {
  std::vector<Vec2> points;
  std::vector<std::array<int, 3>> tris;
};

void orient_ccw(Triangulation2D& t) {
  for (auto& tri : t.tris) {
    const Vec2 a = t.points[tri[0]], b = t.points[tri[1]], c = t.points[tri[2]];
    const double cross = (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
    if (cross < 0.0) std::swap(tri[1], tri[2]);
  }
}

Triangulation2D triangulate_square(double R, double h) {
  Triangulation2D t;
  const int n = std::max(1, static_cast<int>(std::ceil(2.0 * R / h - 1e-9)));
  for (int j = 0; j <= n; ++j) {
    for (int i = 0; i <= n; ++i) t.points.emplace_back(-R + 2.0 * R * i / n, -R + 2.0 * R * j / n);
  }
  auto id = [n](int i, int j) { return j * (n + 1) + i; };
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const int a = id(i, j), b = id(i + 1, j), c = id(i + 1, j + 1), d = id(i, j + 1);
      if ((i + j) % 2 == 0) {
        t.tris.push_back({a, b, c});
        t.tris.push_back({a, c, d});
      } else {
        t.tris.push_back({a, b, d});
        t.tris.push_back({b, c, d});
      }
    }
  }
  orient_ccw(t);
  return t;
}

// Concentric rings: ring i (i >= 1) has 6i equally spaced nodes at radius iR/n.
// Refining h -> h/2 doubles n and keeps every old node, so meshes are nested.
Triangulation2D triangulate_disk(double R, double h) {
  Triangulation2D t;
  const int n = std::max(1, static_cast<int>(std::ceil(R / h - 1e-9)));
  std::vector<int> first(n + 1);
  t.points.emplace_back(0.0, 0.0);
  first[0] = 0;
  for (int i = 1; i <= n; ++i) {
    first[i] = static_cast<int>(t.points.size());
    const int m = 6 * i;
    for (int j = 0; j < m; ++j) {
      const double th = 2.0 * kPi * j / m;
      t.points.emplace_back(R * i / n * std::cos(th), R * i / n * std::sin(th));
    }
  }
  for (int j = 0; j < 6; ++j) t.tris.push_back({0, first[1] + j, first[1] + (j + 1) % 6});
  for (int i = 2; i <= n; ++i) {
    const int mi = 6 * (i - 1), mo = 6 * i;
    int a = 0, b = 0;
    // Merge-walk both rings by angle; integer comparison of (a+1)/mi vs (b+1)/mo.
    while (a < mi || b < mo) {
      const bool advance_inner = b >= mo || (a < mi && static_cast<long>(a + 1) * mo < static_cast<long>(b + 1) * mi);
      const int ia = first[i - 1] + a % mi, ib = first[i] + b % mo;
      if (advance_inner) {
        t.tris.push_back({ia, ib, first[i - 1] + (a + 1) % mi});
        ++a;
      } else {
        t.tris.push_back({ia, ib, first[i] + (b + 1) % mo});
        ++b;
      }
    }
  }
  orient_ccw(t);
  return t;
}

std::uint64_t hash_mesh(const Mesh& m) {
  Fnv1a h;
  for (const auto& v : m.vertices) {
    h.value(v.x());
    h.value(v.y());
    h.value(v.z());
  }
  for (const auto& t : m.tets) h.value(t);
  for (int tag : m.region_tags) h.value(tag);
  for (const auto& f : m.boundary_facets) h.value(f);
  for (auto tag : m.facet_tags) h.value(static_cast<int>(tag));
  return h.digest();
}

}  // namespace

Mesh mesh_region(const StrataRegion& region, const MeshOptions& opt) {
  if (!(opt.h > 0.0)) throw Error(ErrorKind::ConfigValidation, "mesh size h must be positive");
  if (2.0 * region.measured_min_gap() < opt.h) {
    std::ostringstream os;
    os << "h = " << opt.h << " does not resolve the thinnest layer (" << region.measured_min_gap()
       << "); need h <= 2 * thickness";
    throw Error(ErrorKind::ResolutionTooCoarse, os.str());
  }
  if (!(opt.sigma_radius > 0.0) || opt.sigma_radius >= region.radius()) {
    throw Error(ErrorKind::ConfigValidation, "sigma_radius must lie in (0, R)");
  }
  const int K = region.num_interfaces();
  const int layers = K + 1;
  if (!opt.sublayers.empty() && static_cast<int>(opt.sublayers.size()) != layers) {
    throw Error(ErrorKind::ConfigValidation, "sublayers must list one count per layer");
  }

  const Triangulation2D tri = region.footprint() == Footprint::Disk ? triangulate_disk(region.radius(), opt.h)
                                                                    : triangulate_square(region.radius(), opt.h);
  const int nv = static_cast<int>(tri.points.size());

  std::vector<int> sub(static_cast<std::size_t>(layers));
  for (int k = 1; k <= layers; ++k) {
    if (!opt.sublayers.empty()) {
      sub[k - 1] = opt.sublayers[k - 1];
      if (sub[k - 1] < 1) throw Error(ErrorKind::ConfigValidation, "sublayer counts must be >= 1");
    } else {
      double thick = 0.0;
      for (const auto& p : tri.points) thick = std::max(thick, region.surface_height(k, p) - region.surface_height(k - 1, p));
      sub[k - 1] = std::max(1, static_cast<int>(std::ceil(thick / opt.h - 1e-9)));
    }
  }

  Mesh mesh;
  mesh.num_regions = layers;
  mesh.sigma_radius = opt.sigma_radius;
  int levels = 1;
  for (int s : sub) levels += s;
  mesh.vertices.resize(static_cast<std::size_t>(levels) * nv);
  for (int v = 0; v < nv; ++v) {
    const Vec2& p = tri.points[v];
    int level = 0;
    mesh.vertices[v] = Vec3(p.x(), p.y(), region.surface_height(0, p));
    for (int k = 1; k <= layers; ++k) {
      const double lo = region.surface_height(k - 1, p), hi = region.surface_height(k, p);
      for (int s = 1; s <= sub[k - 1]; ++s) {
        ++level;
        const double z = s == sub[k - 1] ? hi : lo + (hi - lo) * s / sub[k - 1];
        mesh.vertices[static_cast<std::size_t>(level) * nv + v] = Vec3(p.x(), p.y(), z);
      }
    }
  }

  // Prism split: with 2D indices sorted a < b < c, every quad side uses the
  // diagonal from the bottom of its smaller index to the top of its larger one,
  // which makes neighbouring prisms agree on shared faces.
  int level = 0;
  for (int k = 1; k <= layers; ++k) {
    for (int s = 0; s < sub[k - 1]; ++s, ++level) {
      const int lo = level * nv, hi = (level + 1) * nv;
      for (const auto& t : tri.tris) {
        std::array<int, 3> v = t;
        std::sort(v.begin(), v.end());
        const int a0 = lo + v[0], b0 = lo + v[1], c0 = lo + v[2];
        const int a1 = hi + v[0], b1 = hi + v[1], c1 = hi + v[2];
        const std::array<std::array<int, 4>, 3> split = {{{a0, b0, c0, c1}, {a0, b0, b1, c1}, {a0, a1, b1, c1}}};
        for (auto tet : split) {
          mesh.tets.push_back(tet);
          mesh.region_tags.push_back(k);
          if (mesh.tet_volume(mesh.tets.size() - 1) < 0.0) std::swap(mesh.tets.back()[2], mesh.tets.back()[3]);
        }
      }
    }
  }

  for (std::size_t e = 0; e < mesh.tets.size(); ++e) {
    if (!(mesh.tet_volume(e) > 0.0)) {
      throw Error(ErrorKind::MeshingFailed, "degenerate tetrahedron (interfaces too close for this h)");
    }
  }

  // Boundary facets: faces referenced by exactly one tet.
  struct FaceRef {
    std::array<int, 3> key;
    int tet;
    int opposite;
  };
  std::vector<FaceRef> faces;
  faces.reserve(mesh.tets.size() * 4);
  for (std::size_t e = 0; e < mesh.tets.size(); ++e) {
    const auto& t = mesh.tets[e];
    for (int l = 0; l < 4; ++l) {
      std::array<int, 3> key = {t[(l + 1) % 4], t[(l + 2) % 4], t[(l + 3) % 4]};
      std::sort(key.begin(), key.end());
      faces.push_back({key, static_cast<int>(e), t[l]});
    }
  }
  std::sort(faces.begin(), faces.end(), [](const FaceRef& x, const FaceRef& y) {
    return x.key != y.key ? x.key < y.key : x.tet < y.tet;
  });
  const double r_sigma = opt.sigma_radius;
  for (std::size_t i = 0; i < faces.size();) {
    std::size_t j = i + 1;
    while (j < faces.size() && faces[j].key == faces[i].key) ++j;
    if (j - i > 2) throw Error(ErrorKind::MeshingFailed, "non-manifold face in extruded mesh");
    if (j - i == 1) {
      std::array<int, 3> f = faces[i].key;
      const Vec3 &a = mesh.vertices[f[0]], &b = mesh.vertices[f[1]], &c = mesh.vertices[f[2]];
      Vec3 n = (b - a).cross(c - a);
      if (n.dot(mesh.vertices[faces[i].opposite] - a) > 0.0) {
        std::swap(f[1], f[2]);
        n = -n;
      }
      const double area = 0.5 * n.norm();
      const bool on_top = f[0] < nv && f[1] < nv && f[2] < nv;
      const Vec3 cen = (a + b + c) / 3.0;
      const bool in_sigma = on_top && Vec2(cen.x(), cen.y()).norm() <= r_sigma;
      mesh.boundary_facets.push_back(f);
      mesh.facet_tags.push_back(in_sigma ? FacetTag::Sigma : FacetTag::OtherBoundary);
      mesh.outward_normals.push_back(n.normalized());
      mesh.facet_areas.push_back(area);
    }
    i = j;
  }
  if (mesh.tagged_area(FacetTag::Sigma) <= 0.0) {
    throw Error(ErrorKind::ResolutionTooCoarse, "no boundary facet falls inside the SIGMA patch");
  }
  mesh.id = hash_mesh(mesh);
  return mesh;
}

double angle_between_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  // atan2 form is accurate for nearly parallel vectors.
  const double s = a.normalized().cross(b.normalized()).norm();
  return std::atan2(s, c) * 180.0 / kPi;
}

std::vector<SurfacePoint> non_flatness_certificate(const Interface& iface, int n_samples, double min_angle_deg,
                                                   int max_points) {
  if (n_samples < 2) throw Error(ErrorKind::ConfigValidation, "need at least 2 samples per axis");
  const double R = iface.scale();
  std::vector<SurfacePoint> cand;
  for (int a = 0; a < n_samples; ++a) {
    for (int b = 0; b < n_samples; ++b) {
      const Vec2 x(-R + 2.0 * R * a / (n_samples - 1), -R + 2.0 * R * b / (n_samples - 1));
      if (x.norm() > R) continue;
      cand.push_back({Vec3(x.x(), x.y(), iface(x)), iface.unit_normal(x)});
    }
  }
  std::vector<SurfacePoint> chosen;
  // Seed with the most tilted normal, then farthest-point in angle.
  std::size_t seed = 0;
  double best = -1.0;
  for (std::size_t i = 0; i < cand.size(); ++i) {
    const double tilt = angle_between_deg(cand[i].normal, Vec3::UnitZ());
    if (tilt > best + 1e-12) {
      best = tilt;
      seed = i;
    }
  }
  chosen.push_back(cand[seed]);
  std::vector<double> min_angle(cand.size());
  for (std::size_t i = 0; i < cand.size(); ++i) min_angle[i] = angle_between_deg(cand[i].normal, cand[seed].normal);
  while (static_cast<int>(chosen.size()) < max_points) {
    std::size_t arg = 0;
    double far = -1.0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
      if (min_angle[i] > far + 1e-12) {
        far = min_angle[i];
        arg = i;
      }
    }
    if (far < min_angle_deg) break;
    chosen.push_back(cand[arg]);
    for (std::size_t i = 0; i < cand.size(); ++i) {
      min_angle[i] = std::min(min_angle[i], angle_between_deg(cand[i].normal, cand[arg].normal));
    }
  }
  if (chosen.size() < 3) {
    std::ostringstream os;
    os << "only " << chosen.size() << " normal direction(s) separated by >= " << min_angle_deg << " deg";
    throw Error(ErrorKind::FlatInterface, os.str());
  }
  return chosen;
}

}  // namespace strata
