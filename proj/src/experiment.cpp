#include "strata/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <random>
#include <set>
#include <sstream>

#include <Eigen/Geometry>
#include <json.hpp>

#include "strata/io.hpp"

namespace strata {

using nlohmann::ordered_json;
namespace fs = std::filesystem;

std::string_view to_string(Command c) {
  switch (c) {
    case Command::Forward: return "forward";
    case Command::NDMap: return "ndmap";
    case Command::Alessandrini: return "alessandrini";
    case Command::Gauge: return "gauge";
    case Command::Tangent: return "tangent";
    case Command::Invert: return "invert";
  }
  return "unknown";
}

bool ExperimentSpec::randomized() const {
  switch (command) {
    case Command::Alessandrini:
    case Command::Tangent: return true;
    case Command::Invert: return jacobian_directions > 0;
    default: return false;
  }
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ConfigParse: return 2;
    case ErrorKind::SolverDiverged:
    case ErrorKind::SingularTensor:
    case ErrorKind::InverseMapDiverged: return 4;
    case ErrorKind::InsufficientNormals:
    case ErrorKind::NotConsistent:
    case ErrorKind::LineSearchFailed:
    case ErrorKind::HitEllipticityBound:
    case ErrorKind::NonIdentifiable:
    case ErrorKind::MeshingFailed:
    case ErrorKind::MaxIterations: return 5;
    case ErrorKind::Io: return 1;
    default: return 3;
  }
}

namespace {

using json = nlohmann::json;

[[noreturn]] void invalid(const std::string& where, const std::string& what) {
  throw Error(ErrorKind::ConfigValidation, where + ": " + what);
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) invalid(where, "expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items())
    if (!ok.count(key)) invalid(where, "unknown key '" + key + "'");
}

double number(const json& v, const std::string& where) {
  if (!v.is_number()) invalid(where, "expected a number");
  const double d = v.get<double>();
  if (!std::isfinite(d)) invalid(where, "expected a finite number");
  return d;
}

int integer(const json& v, const std::string& where) {
  if (!v.is_number_integer()) invalid(where, "expected an integer");
  return v.get<int>();
}

template <typename T, typename F>
void optional_field(const json& obj, const char* key, const std::string& where, T& out, F&& convert) {
  if (obj.contains(key)) out = convert(obj.at(key), where + "." + key);
}

std::vector<double> number_list(const json& v, const std::string& where, std::size_t n = 0) {
  if (!v.is_array()) invalid(where, "expected an array");
  if (n && v.size() != n) invalid(where, "expected " + std::to_string(n) + " numbers");
  std::vector<double> out;
  for (std::size_t i = 0; i < v.size(); ++i) out.push_back(number(v[i], where + "[" + std::to_string(i) + "]"));
  return out;
}

Vec3 vec3(const json& v, const std::string& where) {
  const auto x = number_list(v, where, 3);
  return {x[0], x[1], x[2]};
}

std::vector<CosineMode> modes(const json& v, const std::string& where) {
  if (!v.is_array()) invalid(where, "expected an array of [i, j, amplitude]");
  std::vector<CosineMode> out;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const std::string w = where + "[" + std::to_string(k) + "]";
    if (!v[k].is_array() || v[k].size() != 3) invalid(w, "expected [i, j, amplitude]");
    out.push_back({integer(v[k][0], w), integer(v[k][1], w), number(v[k][2], w)});
  }
  return out;
}

void parse_region(const json& r, StrataRegionSpec& spec) {
  const std::string w = "region";
  check_keys(r, w, {"radius", "cap_height", "footprint", "top", "interfaces", "min_gap"});
  optional_field(r, "radius", w, spec.radius, number);
  optional_field(r, "cap_height", w, spec.cap_height, number);
  if (r.contains("footprint")) {
    const auto& f = r.at("footprint");
    if (f == "disk") spec.footprint = Footprint::Disk;
    else if (f == "square") spec.footprint = Footprint::Square;
    else invalid(w + ".footprint", "expected \"disk\" or \"square\"");
  }
  if (r.contains("top")) {
    const auto& t = r.at("top");
    check_keys(t, w + ".top", {"offset", "modes"});
    optional_field(t, "offset", w + ".top", spec.top_offset, number);
    optional_field(t, "modes", w + ".top", spec.top_modes, modes);
  }
  if (r.contains("interfaces")) {
    const auto& list = r.at("interfaces");
    if (!list.is_array()) invalid(w + ".interfaces", "expected an array");
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string wi = w + ".interfaces[" + std::to_string(k) + "]";
      check_keys(list[k], wi, {"offset", "modes"});
      StrataRegionSpec::InterfaceSpec s;
      if (!list[k].contains("offset")) invalid(wi, "missing 'offset'");
      s.offset = number(list[k].at("offset"), wi + ".offset");
      optional_field(list[k], "modes", wi, s.modes, modes);
      spec.interfaces.push_back(std::move(s));
    }
  }
  if (r.contains("min_gap")) spec.min_gap = number(r.at("min_gap"), w + ".min_gap");
  if (!(spec.radius > 0.0)) invalid(w + ".radius", "must be positive");
  if (!(spec.cap_height > 0.0)) invalid(w + ".cap_height", "must be positive");
}

void parse_model(const json& m, ExperimentSpec& spec) {
  const std::string w = "model";
  check_keys(m, w, {"tensors", "lambda", "jump_tolerance", "enforce_jump"});
  if (m.contains("tensors")) {
    const auto& list = m.at("tensors");
    if (!list.is_array()) invalid(w + ".tensors", "expected an array");
    for (std::size_t k = 0; k < list.size(); ++k) {
      const auto u = number_list(list[k], w + ".tensors[" + std::to_string(k) + "]", 6);
      spec.tensors.emplace_back(std::array<double, 6>{u[0], u[1], u[2], u[3], u[4], u[5]});
    }
  }
  optional_field(m, "lambda", w, spec.model.lambda, number);
  optional_field(m, "jump_tolerance", w, spec.model.jump_tolerance, number);
  if (m.contains("enforce_jump")) {
    if (!m.at("enforce_jump").is_boolean()) invalid(w + ".enforce_jump", "expected a boolean");
    spec.model.enforce_jump = m.at("enforce_jump").get<bool>();
  }
}

void parse_mesh(const json& m, ExperimentSpec& spec) {
  const std::string w = "mesh";
  check_keys(m, w, {"h", "sigma_radius", "sublayers"});
  if (m.contains("h")) {
    const auto& h = m.at("h");
    spec.h = h.is_array() ? number_list(h, w + ".h") : std::vector<double>{number(h, w + ".h")};
    if (spec.h.empty()) invalid(w + ".h", "needs at least one value");
    for (double v : spec.h)
      if (!(v > 0.0)) invalid(w + ".h", "must be positive");
  }
  optional_field(m, "sigma_radius", w, spec.sigma_radius, number);
  if (m.contains("sublayers")) {
    const auto& s = m.at("sublayers");
    if (!s.is_array()) invalid(w + ".sublayers", "expected an array");
    spec.sublayers.clear();
    for (std::size_t k = 0; k < s.size(); ++k) spec.sublayers.push_back(integer(s[k], w + ".sublayers"));
  }
}

void parse_invert(const json& v, ExperimentSpec& spec, const fs::path& base_dir) {
  const std::string w = "invert";
  check_keys(v, w,
             {"data", "interface_modes", "sublayers_per_layer", "k_max", "accept_ratio", "jump_tolerance",
              "misfit_floor", "max_iterations", "tensor_jacobian", "jacobian_check"});
  if (v.contains("data")) {
    if (!v.at("data").is_string()) invalid(w + ".data", "expected a path");
    fs::path p = v.at("data").get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    if (!fs::exists(p)) invalid(w + ".data", "file not found: " + p.string());
    spec.data_path = p;
  }
  if (v.contains("interface_modes")) {
    const auto& list = v.at("interface_modes");
    if (!list.is_array()) invalid(w + ".interface_modes", "expected an array of [i, j]");
    spec.interface_modes.clear();
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string wi = w + ".interface_modes[" + std::to_string(k) + "]";
      if (!list[k].is_array() || list[k].size() != 2) invalid(wi, "expected [i, j]");
      spec.interface_modes.push_back({integer(list[k][0], wi), integer(list[k][1], wi)});
    }
  }
  optional_field(v, "sublayers_per_layer", w, spec.sublayers_per_layer, integer);
  optional_field(v, "k_max", w, spec.strip.k_max, integer);
  optional_field(v, "accept_ratio", w, spec.strip.accept_ratio, number);
  optional_field(v, "jump_tolerance", w, spec.strip.jump_tolerance, number);
  optional_field(v, "misfit_floor", w, spec.strip.misfit_floor, number);
  optional_field(v, "max_iterations", w, spec.strip.fit.max_iterations, integer);
  if (v.contains("tensor_jacobian")) {
    const auto& t = v.at("tensor_jacobian");
    if (t == "analytic") spec.strip.fit.tensor_jacobian = TensorJacobian::Analytic;
    else if (t == "forward_difference") spec.strip.fit.tensor_jacobian = TensorJacobian::ForwardDifference;
    else invalid(w + ".tensor_jacobian", "expected \"analytic\" or \"forward_difference\"");
  }
  if (v.contains("jacobian_check")) {
    const auto& j = v.at("jacobian_check");
    check_keys(j, w + ".jacobian_check", {"directions", "step"});
    optional_field(j, "directions", w + ".jacobian_check", spec.jacobian_directions, integer);
    optional_field(j, "step", w + ".jacobian_check", spec.jacobian_step, number);
  }
  if (spec.strip.k_max < 0) invalid(w + ".k_max", "must be non-negative");
  if (spec.sublayers_per_layer < 1) invalid(w + ".sublayers_per_layer", "must be at least 1");
}

}  // namespace

ExperimentSpec parse_experiment(std::string_view json_text, const fs::path& base_dir) {
  json root;
  try {
    root = json::parse(json_text.begin(), json_text.end());
  } catch (const json::parse_error& e) {
    throw Error(ErrorKind::ConfigParse, e.what());
  }
  check_keys(root, "config",
             {"command", "region", "model", "diffeo", "mesh", "basis", "solver", "forward", "alessandrini", "tangent",
              "invert"});
  ExperimentSpec spec;
  if (!root.contains("command") || !root.at("command").is_string()) invalid("config", "missing 'command'");
  const std::string cmd = root.at("command").get<std::string>();
  bool known = false;
  for (Command c : {Command::Forward, Command::NDMap, Command::Alessandrini, Command::Gauge, Command::Tangent,
                    Command::Invert}) {
    if (cmd == to_string(c)) {
      spec.command = c;
      known = true;
    }
  }
  if (!known) invalid("command", "unknown command '" + cmd + "'");

  if (root.contains("region")) parse_region(root.at("region"), spec.region);
  if (root.contains("model")) parse_model(root.at("model"), spec);
  if (root.contains("diffeo")) {
    const auto& list = root.at("diffeo");
    if (!list.is_array()) invalid("diffeo", "expected an array of bumps");
    for (std::size_t k = 0; k < list.size(); ++k) {
      const std::string w = "diffeo[" + std::to_string(k) + "]";
      check_keys(list[k], w, {"center", "half_widths", "direction", "amplitude"});
      BumpDisplacement b;
      optional_field(list[k], "center", w, b.center, vec3);
      optional_field(list[k], "half_widths", w, b.half_widths, vec3);
      optional_field(list[k], "direction", w, b.direction, vec3);
      optional_field(list[k], "amplitude", w, b.amplitude, number);
      spec.diffeo.push_back(b);
    }
  }
  if (root.contains("mesh")) parse_mesh(root.at("mesh"), spec);
  if (root.contains("basis")) {
    const auto& b = root.at("basis");
    check_keys(b, "basis", {"rings", "sectors_per_ring", "max_gram_condition"});
    optional_field(b, "rings", "basis", spec.basis.rings, integer);
    optional_field(b, "sectors_per_ring", "basis", spec.basis.sectors_per_ring, integer);
    optional_field(b, "max_gram_condition", "basis", spec.basis.max_gram_condition, number);
  }
  if (root.contains("solver")) {
    const auto& s = root.at("solver");
    check_keys(s, "solver", {"direct_limit", "cg_tolerance", "cg_max_iterations", "residual_tolerance"});
    if (s.contains("direct_limit")) spec.solver.direct_limit = static_cast<std::size_t>(integer(s.at("direct_limit"), "solver.direct_limit"));
    optional_field(s, "cg_tolerance", "solver", spec.solver.cg_tolerance, number);
    optional_field(s, "cg_max_iterations", "solver", spec.solver.cg_max_iterations, integer);
    optional_field(s, "residual_tolerance", "solver", spec.solver.residual_tolerance, number);
  }
  if (root.contains("forward")) {
    const auto& f = root.at("forward");
    check_keys(f, "forward", {"patterns"});
    if (f.contains("patterns")) {
      const auto& p = f.at("patterns");
      if (!p.is_array() || p.empty()) invalid("forward.patterns", "expected a non-empty array");
      spec.forward_patterns.clear();
      for (const auto& x : p) spec.forward_patterns.push_back(integer(x, "forward.patterns"));
    }
  }
  if (root.contains("alessandrini")) {
    const auto& a = root.at("alessandrini");
    check_keys(a, "alessandrini", {"pairs"});
    optional_field(a, "pairs", "alessandrini", spec.alessandrini_pairs, integer);
  }
  if (root.contains("tangent")) {
    const auto& t = root.at("tangent");
    check_keys(t, "tangent", {"cases", "normals"});
    optional_field(t, "cases", "tangent", spec.tangent_cases, integer);
    optional_field(t, "normals", "tangent", spec.tangent_normals, integer);
    if (spec.tangent_normals < 1) invalid("tangent.normals", "must be at least 1");
  }
  if (root.contains("invert")) parse_invert(root.at("invert"), spec, base_dir);

  const bool needs_model = spec.command == Command::Forward || spec.command == Command::NDMap ||
                           spec.command == Command::Gauge ||
                           (spec.command == Command::Invert && !spec.data_path);
  if (needs_model && spec.tensors.size() != spec.region.interfaces.size() + 1)
    invalid("model.tensors", "expected " + std::to_string(spec.region.interfaces.size() + 1) +
                                 " tensors (one per layer)");
  if (spec.command == Command::Gauge && spec.h.size() < 2) invalid("mesh.h", "gauge needs at least two resolutions");
  return spec;
}

ExperimentSpec load_experiment(const fs::path& path) {
  return parse_experiment(read_text_file(path), path.parent_path());
}

namespace {

std::string hex_id(std::uint64_t id) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016" PRIx64, id);
  return buf;
}

ordered_json tensor_json(const AnisoTensor& t) {
  ordered_json a = ordered_json::array();
  for (double v : t.upper()) a.push_back(v);
  return a;
}

ordered_json interface_json(const Interface& i) {
  ordered_json m = ordered_json::array();
  for (const auto& mode : i.modes()) m.push_back({mode.i, mode.j, mode.amplitude});
  return {{"offset", i.offset()}, {"modes", m}};
}

ordered_json mesh_json(const Mesh& mesh) {
  return {{"vertices", mesh.num_vertices()},
          {"tets", mesh.num_tets()},
          {"sigma_area", mesh.tagged_area(FacetTag::Sigma)},
          {"id", hex_id(mesh.id)}};
}

class Runner {
 public:
  Runner(const ExperimentSpec& spec, const RunOptions& opt) : spec_(spec), opt_(opt) {
    nd_.solver = spec.solver;
    nd_.threads = std::max(1u, opt.threads);
    start_ = std::chrono::steady_clock::now();
  }

  RunResult run() {
    if (spec_.randomized() && !opt_.seed)
      throw Error(ErrorKind::ConfigValidation, std::string(to_string(spec_.command)) + " is randomized and needs --seed");
    log("command " + std::string(to_string(spec_.command)));
    switch (spec_.command) {
      case Command::Forward: forward(); break;
      case Command::NDMap: ndmap(); break;
      case Command::Alessandrini: alessandrini(); break;
      case Command::Gauge: gauge(); break;
      case Command::Tangent: tangent(); break;
      case Command::Invert: invert(); break;
    }
    return finish();
  }

 private:
  void log(const std::string& msg) const {
    if (!opt_.log || !opt_.verbose) return;
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    char buf[32];
    std::snprintf(buf, sizeof buf, "[%8.2fs] ", t);
    *opt_.log << buf << msg << '\n';
  }

  void emit(const fs::path& rel, const std::string& text) {
    write_text_file(opt_.out_dir / rel, text);
    artifacts_.push_back(rel);
    log("wrote " + rel.string());
  }

  void emit_json(const fs::path& rel, const ordered_json& j) { emit(rel, j.dump(2) + "\n"); }

  StrataRegion region() const { return build_strata_region(spec_.region); }

  StrataModel model(const StrataRegion& r) const { return StrataModel(r, spec_.tensors, spec_.model); }

  Mesh mesh(const StrataRegion& r, double h) const {
    MeshOptions mo;
    mo.h = h;
    mo.sigma_radius = spec_.sigma_radius;
    mo.sublayers = spec_.sublayers;
    return mesh_region(r, mo);
  }

  ordered_json header() const {
    ordered_json j;
    j["command"] = to_string(spec_.command);
    if (spec_.randomized()) j["seed"] = *opt_.seed;
    return j;
  }

  void forward() {
    const StrataRegion r = region();
    const StrataModel m = model(r);
    const Mesh msh = mesh(r, spec_.h.front());
    const FluxBasis basis = make_dipole_basis(msh, spec_.basis);
    const StiffnessSystem sys = StiffnessSystem::assemble(msh, m, spec_.solver, nd_.threads);
    log("assembled " + std::to_string(msh.num_tets()) + " tets");
    ordered_json rep = header();
    rep["mesh"] = mesh_json(msh);
    rep["solver"] = sys.uses_direct_solver() ? "direct" : "cg";
    std::vector<VtkField> fields;
    std::vector<std::vector<double>> traces;
    ordered_json sols = ordered_json::array();
    for (int p : spec_.forward_patterns) {
      if (p < 0 || static_cast<std::size_t>(p) >= basis.size())
        throw Error(ErrorKind::ConfigValidation, "forward.patterns: index " + std::to_string(p) + " out of range");
      const NeumannSolution s = solve_neumann(msh, sys, basis[static_cast<std::size_t>(p)]);
      sols.push_back({{"pattern", p},
                      {"energy", energy(sys, s.u)},
                      {"relative_residual", s.relative_residual},
                      {"multiplier", s.multiplier}});
      fields.push_back({"u_" + std::to_string(p), std::vector<double>(s.u.data(), s.u.data() + s.u.size())});
      traces.push_back(boundary_trace(msh, s.u));
    }
    rep["solutions"] = sols;
    emit_json("report.json", rep);
    emit("forward.vtk", [&] {
      std::ostringstream o;
      write_vtk(o, msh, fields);
      return o.str();
    }());
    std::ostringstream csv;
    csv << "facet,x,y,z";
    for (int p : spec_.forward_patterns) csv << ",u_" << p;
    csv << '\n';
    const auto sf = sigma_facets(msh);
    char buf[32];
    for (std::size_t k = 0; k < sf.size(); ++k) {
      const Vec3 c = msh.facet_centroid(sf[k]);
      csv << sf[k];
      for (double v : {c.x(), c.y(), c.z()}) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        csv << ',' << buf;
      }
      for (const auto& t : traces) {
        std::snprintf(buf, sizeof buf, "%.17g", t[k]);
        csv << ',' << buf;
      }
      csv << '\n';
    }
    emit("traces.csv", csv.str());
  }

  void ndmap() {
    const StrataRegion r = region();
    const StrataModel m = model(r);
    const Mesh msh = mesh(r, spec_.h.front());
    const FluxBasis basis = make_dipole_basis(msh, spec_.basis);
    const NDMatrix nd = build_nd(msh, m, basis, nd_);
    log("N-D matrix " + std::to_string(nd.size()) + "x" + std::to_string(nd.size()));
    ordered_json rep = header();
    rep["mesh"] = mesh_json(msh);
    rep["patterns"] = basis.size();
    rep["gram_condition"] = basis.gram_condition();
    rep["asymmetry"] = nd.asymmetry();
    rep["symmetric"] = nd.asymmetry() <= 1e-10;
    rep["min_eigenvalue"] = nd.min_eigenvalue();
    rep["frobenius_norm"] = nd.N.norm();
    rep["model_id"] = hex_id(nd.model_id);
    rep["basis_id"] = hex_id(nd.basis_id);
    emit_json("report.json", rep);
    std::ostringstream csv;
    write_nd_csv(csv, nd);
    emit("nd.csv", csv.str());
    std::ostringstream vtk;
    write_vtk(vtk, msh);
    emit("mesh.vtk", vtk.str());
  }

  static AnisoTensor random_tensor(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(-1.0, 1.0), ev(0.3, 4.0);
    const Eigen::Quaterniond q = Eigen::Quaterniond(u(rng), u(rng), u(rng), u(rng)).normalized();
    const Mat3 Q = q.toRotationMatrix();
    return AnisoTensor::from_matrix(Q * Eigen::Vector3d(ev(rng), ev(rng), ev(rng)).asDiagonal() * Q.transpose());
  }

  void alessandrini() {
    const StrataRegion r = region();
    const Mesh msh = mesh(r, spec_.h.front());
    const FluxBasis basis = make_dipole_basis(msh, spec_.basis);
    std::mt19937_64 rng(*opt_.seed);
    ModelOptions mo = spec_.model;
    mo.enforce_jump = false;
    ordered_json pairs = ordered_json::array();
    double worst = 0.0;
    for (int p = 0; p < spec_.alessandrini_pairs; ++p) {
      std::vector<AnisoTensor> t1, t2;
      for (int k = 0; k < r.num_layers(); ++k) t1.push_back(random_tensor(rng));
      for (int k = 0; k < r.num_layers(); ++k) t2.push_back(random_tensor(rng));
      const AlessandriniGap g = alessandrini_gap(msh, StrataModel(r, t1, mo), StrataModel(r, t2, mo), basis, nd_);
      worst = std::max(worst, g.residual);
      pairs.push_back({{"pair", p}, {"residual", g.residual}, {"lhs_norm", g.lhs.norm()}});
      log("pair " + std::to_string(p));
    }
    ordered_json rep = header();
    rep["mesh"] = mesh_json(msh);
    rep["patterns"] = basis.size();
    rep["pairs"] = pairs;
    rep["max_residual"] = worst;
    rep["within_1e-9"] = worst <= 1e-9;
    emit_json("report.json", rep);
  }

  void gauge() {
    const StrataRegion r = region();
    const StrataModel m = model(r);
    Diffeo psi;
    for (const auto& b : spec_.diffeo) psi = psi.then(Diffeo::bump(b));
    ordered_json levels = ordered_json::array();
    std::vector<double> gaps;
    GaugeGap last;
    for (double h : spec_.h) {
      const Mesh msh = mesh(r, h);
      const FluxBasis basis = make_dipole_basis(msh, spec_.basis);
      last = gauge_counterexample_gap(msh, m, psi, basis, nd_);
      gaps.push_back(last.gap);
      levels.push_back({{"h", h}, {"tets", msh.num_tets()}, {"patterns", basis.size()}, {"gap", last.gap}});
      log("h " + std::to_string(h) + " gap " + std::to_string(last.gap));
    }
    ordered_json ratios = ordered_json::array();
    for (std::size_t i = 1; i < gaps.size(); ++i) ratios.push_back(gaps[i - 1] > 0.0 ? gaps[i] / gaps[i - 1] : 0.0);
    bool non_flat = r.top_surface().non_flat();
    for (const auto& i : r.interfaces()) non_flat = non_flat || i.non_flat();
    ordered_json rep = header();
    rep["identity_map"] = psi.is_identity();
    rep["non_flat_geometry"] = non_flat;
    rep["levels"] = levels;
    rep["ratios"] = ratios;
    rep["finest_gap"] = gaps.back();
    emit_json("report.json", rep);
    std::ostringstream a, b;
    write_nd_csv(a, last.original);
    write_nd_csv(b, last.pushed);
    emit("nd_original.csv", a.str());
    emit("nd_pushed.csv", b.str());
  }

  void tangent() {
    std::mt19937_64 rng(*opt_.seed);
    std::normal_distribution<double> normal;
    auto unit_upper = [&] {
      // Upper hemisphere, away from the frame singularity.
      Vec3 n(normal(rng), normal(rng), std::abs(normal(rng)) + 0.2);
      return Vec3(n.normalized());
    };
    double worst = 0.0;
    int failures = 0;
    for (int c = 0; c < spec_.tangent_cases; ++c) {
      const AnisoTensor sigma = random_tensor(rng);
      const Mat3 g = metric_of(sigma);
      std::vector<TangentialSample> samples;
      while (static_cast<int>(samples.size()) < spec_.tangent_normals) {
        const Vec3 n = unit_upper();
        bool distinct = true;
        for (const auto& s : samples) distinct = distinct && angle_between_deg(s.normal, n) >= 10.0;
        if (distinct) samples.push_back({Vec3::Zero(), n, tangential_submatrix(g, n).block});
      }
      try {
        const TensorRecovery rec = recover_tensor_from_tangential(samples);
        worst = std::max(worst, frobenius_distance(rec.sigma, sigma) / sigma.matrix().norm());
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::InsufficientNormals) throw;
        ++failures;
      }
    }
    // A single normal can never determine the metric.
    bool single_rejected = false;
    {
      const Mat3 g = metric_of(random_tensor(rng));
      const Vec3 n = unit_upper();
      const TangentialSample s{Vec3::Zero(), n, tangential_submatrix(g, n).block};
      try {
        recover_tensor_from_tangential({s, s, s});
      } catch (const Error& e) {
        single_rejected = e.kind() == ErrorKind::InsufficientNormals;
      }
    }
    ordered_json rep = header();
    rep["cases"] = spec_.tangent_cases;
    rep["normals_per_case"] = spec_.tangent_normals;
    rep["rank_deficient_cases"] = failures;
    rep["max_relative_error"] = worst;
    rep["single_normal_rejected"] = single_rejected;
    emit_json("report.json", rep);
  }

  void invert() {
    InversionSetup setup;
    setup.radius = spec_.region.radius;
    setup.cap_height = spec_.region.cap_height;
    setup.footprint = spec_.region.footprint;
    setup.top_offset = spec_.region.top_offset;
    setup.top_modes = spec_.region.top_modes;
    setup.min_gap = spec_.region.min_gap;
    setup.h = spec_.h.front();
    setup.sigma_radius = spec_.sigma_radius;
    setup.sublayers_per_layer = spec_.sublayers_per_layer;
    setup.interface_modes = spec_.interface_modes;
    setup.basis = spec_.basis;

    std::optional<StrataModel> truth;
    if (spec_.tensors.size() == spec_.region.interfaces.size() + 1) truth.emplace(model(region()));
    NDMatrix data;
    if (spec_.data_path) {
      std::istringstream in(read_text_file(*spec_.data_path));
      data = read_nd_csv(in);
      log("read " + spec_.data_path->filename().string());
    } else {
      const Mesh msh = setup.mesh(truth->region());
      data = build_nd(msh, *truth, make_dipole_basis(msh, setup.basis), nd_);
      std::ostringstream csv;
      write_nd_csv(csv, data);
      emit("nd_data.csv", csv.str());
    }

    StripOptions so = spec_.strip;
    so.fit.lambda = spec_.model.lambda;
    so.fit.nd = nd_;
    const StripResult res = strip_layers(data, setup, so);
    const InversionReport& r = res.report;
    log("inversion finished, K = " + std::to_string(r.num_interfaces));

    ordered_json rep = header();
    rep["recovered_interfaces"] = r.num_interfaces;
    ordered_json ifaces = ordered_json::array();
    for (const auto& i : r.interfaces) ifaces.push_back(interface_json(i));
    rep["interfaces"] = ifaces;
    ordered_json tens = ordered_json::array();
    for (const auto& t : r.tensors) tens.push_back(tensor_json(t));
    rep["tensors"] = tens;
    rep["misfit"] = r.misfit;
    rep["misfit_history"] = r.misfit_history;
    ordered_json runs = ordered_json::array();
    for (const auto& run : r.runs) runs.push_back({{"label", run.label}, {"misfits", run.misfits}});
    rep["runs"] = runs;
    ordered_json stages = ordered_json::array();
    for (const auto& s : r.stages) {
      stages.push_back({{"k", s.k},
                        {"accepted", s.accepted},
                        {"misfit_before", s.misfit_before},
                        {"misfit_after", s.misfit_after},
                        {"jump", s.jump},
                        {"interface_coefficients", s.interface_coefficients},
                        {"tensor_below", s.tensor_below},
                        {"decision", s.decision}});
    }
    rep["stages"] = stages;
    rep["stopping_reason"] = r.stopping_reason;
    rep["identifiability"] = {{"verdict", r.identifiable ? "IDENTIFIABLE" : "NON-IDENTIFIABLE"},
                              {"notes", r.identifiability_notes},
                              {"jacobian_condition", std::isfinite(r.jacobian_condition)
                                                         ? ordered_json(r.jacobian_condition)
                                                         : ordered_json("inf")}};
    rep["iterations"] = r.total_iterations;

    if (truth) {
      ordered_json cmp;
      const int K = truth->region().num_interfaces();
      cmp["interfaces"] = K;
      cmp["k_matches"] = K == r.num_interfaces;
      if (K == r.num_interfaces) {
        ordered_json terr = ordered_json::array();
        for (int k = 0; k <= K; ++k) {
          const auto& t = truth->tensors()[static_cast<std::size_t>(k)];
          terr.push_back(frobenius_distance(r.tensors[static_cast<std::size_t>(k)], t) / t.matrix().norm());
        }
        ordered_json cerr = ordered_json::array();
        for (int k = 0; k < K; ++k) {
          const Interface want = truth->region().interfaces()[static_cast<std::size_t>(k)];
          const auto got = r.interfaces[static_cast<std::size_t>(k)].coefficients();
          double e = std::abs(got[0] - want.offset());
          for (std::size_t q = 0; q < setup.interface_modes.size(); ++q) {
            double a = 0.0;
            for (const auto& md : want.modes())
              if (md.i == setup.interface_modes[q][0] && md.j == setup.interface_modes[q][1]) a = md.amplitude;
            e = std::max(e, std::abs(got[q + 1] - a));
          }
          cerr.push_back(e / setup.cap_height);
        }
        cmp["tensor_relative_errors"] = terr;
        cmp["coefficient_errors_over_M"] = cerr;
      }
      rep["truth_comparison"] = cmp;
    }

    if (spec_.jacobian_directions > 0) {
      const JacobianCheck jc =
          jacobian_check(data, setup, res.model, spec_.jacobian_directions, *opt_.seed, spec_.jacobian_step, so.fit);
      rep["jacobian_check"] = {{"directions", spec_.jacobian_directions},
                               {"step", spec_.jacobian_step},
                               {"relative_errors", jc.relative_errors},
                               {"max_error", jc.max_error}};
    }
    emit_json("report.json", rep);

    const Mesh fitted = setup.mesh(res.model.region());
    std::vector<double> comps;
    for (const Mat3& s : res.model.element_tensors(fitted))
      for (double v : {s(0, 0), s(0, 1), s(0, 2), s(1, 1), s(1, 2), s(2, 2)}) comps.push_back(v);
    std::ostringstream vtk;
    write_vtk(vtk, fitted, {}, {{"sigma", comps, 6}}, "strata recovered model");
    emit("model.vtk", vtk.str());
  }

  RunResult finish() {
    std::sort(artifacts_.begin(), artifacts_.end());
    ordered_json list = ordered_json::array();
    for (const auto& a : artifacts_) {
      const std::string body = read_text_file(opt_.out_dir / a);
      list.push_back({{"path", a.generic_string()}, {"bytes", body.size()}, {"sha256", sha256_hex(body)}});
    }
    ordered_json man = {{"command", to_string(spec_.command)}, {"artifacts", list}};
    const fs::path mpath = opt_.out_dir / "manifest.json";
    write_text_file(mpath, man.dump(2) + "\n");
    log("wrote manifest.json");
    return {artifacts_, mpath};
  }

  const ExperimentSpec& spec_;
  const RunOptions& opt_;
  NDOptions nd_;
  std::vector<fs::path> artifacts_;
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

RunResult run(const ExperimentSpec& spec, const RunOptions& options) {
  if (options.out_dir.empty()) throw Error(ErrorKind::ConfigValidation, "no output directory");
  return Runner(spec, options).run();
}

}  // namespace strata
