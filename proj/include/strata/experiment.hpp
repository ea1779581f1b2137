#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "strata/conductivity.hpp"
#include "strata/error.hpp"
#include "strata/forward.hpp"
#include "strata/geometry.hpp"
#include "strata/identify.hpp"
#include "strata/ndmap.hpp"

namespace strata {

enum class Command { Forward, NDMap, Alessandrini, Gauge, Tangent, Invert };

std::string_view to_string(Command c);

/// One experiment, read from a JSON config (schema in README.md).
struct ExperimentSpec {
  Command command = Command::NDMap;
  StrataRegionSpec region;
  std::vector<AnisoTensor> tensors;
  ModelOptions model;
  /// Boundary-fixing map as a composition of bump stages (gauge only).
  std::vector<BumpDisplacement> diffeo;

  /// Mesh sizes; all commands but gauge use the first.
  std::vector<double> h = {0.125};
  double sigma_radius = 0.8;
  /// Sublayers per layer; empty means automatic.
  std::vector<int> sublayers;
  FluxBasisOptions basis;
  SolverOptions solver;

  std::vector<int> forward_patterns = {0};
  int alessandrini_pairs = 20;
  int tangent_cases = 100;
  int tangent_normals = 3;

  /// Measured N-D CSV; without it the data are synthesised from the model.
  std::optional<std::filesystem::path> data_path;
  std::vector<std::array<int, 2>> interface_modes = {{1, 0}, {0, 1}, {1, 1}};
  int sublayers_per_layer = 4;
  StripOptions strip;
  int jacobian_directions = 0;
  double jacobian_step = 1e-5;

  /// True if the outputs depend on a random seed.
  bool randomized() const;
};

/// Throws Error{ConfigParse} on malformed JSON and Error{ConfigValidation} on
/// unknown keys, wrong types or values out of range. Relative data paths are
/// resolved against `base_dir`.
ExperimentSpec parse_experiment(std::string_view json_text, const std::filesystem::path& base_dir = {});
ExperimentSpec load_experiment(const std::filesystem::path& path);

struct RunOptions {
  std::filesystem::path out_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;
  bool verbose = false;
  /// Progress and timing messages (never written to artifacts).
  std::ostream* log = nullptr;
};

struct RunResult {
  /// Relative to out_dir, sorted; the manifest itself is not listed.
  std::vector<std::filesystem::path> artifacts;
  std::filesystem::path manifest;
};

/// Runs the experiment, writes its artifacts and a manifest.json with a
/// SHA-256 per artifact. Reports and CSV files contain no timings, so serial
/// reruns with the same seed are byte-identical.
RunResult run(const ExperimentSpec& spec, const RunOptions& options);

/// 2 parse, 3 validation, 4 solver, 5 inversion, 1 I/O.
int exit_code_for(ErrorKind kind);

}  // namespace strata
