#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "strata/geometry.hpp"

namespace strata {

struct VtkField {
  std::string name;
  std::vector<double> values;
  int components = 1;
};

/// Legacy ASCII unstructured grid with the region tag as cell data. Values are
/// printed with %.17g and no timestamp, so output is reproducible.
/// Throws Error{MeshMismatch} if a field has the wrong length.
void write_vtk(std::ostream& out, const Mesh& mesh, const std::vector<VtkField>& point_data = {},
               const std::vector<VtkField>& cell_data = {}, std::string_view title = "strata");

/// Lower-case hex SHA-256.
std::string sha256_hex(std::string_view bytes);
/// Throws Error{Io}.
std::string sha256_file(const std::filesystem::path& path);

/// Writes `text` to `path`, creating parent directories. Throws Error{Io}.
void write_text_file(const std::filesystem::path& path, std::string_view text);
/// Throws Error{Io}.
std::string read_text_file(const std::filesystem::path& path);

}  // namespace strata
