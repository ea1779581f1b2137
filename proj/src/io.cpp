#include "strata/io.hpp"

#include <array>
#include <cstdio>
#include <fstream>
#include <ostream>
#include <sstream>

#include <openssl/evp.h>

#include "strata/error.hpp"

namespace strata {

namespace {

std::string fmt(double v) {
  std::array<char, 32> buf{};
  std::snprintf(buf.data(), buf.size(), "%.17g", v);
  return buf.data();
}

void write_field(std::ostream& out, const VtkField& f, std::size_t count) {
  if (f.components < 1 || f.values.size() != count * static_cast<std::size_t>(f.components))
    throw Error(ErrorKind::MeshMismatch, "VTK field '" + f.name + "' has the wrong length");
  if (f.components == 1) {
    out << "SCALARS " << f.name << " double 1\nLOOKUP_TABLE default\n";
  } else {
    out << "FIELD fields 1\n" << f.name << ' ' << f.components << ' ' << count << " double\n";
  }
  for (std::size_t i = 0; i < count; ++i) {
    for (int c = 0; c < f.components; ++c) {
      if (c) out << ' ';
      out << fmt(f.values[i * static_cast<std::size_t>(f.components) + static_cast<std::size_t>(c)]);
    }
    out << '\n';
  }
}

}  // namespace

void write_vtk(std::ostream& out, const Mesh& mesh, const std::vector<VtkField>& point_data,
               const std::vector<VtkField>& cell_data, std::string_view title) {
  out << "# vtk DataFile Version 3.0\n" << title << "\nASCII\nDATASET UNSTRUCTURED_GRID\n";
  out << "POINTS " << mesh.num_vertices() << " double\n";
  for (const auto& v : mesh.vertices) out << fmt(v.x()) << ' ' << fmt(v.y()) << ' ' << fmt(v.z()) << '\n';
  out << "CELLS " << mesh.num_tets() << ' ' << 5 * mesh.num_tets() << '\n';
  for (const auto& t : mesh.tets) out << "4 " << t[0] << ' ' << t[1] << ' ' << t[2] << ' ' << t[3] << '\n';
  out << "CELL_TYPES " << mesh.num_tets() << '\n';
  for (std::size_t e = 0; e < mesh.num_tets(); ++e) out << "10\n";

  out << "CELL_DATA " << mesh.num_tets() << '\n';
  out << "SCALARS region int 1\nLOOKUP_TABLE default\n";
  for (int tag : mesh.region_tags) out << tag << '\n';
  for (const auto& f : cell_data) write_field(out, f, mesh.num_tets());
  if (!point_data.empty()) {
    out << "POINT_DATA " << mesh.num_vertices() << '\n';
    for (const auto& f : point_data) write_field(out, f, mesh.num_vertices());
  }
  if (!out) throw Error(ErrorKind::Io, "VTK write failed");
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error(ErrorKind::Io, "SHA-256 failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(hex[md[i] >> 4]);
    out.push_back(hex[md[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_text_file(path)); }

void write_text_file(const std::filesystem::path& path, std::string_view text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  if (ec) throw Error(ErrorKind::Io, "cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::Io, "cannot open " + path.string() + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw Error(ErrorKind::Io, "write to " + path.string() + " failed");
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace strata
