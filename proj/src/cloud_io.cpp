#include "pcadv/cloud_io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

namespace pcadv {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> tokens;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) tokens.push_back(line.substr(start, i - start));
  }
  return tokens;
}

double parse_real(std::string_view token, const std::string& path, std::size_t line) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size()) {
    throw ParseError(path, line, "non-numeric token '" + std::string(token) + "'");
  }
  if (!std::isfinite(value)) throw ParseError(path, line, "non-finite coordinate");
  return value;
}

Point3 parse_xyz_line(std::string_view text, const std::string& path, std::size_t line) {
  const auto tokens = split_ws(text);
  if (tokens.size() != 3) {
    throw ParseError(path, line, "expected 3 coordinates, found " + std::to_string(tokens.size()));
  }
  return {parse_real(tokens[0], path, line), parse_real(tokens[1], path, line), parse_real(tokens[2], path, line)};
}

Points to_points(const std::vector<Point3>& rows) {
  Points out(static_cast<Index>(rows.size()), 3);
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = rows[i];
  return out;
}

PointCloud read_xyz(std::istream& in, const std::string& path) {
  std::vector<Point3> rows;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (split_ws(text).empty()) continue;
    rows.push_back(parse_xyz_line(text, path, line));
  }
  if (rows.empty()) throw ParseError(path, line, "no points");
  return PointCloud(to_points(rows));
}

PointCloud read_ply(std::istream& in, const std::string& path) {
  std::string text;
  std::size_t line = 0;
  auto next = [&]() -> bool {
    if (!std::getline(in, text)) return false;
    ++line;
    return true;
  };

  if (!next() || split_ws(text) != std::vector<std::string_view>{"ply"}) {
    throw ParseError(path, line, "missing 'ply' magic");
  }
  if (!next() || split_ws(text) != std::vector<std::string_view>{"format", "ascii", "1.0"}) {
    throw ParseError(path, line, "expected 'format ascii 1.0'");
  }

  long long declared = -1;
  std::vector<std::string> properties;
  bool in_vertex = false;
  while (true) {
    if (!next()) throw ParseError(path, line, "unterminated header");
    const auto tokens = split_ws(text);
    if (tokens.empty()) continue;
    if (tokens[0] == "comment" || tokens[0] == "obj_info") continue;
    if (tokens[0] == "end_header") break;
    if (tokens[0] == "element") {
      if (tokens.size() != 3 || tokens[1] != "vertex" || declared >= 0) {
        throw ParseError(path, line, "only a single 'element vertex N' is supported");
      }
      const auto [ptr, ec] = std::from_chars(tokens[2].data(), tokens[2].data() + tokens[2].size(), declared);
      if (ec != std::errc() || ptr != tokens[2].data() + tokens[2].size() || declared < 0) {
        throw ParseError(path, line, "invalid vertex count");
      }
      in_vertex = true;
      continue;
    }
    if (tokens[0] == "property") {
      if (!in_vertex || tokens.size() != 3 || (tokens[1] != "float" && tokens[1] != "double" &&
                                              tokens[1] != "float32" && tokens[1] != "float64")) {
        throw ParseError(path, line, "unsupported property declaration");
      }
      properties.emplace_back(tokens[2]);
      continue;
    }
    throw ParseError(path, line, "unexpected header line '" + text + "'");
  }
  if (declared < 0) throw ParseError(path, line, "header declares no vertex element");
  if (properties != std::vector<std::string>{"x", "y", "z"}) {
    throw ParseError(path, line, "vertex properties must be exactly x y z");
  }

  std::vector<Point3> rows;
  rows.reserve(static_cast<std::size_t>(declared));
  while (next()) {
    if (split_ws(text).empty()) continue;
    if (static_cast<long long>(rows.size()) == declared) {
      throw ParseError(path, line, "vertex count mismatch: more than " + std::to_string(declared) + " vertices");
    }
    rows.push_back(parse_xyz_line(text, path, line));
  }
  if (static_cast<long long>(rows.size()) != declared) {
    throw ParseError(path, line,
                     "vertex count mismatch: header declares " + std::to_string(declared) + ", found " +
                         std::to_string(rows.size()));
  }
  if (rows.empty()) throw ParseError(path, line, "no points");
  return PointCloud(to_points(rows));
}

}  // namespace

CloudFormat parse_cloud_format(std::string_view name) {
  if (name == "xyz") return CloudFormat::xyz;
  if (name == "ply" || name == "ply-ascii") return CloudFormat::ply_ascii;
  throw InvalidInput("unknown cloud format '" + std::string(name) + "'");
}

CloudFormat format_from_extension(const std::filesystem::path& path) {
  return path.extension() == ".ply" ? CloudFormat::ply_ascii : CloudFormat::xyz;
}

const char* extension(CloudFormat format) { return format == CloudFormat::ply_ascii ? ".ply" : ".xyz"; }

PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path.string());
  return format == CloudFormat::xyz ? read_xyz(in, path.string()) : read_ply(in, path.string());
}

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format) {
  std::ostringstream out;
  out.precision(std::numeric_limits<double>::max_digits10);
  const Points& p = cloud.points();
  if (format == CloudFormat::ply_ascii) {
    out << "ply\nformat ascii 1.0\nelement vertex " << p.rows()
        << "\nproperty double x\nproperty double y\nproperty double z\nend_header\n";
  }
  for (Index i = 0; i < p.rows(); ++i) out << p(i, 0) << ' ' << p(i, 1) << ' ' << p(i, 2) << '\n';

  std::ofstream file(path, std::ios::binary);
  if (!file) throw InvalidInput("cannot write " + path.string());
  file << out.str();
  if (!file) throw InvalidInput("write failed for " + path.string());
}

}  // namespace pcadv
