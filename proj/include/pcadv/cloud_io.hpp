#pragma once

#include <filesystem>
#include <string_view>

#include "pcadv/pointcloud.hpp"

namespace pcadv {

enum class CloudFormat { xyz, ply_ascii };

CloudFormat parse_cloud_format(std::string_view name);
/// Picks the format from the extension (".ply" -> ply_ascii, anything else xyz).
CloudFormat format_from_extension(const std::filesystem::path& path);
const char* extension(CloudFormat format);

/// xyz: one "x y z" line per point. ply_ascii: vertex-only ascii PLY.
/// Malformed input raises ParseError carrying the offending line number.
PointCloud load_cloud(const std::filesystem::path& path, CloudFormat format);
void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format);

}  // namespace pcadv
