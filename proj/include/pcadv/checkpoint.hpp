#pragma once

#include <filesystem>
#include <optional>

#include "pcadv/models.hpp"

namespace pcadv {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary checkpoint: magic, format version, a JSON header describing the
/// architecture and array shapes, raw little-endian doubles, FNV-1a checksum.
void save_checkpoint(const AEModel& model, const std::filesystem::path& path);
/// Throws CheckpointError on truncation, version or shape mismatch, and when
/// `expected_points` is given but differs from the stored n.
AEModel load_checkpoint(const std::filesystem::path& path, std::optional<Index> expected_points = std::nullopt);

void save_classifier(const Classifier& classifier, const std::filesystem::path& path);
Classifier load_classifier(const std::filesystem::path& path);

}  // namespace pcadv
