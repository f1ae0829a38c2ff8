#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "difuzcam/types.hpp"

namespace difuzcam {

using Mosaic16 = Eigen::Matrix<std::uint16_t, Eigen::Dynamic, Eigen::Dynamic>;

/// 8-bit RGB PNG; values are clipped to [0, 1] and rounded. One-plane images are written as gray.
void write_png8(const std::filesystem::path& path, const Planes& img);
/// Returns 3 planes in [0, 1] (gray files are replicated).
Planes read_png8(const std::filesystem::path& path);

/// 16-bit grayscale PNG holding raw DN values.
void write_png16(const std::filesystem::path& path, const Mosaic16& mosaic);
Mosaic16 read_png16(const std::filesystem::path& path);

/// Writes to a sibling temp file, then renames over `path`.
void atomic_write_text(const std::filesystem::path& path, const std::string& content);

std::string read_text(const std::filesystem::path& path);

}  // namespace difuzcam
