#pragma once

#include <filesystem>

#include "refix/grid.hpp"
#include "refix/image.hpp"

namespace refix {

/// 8-bit PNG, value v maps to v / 255. Gray, RGB and RGBA (alpha dropped).
Image read_png(const std::filesystem::path& path);
/// Writes round(v * 255). Images with 1 or 3 channels.
void write_png(const std::filesystem::path& path, const Image& image);

/// Writes a mask as an 8-bit grayscale PNG (0 / 255).
void write_mask_png(const std::filesystem::path& path, const Mask& mask);
Mask read_mask_png(const std::filesystem::path& path);

/// Single-channel little-endian portable float map ("Pf", negative scale).
/// Rows are stored bottom-to-top on disk; the returned grid is top-to-bottom.
Grid<double> read_pfm(const std::filesystem::path& path);
void write_pfm(const std::filesystem::path& path, const Grid<double>& grid);

/// Middlebury .flo: magic 202021.25, int32 width/height, then (dx, dy) float pairs.
Grid<double> read_flo(const std::filesystem::path& path);
void write_flo(const std::filesystem::path& path, const Grid<double>& flow);

}  // namespace refix
