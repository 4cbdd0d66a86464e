#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "demun/error.hpp"

namespace demun {

/// 8-bit-depth grayscale raster; values in [0, 255] after any RGB-to-
/// luminance conversion (0.299 R + 0.587 G + 0.114 B).
struct GrayImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<double> pixels;  // row-major, height * width

  double at(int64_t y, int64_t x) const { return pixels[static_cast<size_t>(y * width + x)]; }
  double& at(int64_t y, int64_t x) { return pixels[static_cast<size_t>(y * width + x)]; }
};

/// Reads a PNG (grayscale or RGB, 8-bit; 16-bit is reduced) or a PGM (P2/P5).
GrayImage load_image(const std::filesystem::path& path);

/// Writes an 8-bit binary PGM (P5), rounding and clamping to [0, 255].
void write_pgm(const std::filesystem::path& path, const GrayImage& image);

/// Writes an 8-bit grayscale PNG, rounding and clamping to [0, 255].
void write_png(const std::filesystem::path& path, const GrayImage& image);

/// Writes an 8-bit RGB PNG from interleaved rgb bytes (3 per pixel).
void write_png_rgb(const std::filesystem::path& path, int64_t width, int64_t height,
                   const std::vector<unsigned char>& rgb);

}  // namespace demun
