#pragma once

#include "liaf/mask.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace liaf {

struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 1;  // 1 (gray) or 3 (RGB)
  std::vector<std::uint8_t> pixels;  // row-major, interleaved
};

// Gray level round(255 * M) for image n of the mask, each mask cell drawn
// as an upscale x upscale block.
Image8 mask_to_gray(const SoftMask<double>& mask, Index n, int upscale = 1);

// Blue (low) to red (high) false-color rendering of the same values.
Image8 mask_to_color(const SoftMask<double>& mask, Index n, int upscale = 1);

void write_png(const std::string& path, const Image8& img);
Image8 read_png(const std::string& path);

}  // namespace liaf
