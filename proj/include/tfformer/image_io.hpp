#pragma once

#include <filesystem>
#include <stdexcept>

#include "tfformer/lc_color.hpp"

namespace tfformer {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Reads 8-bit PNG or binary PPM (P6, maxval 255); byte v becomes v / 255.
RgbImage load_image(const std::filesystem::path& path);

/// Writes by extension (.png or .ppm); clamps to [0, 1] and stores
/// round(v * 255) with halves rounded up.
void save_image(const RgbImage& img, const std::filesystem::path& path);

unsigned char quantize(double v);

}  // namespace tfformer
