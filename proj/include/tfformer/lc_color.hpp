#pragma once

#include <cstddef>

#include "tfformer/tensor.hpp"

namespace tfformer {

/// An RGB image as a [3, H, W] tensor. Inputs are nominally in [0, 1];
/// intermediate predictions may leave that range.
struct RgbImage {
  Tensor pixels;

  RgbImage() = default;
  explicit RgbImage(Tensor t);
  static RgbImage zeros(std::size_t height, std::size_t width);
  static RgbImage filled(std::size_t height, std::size_t width, double r, double g, double b);

  std::size_t height() const { return pixels.dim(1); }
  std::size_t width() const { return pixels.dim(2); }
  double at(std::size_t c, std::size_t y, std::size_t x) const {
    return pixels[(c * height() + y) * width() + x];
  }
};

/// Luminance map [.., 1, H, W] and full three-channel chrominance residual
/// [.., 3, H, W]. Chrominance is signed.
struct LcPair {
  Tensor luminance;
  Tensor chrominance;
};

inline constexpr double kLumaRed = 0.299;
inline constexpr double kLumaGreen = 0.587;
inline constexpr double kLumaBlue = 0.114;

/// L = 0.299 R + 0.587 G + 0.114 B, differentiable, CHW or NCHW.
Tensor luminance(const Tensor& rgb);
/// rgb_k - L for every channel k.
Tensor subtract_luminance(const Tensor& rgb, const Tensor& lum);
/// chroma_k + L for every channel k.
Tensor add_luminance(const Tensor& chroma, const Tensor& lum);

LcPair decompose(const Tensor& rgb);
LcPair decompose(const RgbImage& img);
Tensor recompose(const LcPair& lc);

}  // namespace tfformer
