#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include "tfformer/image_io.hpp"
#include "tfformer/rng.hpp"

namespace fixtures {

namespace fs = std::filesystem;

/// A scratch directory removed when the object goes out of scope.
struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("tfformer_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
};

inline tfformer::RgbImage texture(std::size_t h, std::size_t w, double lo, double hi, std::uint64_t seed) {
  tfformer::Rng rng(seed);
  auto img = tfformer::RgbImage::zeros(h, w);
  for (auto& v : img.pixels.mutable_data()) v = rng.uniform(lo, hi);
  return img;
}

inline tfformer::RgbImage scaled(const tfformer::RgbImage& img, double f) {
  auto out = tfformer::RgbImage(img.pixels.clone());
  for (auto& v : out.pixels.mutable_data()) v *= f;
  return out;
}

/// Six 16x16 pairs: two valid textured references, two too dark for the
/// brightness filter (mean ~6 on the 0-255 scale), and two flat references
/// with zero Laplacian response that the sharpness-based scorer rejects.
inline void write_curation_fixture(const fs::path& root) {
  fs::create_directories(root / "low");
  fs::create_directories(root / "ref");
  const auto put = [&](const std::string& name, const tfformer::RgbImage& ref) {
    tfformer::save_image(ref, root / "ref" / (name + ".ppm"));
    tfformer::save_image(scaled(ref, 0.1), root / "low" / (name + ".ppm"));
  };
  put("valid_1", texture(16, 16, 0.2, 0.8, 1));
  put("valid_2", texture(16, 16, 0.3, 0.9, 2));
  put("dark_1", texture(16, 16, 0.0, 0.05, 3));
  put("dark_2", texture(16, 16, 0.0, 0.04, 4));
  put("flat_1", tfformer::RgbImage::filled(16, 16, 0.5, 0.5, 0.5));
  put("flat_2", tfformer::RgbImage::filled(16, 16, 0.3, 0.6, 0.2));
}

}  // namespace fixtures
