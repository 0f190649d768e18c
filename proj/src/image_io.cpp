#include "tfformer/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

namespace tfformer {

namespace {

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

RgbImage from_interleaved(const std::vector<unsigned char>& bytes, std::size_t h, std::size_t w) {
  std::vector<double> data(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 3; ++c) data[c * h * w + i] = bytes[3 * i + c] / 255.0;
  }
  return RgbImage(Tensor::from({3, h, w}, std::move(data)));
}

std::vector<unsigned char> to_interleaved(const RgbImage& img) {
  const std::size_t h = img.height(), w = img.width();
  std::vector<unsigned char> bytes(3 * h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    for (std::size_t c = 0; c < 3; ++c) bytes[3 * i + c] = quantize(img.pixels[c * h * w + i]);
  }
  return bytes;
}

// Next whitespace-delimited header token, skipping '#' comments.
std::string ppm_token(std::istream& in, const std::filesystem::path& path) {
  std::string tok;
  int ch;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw ImageIoError(path.string() + ": truncated PPM header");
  return tok;
}

std::size_t ppm_number(std::istream& in, const std::filesystem::path& path) {
  const std::string tok = ppm_token(in, path);
  if (tok.empty() || !std::all_of(tok.begin(), tok.end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw ImageIoError(path.string() + ": malformed PPM header field '" + tok + "'");
  }
  return std::stoul(tok);
}

RgbImage load_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + path.string());
  if (ppm_token(in, path) != "P6") throw ImageIoError(path.string() + ": not a binary PPM (P6)");
  const std::size_t w = ppm_number(in, path);
  const std::size_t h = ppm_number(in, path);
  const std::size_t maxval = ppm_number(in, path);
  if (w == 0 || h == 0) throw ImageIoError(path.string() + ": zero image extent");
  if (maxval != 255) throw ImageIoError(path.string() + ": only maxval 255 is supported");
  std::vector<unsigned char> bytes(3 * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (static_cast<std::size_t>(in.gcount()) != bytes.size()) throw ImageIoError(path.string() + ": truncated pixel data");
  return from_interleaved(bytes, h, w);
}

void save_ppm(const RgbImage& img, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot open " + path.string() + " for writing");
  out << "P6\n" << img.width() << ' ' << img.height() << "\n255\n";
  const auto bytes = to_interleaved(img);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError("write failed: " + path.string());
}

RgbImage load_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.string().c_str())) {
    throw ImageIoError(path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> bytes(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw ImageIoError(path.string() + ": " + msg);
  }
  return from_interleaved(bytes, image.height, image.width);
}

void save_png(const RgbImage& img, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  const auto bytes = to_interleaved(img);
  if (!png_image_write_to_file(&image, path.string().c_str(), 0, bytes.data(), 0, nullptr)) {
    throw ImageIoError(path.string() + ": " + image.message);
  }
}

}  // namespace

unsigned char quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::floor(c * 255.0 + 0.5));
}

RgbImage load_image(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ppm") return load_ppm(path);
  if (ext == ".png") return load_png(path);
  throw ImageIoError(path.string() + ": unsupported image format '" + ext + "' (expected .png or .ppm)");
}

void save_image(const RgbImage& img, const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  if (ext == ".ppm") return save_ppm(img, path);
  if (ext == ".png") return save_png(img, path);
  throw ImageIoError(path.string() + ": unsupported image format '" + ext + "' (expected .png or .ppm)");
}

}  // namespace tfformer
