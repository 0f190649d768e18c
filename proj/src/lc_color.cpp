#include "tfformer/lc_color.hpp"

#include <array>

namespace tfformer {

namespace {

constexpr std::array<double, 3> kWeights{kLumaRed, kLumaGreen, kLumaBlue};

struct Layout {
  std::size_t batch, channels, plane;
};

Layout layout_of(const Tensor& t, const char* op) {
  const auto& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1] * s[2]};
  if (s.size() == 4) return {s[0], s[1], s[2] * s[3]};
  throw DimensionError(std::string(op) + ": expected CHW or NCHW, got " + shape_str(s));
}

Shape with_channels(const Shape& s, std::size_t c) {
  Shape out = s;
  out[s.size() - 3] = c;
  return out;
}

void check_pair(const Tensor& three, const Tensor& lum, const char* op) {
  const auto a = layout_of(three, op);
  const auto b = layout_of(lum, op);
  if (a.channels != 3 || b.channels != 1 || a.batch != b.batch || a.plane != b.plane ||
      three.rank() != lum.rank() || with_channels(three.shape(), 1) != lum.shape()) {
    throw DimensionError(std::string(op) + ": " + shape_str(three.shape()) + " and luminance " +
                         shape_str(lum.shape()) + " disagree");
  }
}

// out_k = x_k + sign * L, broadcast over the three channels.
Tensor broadcast_luminance(const Tensor& x, const Tensor& lum, double sign, const char* op) {
  check_pair(x, lum, op);
  const auto [batch, channels, plane] = layout_of(x, op);
  Buffer out(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t off = (n * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double l = lum[n * plane + i];
        out[off + i] = sign > 0 ? x[off + i] + l : x[off + i] - l;
      }
    }
  }
  return Tensor::make_result(x.shape(), std::move(out), {x, lum}, op, [=](detail::Node& self) {
    auto& xn = *self.inputs[0];
    auto& ln = *self.inputs[1];
    if (xn.requires_grad) {
      auto& g = xn.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (ln.requires_grad) {
      auto& g = ln.grad_buffer();
      for (std::size_t n = 0; n < batch; ++n) {
        for (std::size_t c = 0; c < 3; ++c) {
          for (std::size_t i = 0; i < plane; ++i) g[n * plane + i] += sign * self.grad[(n * 3 + c) * plane + i];
        }
      }
    }
  });
}

}  // namespace

RgbImage::RgbImage(Tensor t) : pixels(std::move(t)) {
  if (pixels.rank() != 3 || pixels.dim(0) != 3) {
    throw DimensionError("RgbImage expects a [3, H, W] tensor, got " + shape_str(pixels.shape()));
  }
}

RgbImage RgbImage::zeros(std::size_t height, std::size_t width) {
  return RgbImage(Tensor::zeros({3, height, width}));
}

RgbImage RgbImage::filled(std::size_t height, std::size_t width, double r, double g, double b) {
  std::vector<double> data(3 * height * width);
  const std::array<double, 3> v{r, g, b};
  for (std::size_t c = 0; c < 3; ++c) {
    std::fill(data.begin() + static_cast<long>(c * height * width),
              data.begin() + static_cast<long>((c + 1) * height * width), v[c]);
  }
  return RgbImage(Tensor::from({3, height, width}, std::move(data)));
}

Tensor luminance(const Tensor& rgb) {
  const auto [batch, channels, plane] = layout_of(rgb, "luminance");
  if (channels != 3) throw DimensionError("luminance: expected 3 channels, got " + shape_str(rgb.shape()));
  Buffer out(batch * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    const double* r = rgb.data().data() + n * 3 * plane;
    for (std::size_t i = 0; i < plane; ++i) {
      // Same weighted sum anchored on blue; gray pixels map to themselves exactly.
      const double b = r[2 * plane + i];
      out[n * plane + i] = b + kLumaRed * (r[i] - b) + kLumaGreen * (r[plane + i] - b);
    }
  }
  return Tensor::make_result(with_channels(rgb.shape(), 1), std::move(out), {rgb}, "luminance",
                             [batch, plane](detail::Node& self) {
                               auto& g = self.inputs[0]->grad_buffer();
                               for (std::size_t n = 0; n < batch; ++n) {
                                 for (std::size_t c = 0; c < 3; ++c) {
                                   for (std::size_t i = 0; i < plane; ++i) {
                                     g[(n * 3 + c) * plane + i] += kWeights[c] * self.grad[n * plane + i];
                                   }
                                 }
                               }
                             });
}

Tensor subtract_luminance(const Tensor& rgb, const Tensor& lum) {
  return broadcast_luminance(rgb, lum, -1.0, "subtract_luminance");
}

Tensor add_luminance(const Tensor& chroma, const Tensor& lum) {
  return broadcast_luminance(chroma, lum, 1.0, "add_luminance");
}

LcPair decompose(const Tensor& rgb) {
  Tensor lum = luminance(rgb);
  Tensor chroma = subtract_luminance(rgb, lum);
  return {std::move(lum), std::move(chroma)};
}

LcPair decompose(const RgbImage& img) { return decompose(img.pixels); }

Tensor recompose(const LcPair& lc) { return add_luminance(lc.chrominance, lc.luminance); }

}  // namespace tfformer
