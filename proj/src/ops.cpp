#include "tfformer/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <numbers>

namespace tfformer::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

using testing::FaultOp;
using testing::fault_factor;

detail::Node& input(detail::Node& self, std::size_t i) { return *self.inputs[i]; }

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

struct Nchw {
  std::size_t n, c, h, w;
};

Nchw as_nchw(const Tensor& x, const char* op) {
  const auto& s = x.shape();
  if (s.size() == 4) return {s[0], s[1], s[2], s[3]};
  if (s.size() == 3) return {1, s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected CHW or NCHW tensor, got " + shape_str(s));
}

Shape image_shape(const Tensor& like, std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
  if (like.rank() == 3) return {c, h, w};
  return {n, c, h, w};
}

// Unfolds one CHW image into columns [C*k*k, Ho*Wo].
void im2col(const double* img, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w,
            double* col) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        double* dst = col + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          double* row = dst + oy * out_w;
          if (iy < 0 || iy >= static_cast<long>(height)) {
            std::fill(row, row + out_w, 0.0);
            continue;
          }
          const double* src = img + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            row[ox] = (ix < 0 || ix >= static_cast<long>(width)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-adds columns back into the image.
void col2im(const double* col, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t k, std::size_t stride, std::size_t pad, std::size_t out_h, std::size_t out_w,
            double* img) {
  const std::size_t plane = out_h * out_w;
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const double* src = col + ((c * k + ki) * k + kj) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy * stride + ki) - static_cast<long>(pad);
          if (iy < 0 || iy >= static_cast<long>(height)) continue;
          double* dst = img + (c * height + static_cast<std::size_t>(iy)) * width;
          const double* row = src + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox * stride + kj) - static_cast<long>(pad);
            if (ix >= 0 && ix < static_cast<long>(width)) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

}  // namespace

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding) {
  const long span = static_cast<long>(in + 2 * padding) - static_cast<long>(k);
  if (span < 0 || stride == 0) return 0;
  return static_cast<std::size_t>(span) / stride + 1;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "add", [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = input(self, k);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "sub", [](detail::Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      auto& in = input(self, k);
      if (!in.requires_grad) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Buffer out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, "mul", [](detail::Node& self) {
    auto& x = input(self, 0);
    auto& y = input(self, 1);
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * y.data[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * x.data[i];
    }
  });
}

Tensor scale(const Tensor& x, double factor) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, "scale", [factor](detail::Node& self) {
    auto& g = input(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * self.grad[i];
  });
}

Tensor abs(const Tensor& x) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(x[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, "abs", [](detail::Node& self) {
    auto& in = input(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in.data[i];
      g[i] += v > 0.0 ? self.grad[i] : (v < 0.0 ? -self.grad[i] : 0.0);
    }
  });
}

Tensor div_by_scalar(const Tensor& x, const Tensor& s) {
  if (s.size() != 1) throw DimensionError("div_by_scalar: divisor must have one element, got " + shape_str(s.shape()));
  const double d = s.item();
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] / d;
  return Tensor::make_result(x.shape(), std::move(out), {x, s}, "div_by_scalar", [](detail::Node& self) {
    auto& in = input(self, 0);
    auto& div = input(self, 1);
    const double d = div.data[0];
    if (in.requires_grad) {
      auto& g = in.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] / d;
    }
    if (div.requires_grad) {
      // d(x/d)/dd = -y/d
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * self.data[i];
      div.grad_buffer()[0] -= acc / d;
    }
  });
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::clamp(x[i], lo, hi);
  return Tensor::make_result(x.shape(), std::move(out), {x}, "clamp", [lo, hi](detail::Node& self) {
    auto& in = input(self, 0);
    auto& g = in.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in.data[i] > lo && in.data[i] < hi) g[i] += self.grad[i];
    }
  });
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return Tensor::make_result({1}, {acc}, {x}, "sum", [](detail::Node& self) {
    auto& g = input(self, 0).grad_buffer();
    for (auto& v : g) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor weighted_sum(const Tensor& x, std::span<const double> weights) {
  if (weights.size() != x.size()) throw DimensionError("weighted_sum: weight count mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * weights[i];
  Buffer w(weights.begin(), weights.end());
  return Tensor::make_result({1}, {acc}, {x}, "weighted_sum", [w = std::move(w)](detail::Node& self) {
    auto& g = input(self, 0).grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * w[i];
  });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Buffer out(m * n);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.data().data(), m, k) * CMapMat(b.data().data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, "matmul", [m, k, n](detail::Node& self) {
    auto& x = input(self, 0);
    auto& y = input(self, 1);
    const double f = fault_factor(FaultOp::matmul);
    CMapMat dout(self.grad.data(), m, n);
    if (x.requires_grad) {
      MapMat(x.grad_buffer().data(), m, k).noalias() += f * (dout * CMapMat(y.data.data(), k, n).transpose());
    }
    if (y.requires_grad) {
      MapMat(y.grad_buffer().data(), k, n).noalias() += f * (CMapMat(x.data.data(), m, k).transpose() * dout);
    }
  });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("transpose: expected a matrix, got " + shape_str(a.shape()));
  const auto m = a.dim(0), n = a.dim(1);
  Buffer out(m * n);
  MapMat(out.data(), n, m) = CMapMat(a.data().data(), m, n).transpose();
  return Tensor::make_result({n, m}, std::move(out), {a}, "transpose", [m, n](detail::Node& self) {
    MapMat(input(self, 0).grad_buffer().data(), m, n) += CMapMat(self.grad.data(), n, m).transpose();
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const auto& s = x.shape();
  if (axis >= s.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  Buffer out(x.size());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * len * inner + j;
      double mx = in[base];
      for (std::size_t a = 1; a < len; ++a) mx = std::max(mx, in[base + a * inner]);
      double z = 0.0;
      for (std::size_t a = 0; a < len; ++a) {
        const double e = std::exp(in[base + a * inner] - mx);
        out[base + a * inner] = e;
        z += e;
      }
      for (std::size_t a = 0; a < len; ++a) out[base + a * inner] /= z;
    }
  }
  return Tensor::make_result(s, std::move(out), {x}, "softmax", [outer, inner, len](detail::Node& self) {
    auto& g = input(self, 0).grad_buffer();
    const double f = fault_factor(FaultOp::softmax);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t j = 0; j < inner; ++j) {
        const std::size_t base = o * len * inner + j;
        double dot = 0.0;
        for (std::size_t a = 0; a < len; ++a) dot += self.grad[base + a * inner] * self.data[base + a * inner];
        for (std::size_t a = 0; a < len; ++a) {
          const std::size_t i = base + a * inner;
          g[i] += f * self.data[i] * (self.grad[i] - dot);
        }
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  Buffer out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * normal_cdf(x[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, "gelu", [](detail::Node& self) {
    auto& in = input(self, 0);
    auto& g = in.grad_buffer();
    const double f = fault_factor(FaultOp::gelu);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = in.data[i];
      g[i] += f * self.grad[i] * (normal_cdf(v) + v * normal_pdf(v));
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride, std::size_t padding) {
  const auto [batch, cin, h, wd] = as_nchw(x, "conv2d");
  if (w.rank() != 4 || w.dim(1) != cin || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  const std::size_t cout = w.dim(0), k = w.dim(2);
  if (k % 2 == 0) throw DimensionError("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(b.shape()) + " does not match " + std::to_string(cout) + " outputs");
  }
  if (stride == 0) throw DimensionError("conv2d: stride must be positive");
  const std::size_t oh = conv_output_extent(h, k, stride, padding);
  const std::size_t ow = conv_output_extent(wd, k, stride, padding);
  if (oh < 1 || ow < 1) {
    throw DimensionError("conv2d: output extent < 1 for input " + shape_str(x.shape()) + " with kernel " +
                         std::to_string(k));
  }
  const std::size_t rows = cin * k * k, plane = oh * ow;
  auto cols = std::make_shared<Buffer>(batch * rows * plane);
  Buffer out(batch * cout * plane);
  CMapMat wm(w.data().data(), cout, rows);
  for (std::size_t n = 0; n < batch; ++n) {
    double* col = cols->data() + n * rows * plane;
    im2col(x.data().data() + n * cin * h * wd, cin, h, wd, k, stride, padding, oh, ow, col);
    MapMat o(out.data() + n * cout * plane, cout, plane);
    o.noalias() = wm * CMapMat(col, rows, plane);
    if (b.defined()) o.colwise() += Eigen::Map<const Eigen::VectorXd>(b.data().data(), cout);
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Tensor::make_result(
      image_shape(x, batch, cout, oh, ow), std::move(out), std::move(inputs), "conv2d",
      [=](detail::Node& self) {
        auto& xn = input(self, 0);
        auto& wn = input(self, 1);
        const double f = fault_factor(FaultOp::conv2d);
        Buffer dcol(rows * plane);
        for (std::size_t n = 0; n < batch; ++n) {
          CMapMat dout(self.grad.data() + n * cout * plane, cout, plane);
          const double* col = cols->data() + n * rows * plane;
          if (wn.requires_grad) {
            MapMat(wn.grad_buffer().data(), cout, rows).noalias() += f * (dout * CMapMat(col, rows, plane).transpose());
          }
          if (xn.requires_grad) {
            MapMat(dcol.data(), rows, plane).noalias() = f * (CMapMat(wn.data.data(), cout, rows).transpose() * dout);
            col2im(dcol.data(), cin, h, wd, k, stride, padding, oh, ow, xn.grad_buffer().data() + n * cin * h * wd);
          }
          if (self.inputs.size() > 2 && input(self, 2).requires_grad) {
            Eigen::Map<Eigen::VectorXd>(input(self, 2).grad_buffer().data(), cout) += dout.rowwise().sum();
          }
        }
      });
}

Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t padding, std::size_t output_padding) {
  const auto [batch, cx, h, wd] = as_nchw(x, "conv_transpose2d");
  if (w.rank() != 4 || w.dim(0) != cx || w.dim(2) != w.dim(3)) {
    throw DimensionError("conv_transpose2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  if (stride == 0) throw DimensionError("conv_transpose2d: stride must be positive");
  if (output_padding >= stride) throw DimensionError("conv_transpose2d: output_padding must be < stride");
  const std::size_t cout = w.dim(1), k = w.dim(2);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != cout)) {
    throw DimensionError("conv_transpose2d: bias " + shape_str(b.shape()) + " does not match " +
                         std::to_string(cout) + " outputs");
  }
  const long oh_l = static_cast<long>((h - 1) * stride + k + output_padding) - 2 * static_cast<long>(padding);
  const long ow_l = static_cast<long>((wd - 1) * stride + k + output_padding) - 2 * static_cast<long>(padding);
  if (oh_l < 1 || ow_l < 1) throw DimensionError("conv_transpose2d: output extent < 1");
  const auto oh = static_cast<std::size_t>(oh_l), ow = static_cast<std::size_t>(ow_l);
  const std::size_t rows = cout * k * k, plane = h * wd;
  Buffer out(batch * cout * oh * ow, 0.0);
  Buffer col(rows * plane);
  CMapMat wm(w.data().data(), cx, rows);
  for (std::size_t n = 0; n < batch; ++n) {
    MapMat(col.data(), rows, plane).noalias() = wm.transpose() * CMapMat(x.data().data() + n * cx * plane, cx, plane);
    double* o = out.data() + n * cout * oh * ow;
    col2im(col.data(), cout, oh, ow, k, stride, padding, h, wd, o);
    if (b.defined()) {
      for (std::size_t c = 0; c < cout; ++c) {
        for (std::size_t i = 0; i < oh * ow; ++i) o[c * oh * ow + i] += b[c];
      }
    }
  }
  std::vector<Tensor> inputs{x, w};
  if (b.defined()) inputs.push_back(b);
  return Tensor::make_result(
      image_shape(x, batch, cout, oh, ow), std::move(out), std::move(inputs), "conv_transpose2d",
      [=](detail::Node& self) {
        auto& xn = input(self, 0);
        auto& wn = input(self, 1);
        Buffer dcol(rows * plane);
        for (std::size_t n = 0; n < batch; ++n) {
          const double* dout = self.grad.data() + n * cout * oh * ow;
          im2col(dout, cout, oh, ow, k, stride, padding, h, wd, dcol.data());
          CMapMat dc(dcol.data(), rows, plane);
          if (xn.requires_grad) {
            MapMat(xn.grad_buffer().data() + n * cx * plane, cx, plane).noalias() +=
                CMapMat(wn.data.data(), cx, rows) * dc;
          }
          if (wn.requires_grad) {
            MapMat(wn.grad_buffer().data(), cx, rows).noalias() +=
                CMapMat(xn.data.data() + n * cx * plane, cx, plane) * dc.transpose();
          }
          if (self.inputs.size() > 2 && input(self, 2).requires_grad) {
            auto& gb = input(self, 2).grad_buffer();
            for (std::size_t c = 0; c < cout; ++c) {
              double acc = 0.0;
              for (std::size_t i = 0; i < oh * ow; ++i) acc += dout[c * oh * ow + i];
              gb[c] += acc;
            }
          }
        }
      });
}

BatchNormState::BatchNormState(std::size_t channels)
    : running_mean(Tensor::zeros({channels})), running_var(Tensor::full({channels}, 1.0)) {}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode) {
  const auto [batch, channels, h, w] = as_nchw(x, "batch_norm");
  if (channels != state.channels() || gamma.size() != channels || beta.size() != channels) {
    throw DimensionError("batch_norm: channel count " + std::to_string(channels) + " does not match layer with " +
                         std::to_string(state.channels()));
  }
  const std::size_t plane = h * w;
  const std::size_t count = batch * plane;
  Buffer mu(channels), inv_std(channels);
  if (mode == Mode::train) {
    auto rm = state.running_mean.mutable_data();
    auto rv = state.running_var.mutable_data();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const double* p = x.data().data() + (n * channels + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const double var = v / static_cast<double>(count);
      mu[c] = m;
      inv_std[c] = 1.0 / std::sqrt(var + state.eps);
      const double unbiased = count > 1 ? v / static_cast<double>(count - 1) : var;
      rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
      rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
    }
  } else {
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = state.running_mean[c];
      inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + state.eps);
    }
  }
  Buffer out(x.size());
  auto xhat = std::make_shared<Buffer>(x.size());
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const double xh = (x[off + i] - mu[c]) * inv_std[c];
        (*xhat)[off + i] = xh;
        out[off + i] = gamma[c] * xh + beta[c];
      }
    }
  }
  const bool train = mode == Mode::train;
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta}, "batch_norm",
      [=, inv_std = std::move(inv_std)](detail::Node& self) {
        auto& xn = input(self, 0);
        auto& gn = input(self, 1);
        auto& bn = input(self, 2);
        const double f = fault_factor(FaultOp::batch_norm);
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xh = 0.0;
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_dy += self.grad[off + i];
              sum_dy_xh += self.grad[off + i] * (*xhat)[off + i];
            }
          }
          if (gn.requires_grad) gn.grad_buffer()[c] += sum_dy_xh;
          if (bn.requires_grad) bn.grad_buffer()[c] += sum_dy;
          if (!xn.requires_grad) continue;
          auto& gx = xn.grad_buffer();
          const double g = gn.data[c];
          const double m = static_cast<double>(count);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              const double dy = self.grad[off + i];
              if (train) {
                gx[off + i] += f * g * inv_std[c] * (dy - sum_dy / m - (*xhat)[off + i] * sum_dy_xh / m);
              } else {
                gx[off + i] += f * g * inv_std[c] * dy;
              }
            }
          }
        }
      });
}

Tensor tokens(const Tensor& x, std::size_t n, std::size_t c0, std::size_t c1) {
  const auto [batch, channels, h, w] = as_nchw(x, "tokens");
  if (n >= batch || c0 >= c1 || c1 > channels) {
    throw DimensionError("tokens: slice out of range for " + shape_str(x.shape()));
  }
  const std::size_t plane = h * w, d = c1 - c0;
  Buffer out(plane * d);
  const double* base = x.data().data() + (n * channels + c0) * plane;
  MapMat(out.data(), plane, d) = CMapMat(base, d, plane).transpose();
  return Tensor::make_result({plane, d}, std::move(out), {x}, "tokens", [=](detail::Node& self) {
    double* g = input(self, 0).grad_buffer().data() + (n * channels + c0) * plane;
    MapMat(g, d, plane) += CMapMat(self.grad.data(), plane, d).transpose();
  });
}

Tensor from_tokens(const std::vector<Tensor>& parts, std::size_t batch, std::size_t height, std::size_t width) {
  if (parts.empty() || parts.size() % batch != 0) throw DimensionError("from_tokens: part count not divisible by batch");
  const std::size_t heads = parts.size() / batch;
  const std::size_t plane = height * width;
  const std::size_t d = parts[0].dim(1);
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(0) != plane || p.dim(1) != d) {
      throw DimensionError("from_tokens: part " + shape_str(p.shape()) + " does not match " +
                           std::to_string(plane) + " tokens of width " + std::to_string(d));
    }
  }
  const std::size_t channels = heads * d;
  Buffer out(batch * channels * plane);
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const std::size_t n = i / heads, hd = i % heads;
    MapMat(out.data() + (n * channels + hd * d) * plane, d, plane) = CMapMat(parts[i].data().data(), plane, d).transpose();
  }
  return Tensor::make_result({batch, channels, height, width}, std::move(out), parts, "from_tokens",
                             [=](detail::Node& self) {
                               for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                 auto& in = input(self, i);
                                 if (!in.requires_grad) continue;
                                 const std::size_t n = i / heads, hd = i % heads;
                                 MapMat(in.grad_buffer().data(), plane, d) +=
                                     CMapMat(self.grad.data() + (n * channels + hd * d) * plane, d, plane).transpose();
                               }
                             });
}

Tensor concat_channels(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  const auto first = as_nchw(xs[0], "concat_channels");
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& x : xs) {
    const auto s = as_nchw(x, "concat_channels");
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw DimensionError("concat_channels: " + shape_str(x.shape()) + " vs " + shape_str(xs[0].shape()));
    }
    chans.push_back(s.c);
    total += s.c;
  }
  const std::size_t plane = first.h * first.w, batch = first.n;
  Buffer out(batch * total * plane);
  for (std::size_t n = 0; n < batch; ++n) {
    std::size_t c0 = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double* src = xs[i].data().data() + n * chans[i] * plane;
      std::copy(src, src + chans[i] * plane, out.data() + (n * total + c0) * plane);
      c0 += chans[i];
    }
  }
  return Tensor::make_result(image_shape(xs[0], batch, total, first.h, first.w), std::move(out), xs,
                             "concat_channels", [=](detail::Node& self) {
                               for (std::size_t n = 0; n < batch; ++n) {
                                 std::size_t c0 = 0;
                                 for (std::size_t i = 0; i < self.inputs.size(); ++i) {
                                   auto& in = input(self, i);
                                   if (in.requires_grad) {
                                     double* g = in.grad_buffer().data() + n * chans[i] * plane;
                                     const double* src = self.grad.data() + (n * total + c0) * plane;
                                     for (std::size_t j = 0; j < chans[i] * plane; ++j) g[j] += src[j];
                                   }
                                   c0 += chans[i];
                                 }
                               }
                             });
}

Tensor stack(const std::vector<Tensor>& images) {
  if (images.empty()) throw DimensionError("stack: no inputs");
  const Shape item = images[0].shape();
  Buffer out;
  out.reserve(images.size() * numel(item));
  for (const auto& im : images) {
    if (im.shape() != item) throw DimensionError("stack: " + shape_str(im.shape()) + " vs " + shape_str(item));
    out.insert(out.end(), im.data().begin(), im.data().end());
  }
  Shape shape{images.size()};
  shape.insert(shape.end(), item.begin(), item.end());
  const std::size_t per = numel(item);
  return Tensor::make_result(std::move(shape), std::move(out), images, "stack", [per](detail::Node& self) {
    for (std::size_t i = 0; i < self.inputs.size(); ++i) {
      auto& in = input(self, i);
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      for (std::size_t j = 0; j < per; ++j) g[j] += self.grad[i * per + j];
    }
  });
}

Tensor select(const Tensor& x, std::size_t n) {
  if (x.rank() < 2 || n >= x.dim(0)) throw DimensionError("select: index out of range for " + shape_str(x.shape()));
  Shape item(x.shape().begin() + 1, x.shape().end());
  const std::size_t per = numel(item);
  Buffer out(x.data().begin() + static_cast<long>(n * per), x.data().begin() + static_cast<long>((n + 1) * per));
  return Tensor::make_result(std::move(item), std::move(out), {x}, "select", [n, per](detail::Node& self) {
    auto& g = input(self, 0).grad_buffer();
    for (std::size_t j = 0; j < per; ++j) g[n * per + j] += self.grad[j];
  });
}

namespace {

// Whole-sample symmetric reflection, periodic so any pad amount is valid.
std::size_t reflect_index(std::size_t i, std::size_t n) {
  if (n == 1) return 0;
  const std::size_t period = 2 * (n - 1);
  const std::size_t r = i % period;
  return r < n ? r : period - r;
}

}  // namespace

Tensor reflect_pad(const Tensor& x, std::size_t height, std::size_t width) {
  const auto [batch, channels, h, w] = as_nchw(x, "reflect_pad");
  if (height < h || width < w) throw DimensionError("reflect_pad: target smaller than input");
  std::vector<std::size_t> src(height * width);
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t xx = 0; xx < width; ++xx) src[y * width + xx] = reflect_index(y, h) * w + reflect_index(xx, w);
  }
  Buffer out(batch * channels * height * width);
  const std::size_t in_plane = h * w, out_plane = height * width;
  for (std::size_t p = 0; p < batch * channels; ++p) {
    for (std::size_t i = 0; i < out_plane; ++i) out[p * out_plane + i] = x[p * in_plane + src[i]];
  }
  return Tensor::make_result(image_shape(x, batch, channels, height, width), std::move(out), {x}, "reflect_pad",
                             [=, src = std::move(src)](detail::Node& self) {
                               auto& g = input(self, 0).grad_buffer();
                               for (std::size_t p = 0; p < batch * channels; ++p) {
                                 for (std::size_t i = 0; i < out_plane; ++i) {
                                   g[p * in_plane + src[i]] += self.grad[p * out_plane + i];
                                 }
                               }
                             });
}

Tensor crop(const Tensor& x, std::size_t height, std::size_t width) {
  const auto [batch, channels, h, w] = as_nchw(x, "crop");
  if (height > h || width > w || height == 0 || width == 0) throw DimensionError("crop: window outside input");
  Buffer out(batch * channels * height * width);
  for (std::size_t p = 0; p < batch * channels; ++p) {
    for (std::size_t y = 0; y < height; ++y) {
      const double* src = x.data().data() + (p * h + y) * w;
      std::copy(src, src + width, out.data() + (p * height + y) * width);
    }
  }
  return Tensor::make_result(image_shape(x, batch, channels, height, width), std::move(out), {x}, "crop",
                             [=](detail::Node& self) {
                               auto& g = input(self, 0).grad_buffer();
                               for (std::size_t p = 0; p < batch * channels; ++p) {
                                 for (std::size_t y = 0; y < height; ++y) {
                                   for (std::size_t xx = 0; xx < width; ++xx) {
                                     g[(p * h + y) * w + xx] += self.grad[(p * height + y) * width + xx];
                                   }
                                 }
                               }
                             });
}

}  // namespace tfformer::ops
