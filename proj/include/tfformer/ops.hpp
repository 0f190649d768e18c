#pragma once

#include <span>
#include <vector>

#include "tfformer/tensor.hpp"

// Differentiable tensor operations. Image-shaped tensors use NCHW layout;
// conv2d, conv_transpose2d and batch_norm also accept a CHW tensor as N = 1.
namespace tfformer::ops {

// Elementwise, identical shapes.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor abs(const Tensor& x);
/// x / s for a one-element tensor s (learnable temperatures).
Tensor div_by_scalar(const Tensor& x, const Tensor& s);
Tensor clamp(const Tensor& x, double lo, double hi);

// Reductions to a one-element tensor.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
/// sum(x .* w) for a constant weight array; used by gradient checks.
Tensor weighted_sum(const Tensor& x, std::span<const double> weights);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& x, std::size_t axis);

/// Exact GELU: x * Phi(x).
Tensor gelu(const Tensor& x);

/// Cross-correlation with zero padding. w: [Cout, Cin, k, k], b: [Cout] or undefined.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding);

/// Adjoint of conv2d sharing its weight layout: w: [Cx, Cout, k, k] where Cx
/// is this op's input channel count. Output extent (H-1)*stride - 2*padding
/// + k + output_padding.
Tensor conv_transpose2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                        std::size_t padding = 0, std::size_t output_padding = 0);

enum class Mode { train, eval };

/// Per-channel running statistics owned by a batch-norm layer.
struct BatchNormState {
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  explicit BatchNormState(std::size_t channels = 1);
  std::size_t channels() const { return running_mean.size(); }
};

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  Mode mode);

// Layout helpers.
/// Channels [c0, c1) of batch item n as a token matrix [H*W, c1-c0].
Tensor tokens(const Tensor& x, std::size_t n, std::size_t c0, std::size_t c1);
/// Inverse of tokens: parts[n * heads + h] is [H*W, d]; result [N, heads*d, H, W].
Tensor from_tokens(const std::vector<Tensor>& parts, std::size_t batch, std::size_t height,
                   std::size_t width);
Tensor concat_channels(const std::vector<Tensor>& xs);
Tensor stack(const std::vector<Tensor>& images);
Tensor select(const Tensor& x, std::size_t n);
/// Mirror-pads bottom/right of an NCHW tensor up to the given extents.
Tensor reflect_pad(const Tensor& x, std::size_t height, std::size_t width);
/// Keeps the top-left height x width window of an NCHW tensor.
Tensor crop(const Tensor& x, std::size_t height, std::size_t width);

std::size_t conv_output_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t padding);

}  // namespace tfformer::ops
