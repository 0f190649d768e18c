#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tfformer/lc_color.hpp"
#include "tfformer/ops.hpp"
#include "tfformer/rng.hpp"
#include "tfformer/tensor.hpp"

namespace tfformer {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Network hyperparameters. Stage s runs at width base_width * 2^s.
struct ModelConfig {
  std::size_t base_width = 40;
  std::size_t stages = 3;
  std::vector<std::size_t> heads_per_stage{1, 2, 4};
  std::size_t bottleneck_heads = 8;
  std::size_t lcgab_per_stage = 1;
  std::size_t refine_width = 20;
  std::size_t refine_heads = 1;
  std::size_t ffn_expansion = 2;

  std::size_t width_at(std::size_t stage) const { return base_width << stage; }
  std::size_t bottleneck_width() const { return base_width << stages; }
  std::size_t input_multiple() const { return std::size_t{1} << stages; }

  /// Throws ConfigError naming the offending field.
  void validate() const;

  /// `key = value` lines in a fixed order; parse() accepts the same text.
  std::string to_text() const;
  static ModelConfig parse(const std::string& text);
  /// Parses one key into this config; false for an unknown key.
  bool set(const std::string& key, const std::string& value);

  bool operator==(const ModelConfig&) const = default;
};

/// A named tensor owned by the model: learnable parameters and
/// non-learnable buffers (batch-norm running statistics).
struct NamedTensor {
  std::string name;
  Tensor value;
};

namespace nn {

struct Conv {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
  Tensor operator()(const Tensor& x) const;
};

/// Stride-s transposed conv, kernel 3, padding 1, output padding s-1: exact
/// s-fold upsampling.
struct ConvTranspose {
  Tensor weight;
  Tensor bias;
  std::size_t stride = 2;
  Tensor operator()(const Tensor& x) const;
};

struct BatchNorm {
  Tensor gamma;
  Tensor beta;
  ops::BatchNormState state;
  Tensor operator()(const Tensor& x, ops::Mode mode);
};

/// Per-head d x d projections and a learnable temperature per head.
struct HeadProjections {
  std::size_t heads = 1;
  std::vector<Tensor> wq, wk, wv, alpha;
};

/// Concatenated heads of Softmax(Q K^T / alpha) V, before any output map.
/// Queries come from `query_src`, keys and values from `kv_src`.
Tensor multi_head_attention(const HeadProjections& p, const Tensor& query_src, const Tensor& kv_src);

/// LC guided attention block.
struct Lcgab {
  std::size_t channels = 0;
  HeadProjections attn;
  Conv proj;
  Conv ffn_in;
  Conv ffn_out;

  /// y = I_B + proj(Attn(I_B)) .* F;  out = y + ffn(y)
  Tensor operator()(const Tensor& boosted, const Tensor& guidance) const;
  Tensor feed_forward(const Tensor& x) const;
};

struct LcMapBlock {
  Conv conv[3];
  BatchNorm bn[3];
  Conv boost;
};

struct LcMapOutput {
  Tensor features;  // F
  Tensor boosted;   // I_B
};

struct EncoderStage {
  std::vector<Lcgab> blocks;
  Conv down_features;
  Conv down_guidance;
};

struct Encoder {
  std::vector<EncoderStage> stages;
};

struct EncoderOutput {
  Tensor features;               // E at the bottleneck
  Tensor guidance;               // guidance downsampled alongside E
  std::vector<Tensor> skips;     // pre-downsample LCGAB outputs, finest first
};

struct Lccab {
  HeadProjections self_l, self_c, cross;
  Conv proj_l, proj_c, proj_cross;
};

struct DecoderStage {
  ConvTranspose up;
  std::vector<Lcgab> blocks;
};

struct Decoder {
  std::vector<DecoderStage> stages;  // index s handles the stage-s resolution
  Conv out_head;
};

struct Lcgrb {
  Conv lum_conv;
  Conv chroma_conv;
  Lcgab block;
  Conv out;
};

}  // namespace nn

struct ForwardOutput {
  Tensor reconstructed;  // I_rec
  Tensor refined;        // I_ref
};

/// The full luminance-chrominance enhancement network.
class TfFormerModel {
 public:
  explicit TfFormerModel(ModelConfig config, std::uint64_t seed = 0);

  const ModelConfig& config() const { return config_; }

  /// Full pipeline on an [N, 3, H, W] (or [3, H, W]) batch of any size:
  /// reflect-pads to the stage multiple, runs, crops back. Eval clamps to [0, 1].
  ForwardOutput forward(const Tensor& images, ops::Mode mode);
  ForwardOutput forward(const RgbImage& image, ops::Mode mode);

  // Stages of the pipeline, exposed for verification. Spatial extents must
  // already be multiples of input_multiple() where a stage downsamples.
  nn::LcMapOutput lc_map(nn::LcMapBlock& block, const Tensor& images, const Tensor& component, ops::Mode mode);
  nn::EncoderOutput encode(const nn::Encoder& enc, const Tensor& boosted, const Tensor& features) const;
  Tensor lccab(const Tensor& e_l, const Tensor& g_l, const Tensor& e_c, const Tensor& g_c) const;
  Tensor decode(const Tensor& fused, const std::vector<Tensor>& skips_l, const std::vector<Tensor>& skips_c) const;
  Tensor lcgrb(const Tensor& reconstructed) const;

  nn::LcMapBlock& lcmap_l() { return lcmap_l_; }
  nn::LcMapBlock& lcmap_c() { return lcmap_c_; }
  const nn::Encoder& enc_l() const { return enc_l_; }
  const nn::Encoder& enc_c() const { return enc_c_; }
  nn::Lccab& lccab_block() { return lccab_; }
  nn::Decoder& decoder() { return decoder_; }
  nn::Lcgrb& refine_block() { return lcgrb_; }

  /// Learnable tensors in registration order; names are unique.
  const std::vector<NamedTensor>& parameters() const { return params_; }
  /// Running statistics, saved with checkpoints but never optimized.
  const std::vector<NamedTensor>& buffers() const { return buffers_; }
  std::size_t parameter_count() const;
  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;

  nn::LcMapBlock lcmap_l_, lcmap_c_;
  nn::Encoder enc_l_, enc_c_;
  nn::Lccab lccab_;
  nn::Decoder decoder_;
  nn::Lcgrb lcgrb_;

  friend class ModelBuilder;
};

}  // namespace tfformer
