#include "tfformer/model.hpp"

#include <cmath>
#include <sstream>

namespace tfformer {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t parse_count(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(value, &pos);
    if (pos != value.size() || v < 0) throw std::invalid_argument(value);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
}

std::string join(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

}  // namespace

void ModelConfig::validate() const {
  if (base_width == 0) throw ConfigError("base_width: must be >= 1");
  if (stages == 0 || stages > 6) throw ConfigError("stages: must be in [1, 6]");
  if (heads_per_stage.size() != stages) {
    throw ConfigError("heads_per_stage: expected " + std::to_string(stages) + " entries, got " +
                      std::to_string(heads_per_stage.size()));
  }
  for (std::size_t s = 0; s < stages; ++s) {
    const auto h = heads_per_stage[s];
    if (h == 0 || width_at(s) % h != 0) {
      throw ConfigError("heads_per_stage: " + std::to_string(h) + " heads do not divide stage " +
                        std::to_string(s) + " width " + std::to_string(width_at(s)));
    }
  }
  if (bottleneck_heads == 0 || bottleneck_width() % bottleneck_heads != 0) {
    throw ConfigError("bottleneck_heads: " + std::to_string(bottleneck_heads) + " does not divide width " +
                      std::to_string(bottleneck_width()));
  }
  if (lcgab_per_stage == 0) throw ConfigError("lcgab_per_stage: must be >= 1");
  if (refine_width == 0) throw ConfigError("refine_width: must be >= 1");
  if (refine_heads == 0 || (2 * refine_width) % refine_heads != 0) {
    throw ConfigError("refine_heads: must divide 2 * refine_width = " + std::to_string(2 * refine_width));
  }
  if (ffn_expansion == 0) throw ConfigError("ffn_expansion: must be >= 1");
}

std::string ModelConfig::to_text() const {
  std::ostringstream os;
  os << "base_width = " << base_width << '\n'
     << "stages = " << stages << '\n'
     << "heads_per_stage = " << join(heads_per_stage) << '\n'
     << "bottleneck_heads = " << bottleneck_heads << '\n'
     << "lcgab_per_stage = " << lcgab_per_stage << '\n'
     << "refine_width = " << refine_width << '\n'
     << "refine_heads = " << refine_heads << '\n'
     << "ffn_expansion = " << ffn_expansion << '\n';
  return os.str();
}

bool ModelConfig::set(const std::string& key, const std::string& value) {
  if (key == "base_width") base_width = parse_count(key, value);
  else if (key == "stages") stages = parse_count(key, value);
  else if (key == "bottleneck_heads") bottleneck_heads = parse_count(key, value);
  else if (key == "lcgab_per_stage") lcgab_per_stage = parse_count(key, value);
  else if (key == "refine_width") refine_width = parse_count(key, value);
  else if (key == "refine_heads") refine_heads = parse_count(key, value);
  else if (key == "ffn_expansion") ffn_expansion = parse_count(key, value);
  else if (key == "heads_per_stage") {
    heads_per_stage.clear();
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, ',')) heads_per_stage.push_back(parse_count(key, trim(item)));
  } else {
    return false;
  }
  return true;
}

ModelConfig ModelConfig::parse(const std::string& text) {
  ModelConfig cfg;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("malformed config line: '" + line + "'");
    const auto key = trim(line.substr(0, eq));
    if (!cfg.set(key, trim(line.substr(eq + 1)))) throw ConfigError("unknown model config key: " + key);
  }
  cfg.validate();
  return cfg;
}

namespace nn {

Tensor Conv::operator()(const Tensor& x) const { return ops::conv2d(x, weight, bias, stride, padding); }

Tensor ConvTranspose::operator()(const Tensor& x) const {
  return ops::conv_transpose2d(x, weight, bias, stride, 1, stride - 1);
}

Tensor BatchNorm::operator()(const Tensor& x, ops::Mode mode) { return ops::batch_norm(x, gamma, beta, state, mode); }

Tensor multi_head_attention(const HeadProjections& p, const Tensor& query_src, const Tensor& kv_src) {
  if (query_src.rank() != 4 || query_src.shape() != kv_src.shape()) {
    throw DimensionError("attention: query source " + shape_str(query_src.shape()) + " and key/value source " +
                         shape_str(kv_src.shape()) + " must be matching NCHW tensors");
  }
  const std::size_t batch = query_src.dim(0), channels = query_src.dim(1);
  if (channels % p.heads != 0) {
    throw ConfigError("attention: " + std::to_string(p.heads) + " heads do not divide " + std::to_string(channels) +
                      " channels");
  }
  const std::size_t d = channels / p.heads;
  std::vector<Tensor> parts;
  parts.reserve(batch * p.heads);
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t h = 0; h < p.heads; ++h) {
      const Tensor xq = ops::tokens(query_src, n, h * d, (h + 1) * d);
      const Tensor xkv = &query_src == &kv_src ? xq : ops::tokens(kv_src, n, h * d, (h + 1) * d);
      const Tensor q = ops::matmul(xq, p.wq[h]);
      const Tensor k = ops::matmul(xkv, p.wk[h]);
      const Tensor v = ops::matmul(xkv, p.wv[h]);
      const Tensor scores = ops::div_by_scalar(ops::matmul(q, ops::transpose(k)), p.alpha[h]);
      parts.push_back(ops::matmul(ops::softmax(scores, 1), v));
    }
  }
  return ops::from_tokens(parts, batch, query_src.dim(2), query_src.dim(3));
}

Tensor Lcgab::feed_forward(const Tensor& x) const { return ffn_out(ops::gelu(ffn_in(x))); }

Tensor Lcgab::operator()(const Tensor& boosted, const Tensor& guidance) const {
  if (boosted.shape() != guidance.shape()) {
    throw DimensionError("lcgab: boosted " + shape_str(boosted.shape()) + " vs guidance " +
                         shape_str(guidance.shape()));
  }
  if (boosted.dim(1) != channels) {
    throw DimensionError("lcgab: expected " + std::to_string(channels) + " channels, got " +
                         shape_str(boosted.shape()));
  }
  const Tensor attended = proj(multi_head_attention(attn, boosted, boosted));
  const Tensor y = ops::add(boosted, ops::mul(attended, guidance));
  return ops::add(y, feed_forward(y));
}

}  // namespace nn

// Init std = gain / sqrt(fan_in). Layers feeding GELU use the He gain; maps
// closing a residual branch start small so the gated residual stack stays
// bounded without normalization layers; zero gain means zero-initialized.
constexpr double kGeluGain = 1.4142135623730951;
constexpr double kLinearGain = 1.0;
constexpr double kResidualGain = 0.25;

/// Creates and registers every named tensor with its initializer.
class ModelBuilder {
 public:
  ModelBuilder(TfFormerModel& model, std::uint64_t seed) : model_(model), rng_(seed) {}

  Tensor normal(const std::string& name, Shape shape, double fan_in, double gain) {
    const double sd = gain * std::sqrt(1.0 / fan_in);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng_.normal(0.0, sd);
    return param(name, std::move(shape), std::move(v));
  }
  Tensor constant(const std::string& name, Shape shape, double value) {
    return param(name, shape, std::vector<double>(numel(shape), value));
  }

  nn::Conv conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t stride,
                double gain) {
    nn::Conv c;
    const double fan_in = static_cast<double>(cin * k * k);
    c.weight = gain == 0.0 ? constant(name + ".weight", {cout, cin, k, k}, 0.0)
                           : normal(name + ".weight", {cout, cin, k, k}, fan_in, gain);
    c.bias = constant(name + ".bias", {cout}, 0.0);
    c.stride = stride;
    c.padding = k / 2;
    return c;
  }

  nn::ConvTranspose conv_transpose(const std::string& name, std::size_t cin, std::size_t cout) {
    nn::ConvTranspose c;
    c.weight = normal(name + ".weight", {cin, cout, 3, 3}, static_cast<double>(cin * 9), kLinearGain);
    c.bias = constant(name + ".bias", {cout}, 0.0);
    c.stride = 2;
    return c;
  }

  nn::BatchNorm batch_norm(const std::string& name, std::size_t channels) {
    nn::BatchNorm bn{constant(name + ".gamma", {channels}, 1.0), constant(name + ".beta", {channels}, 0.0),
                     ops::BatchNormState(channels)};
    model_.buffers_.push_back({name + ".running_mean", bn.state.running_mean});
    model_.buffers_.push_back({name + ".running_var", bn.state.running_var});
    return bn;
  }

  nn::HeadProjections heads(const std::string& name, std::size_t channels, std::size_t count) {
    nn::HeadProjections p;
    p.heads = count;
    const std::size_t d = channels / count;
    for (std::size_t h = 0; h < count; ++h) {
      const std::string suffix = ".head" + std::to_string(h);
      p.wq.push_back(normal(name + ".wq" + suffix, {d, d}, static_cast<double>(d), kLinearGain));
      p.wk.push_back(normal(name + ".wk" + suffix, {d, d}, static_cast<double>(d), kLinearGain));
      p.wv.push_back(normal(name + ".wv" + suffix, {d, d}, static_cast<double>(d), kLinearGain));
      p.alpha.push_back(constant(name + ".alpha" + suffix, {1}, std::sqrt(static_cast<double>(d))));
    }
    return p;
  }

  nn::Lcgab lcgab(const std::string& name, std::size_t channels, std::size_t head_count) {
    nn::Lcgab b;
    b.channels = channels;
    b.attn = heads(name + ".attn", channels, head_count);
    b.proj = conv(name + ".proj", channels, channels, 1, 1, kResidualGain);
    const std::size_t hidden = channels * model_.config_.ffn_expansion;
    b.ffn_in = conv(name + ".ffn_in", channels, hidden, 1, 1, kGeluGain);
    b.ffn_out = conv(name + ".ffn_out", hidden, channels, 1, 1, kResidualGain);
    return b;
  }

  nn::LcMapBlock lc_map(const std::string& name, std::size_t in_channels) {
    const std::size_t w = model_.config_.base_width;
    nn::LcMapBlock m;
    for (std::size_t i = 0; i < 3; ++i) {
      m.conv[i] = conv(name + ".conv" + std::to_string(i), i == 0 ? in_channels : w, w, 3, 1, kGeluGain);
      m.bn[i] = batch_norm(name + ".bn" + std::to_string(i), w);
    }
    m.boost = conv(name + ".boost", w, w, 3, 1, kLinearGain);
    return m;
  }

  nn::Encoder encoder(const std::string& name) {
    const auto& cfg = model_.config_;
    nn::Encoder e;
    for (std::size_t s = 0; s < cfg.stages; ++s) {
      const std::string sp = name + ".stage" + std::to_string(s);
      const std::size_t w = cfg.width_at(s);
      nn::EncoderStage st;
      for (std::size_t b = 0; b < cfg.lcgab_per_stage; ++b) {
        st.blocks.push_back(lcgab(sp + ".lcgab" + std::to_string(b), w, cfg.heads_per_stage[s]));
      }
      st.down_features = conv(sp + ".down_features", w, 2 * w, 3, 2, kLinearGain);
      st.down_guidance = conv(sp + ".down_guidance", w, 2 * w, 3, 2, kLinearGain);
      e.stages.push_back(std::move(st));
    }
    return e;
  }

  void build() {
    auto& m = model_;
    const auto& cfg = m.config_;
    m.lcmap_l_ = lc_map("lcmap_L", 4);
    m.lcmap_c_ = lc_map("lcmap_C", 6);
    m.enc_l_ = encoder("enc_L");
    m.enc_c_ = encoder("enc_C");

    const std::size_t bw = cfg.bottleneck_width();
    m.lccab_.self_l = heads("lccab.self_L", bw, cfg.bottleneck_heads);
    m.lccab_.proj_l = conv("lccab.proj_L", bw, bw, 1, 1, kResidualGain);
    m.lccab_.self_c = heads("lccab.self_C", bw, cfg.bottleneck_heads);
    m.lccab_.proj_c = conv("lccab.proj_C", bw, bw, 1, 1, kResidualGain);
    m.lccab_.cross = heads("lccab.cross", bw, cfg.bottleneck_heads);
    m.lccab_.proj_cross = conv("lccab.proj_cross", bw, bw, 1, 1, kResidualGain);

    m.decoder_.stages.resize(cfg.stages);
    for (std::size_t i = cfg.stages; i-- > 0;) {
      const std::string sp = "decoder.stage" + std::to_string(i);
      const std::size_t w = cfg.width_at(i);
      auto& st = m.decoder_.stages[i];
      st.up = conv_transpose(sp + ".up", 2 * w, w);
      for (std::size_t b = 0; b < cfg.lcgab_per_stage; ++b) {
        st.blocks.push_back(lcgab(sp + ".lcgab" + std::to_string(b), w, cfg.heads_per_stage[i]));
      }
    }
    m.decoder_.out_head = conv("decoder.out_head", cfg.base_width, 3, 3, 1, kLinearGain);

    const std::size_t rw = cfg.refine_width;
    m.lcgrb_.lum_conv = conv("lcgrb.lum_conv", 1, rw, 3, 1, kLinearGain);
    m.lcgrb_.chroma_conv = conv("lcgrb.chroma_conv", 3, rw, 3, 1, kLinearGain);
    m.lcgrb_.block = lcgab("lcgrb.lcgab", 2 * rw, cfg.refine_heads);
    m.lcgrb_.out = conv("lcgrb.out", 2 * rw, 3, 3, 1, 0.0);
  }

 private:
  Tensor param(const std::string& name, Shape shape, std::vector<double> values) {
    Tensor t = Tensor::from(std::move(shape), std::move(values), true);
    model_.params_.push_back({name, t});
    return t;
  }

  TfFormerModel& model_;
  Rng rng_;
};

TfFormerModel::TfFormerModel(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  ModelBuilder(*this, seed).build();
}

std::size_t TfFormerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void TfFormerModel::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

nn::LcMapOutput TfFormerModel::lc_map(nn::LcMapBlock& block, const Tensor& images, const Tensor& component,
                                      ops::Mode mode) {
  if (images.rank() != 4 || component.rank() != 4 || images.dim(0) != component.dim(0) ||
      images.dim(2) != component.dim(2) || images.dim(3) != component.dim(3)) {
    throw DimensionError("lc_map: image " + shape_str(images.shape()) + " and component " +
                         shape_str(component.shape()) + " disagree");
  }
  Tensor h = ops::concat_channels({images, component});
  Tensor taps[3];
  for (std::size_t i = 0; i < 3; ++i) {
    h = ops::gelu(block.bn[i](block.conv[i](h), mode));
    taps[i] = h;
  }
  return {taps[2], block.boost(taps[1])};
}

nn::EncoderOutput TfFormerModel::encode(const nn::Encoder& enc, const Tensor& boosted, const Tensor& features) const {
  const std::size_t m = config_.input_multiple();
  if (boosted.rank() != 4 || boosted.dim(2) % m != 0 || boosted.dim(3) % m != 0) {
    throw DimensionError("encode: spatial extents of " + shape_str(boosted.shape()) + " must be multiples of " +
                         std::to_string(m));
  }
  nn::EncoderOutput out;
  Tensor x = boosted;
  Tensor g = features;
  for (const auto& st : enc.stages) {
    for (const auto& blk : st.blocks) x = blk(x, g);
    out.skips.push_back(x);
    x = st.down_features(x);
    g = st.down_guidance(g);
  }
  out.features = x;
  out.guidance = g;
  return out;
}

Tensor TfFormerModel::lccab(const Tensor& e_l, const Tensor& g_l, const Tensor& e_c, const Tensor& g_c) const {
  if (e_l.shape() != e_c.shape() || g_l.shape() != e_l.shape() || g_c.shape() != e_c.shape()) {
    throw DimensionError("lccab: luminance " + shape_str(e_l.shape()) + " and chrominance " +
                         shape_str(e_c.shape()) + " bottlenecks disagree");
  }
  const auto& b = lccab_;
  const Tensor a_l = ops::add(e_l, ops::mul(b.proj_l(nn::multi_head_attention(b.self_l, e_l, e_l)), g_l));
  const Tensor a_c = ops::add(e_c, ops::mul(b.proj_c(nn::multi_head_attention(b.self_c, e_c, e_c)), g_c));
  return ops::add(a_l, b.proj_cross(nn::multi_head_attention(b.cross, a_l, a_c)));
}

Tensor TfFormerModel::decode(const Tensor& fused, const std::vector<Tensor>& skips_l,
                             const std::vector<Tensor>& skips_c) const {
  if (skips_l.size() != config_.stages || skips_c.size() != config_.stages) {
    throw DimensionError("decode: expected " + std::to_string(config_.stages) + " skips per encoder");
  }
  Tensor x = fused;
  for (std::size_t s = config_.stages; s-- > 0;) {
    const auto& st = decoder_.stages[s];
    x = st.up(x);
    if (x.shape() != skips_l[s].shape() || skips_l[s].shape() != skips_c[s].shape()) {
      throw DimensionError("decode: stage " + std::to_string(s) + " upsampled " + shape_str(x.shape()) +
                           " does not match skips " + shape_str(skips_l[s].shape()) + " / " +
                           shape_str(skips_c[s].shape()));
    }
    const Tensor guide = ops::add(skips_l[s], skips_c[s]);
    x = ops::add(x, guide);
    for (const auto& blk : st.blocks) x = blk(x, guide);
  }
  return decoder_.out_head(x);
}

Tensor TfFormerModel::lcgrb(const Tensor& reconstructed) const {
  const LcPair lc = decompose(reconstructed);
  const Tensor r_lc = ops::concat_channels({lcgrb_.lum_conv(lc.luminance), lcgrb_.chroma_conv(lc.chrominance)});
  return ops::add(reconstructed, lcgrb_.out(lcgrb_.block(r_lc, r_lc)));
}

ForwardOutput TfFormerModel::forward(const Tensor& images, ops::Mode mode) {
  Tensor batch = images;
  if (images.rank() == 3) batch = ops::stack({images});
  if (batch.rank() != 4 || batch.dim(1) != 3) {
    throw DimensionError("forward: expected [N, 3, H, W] input, got " + shape_str(images.shape()));
  }
  const std::size_t h = batch.dim(2), w = batch.dim(3), m = config_.input_multiple();
  const std::size_t ph = (h + m - 1) / m * m, pw = (w + m - 1) / m * m;
  Tensor x = (ph == h && pw == w) ? batch : ops::reflect_pad(batch, ph, pw);

  const LcPair lc = decompose(x);
  const auto map_l = lc_map(lcmap_l_, x, lc.luminance, mode);
  const auto map_c = lc_map(lcmap_c_, x, lc.chrominance, mode);
  const auto e_l = encode(enc_l_, map_l.boosted, map_l.features);
  const auto e_c = encode(enc_c_, map_c.boosted, map_c.features);
  const Tensor fused = lccab(e_l.features, e_l.guidance, e_c.features, e_c.guidance);
  Tensor rec = decode(fused, e_l.skips, e_c.skips);
  Tensor ref = lcgrb(rec);

  if (ph != h || pw != w) {
    rec = ops::crop(rec, h, w);
    ref = ops::crop(ref, h, w);
  }
  if (mode == ops::Mode::eval) {
    rec = ops::clamp(rec, 0.0, 1.0);
    ref = ops::clamp(ref, 0.0, 1.0);
  }
  if (images.rank() == 3) {
    rec = ops::select(rec, 0);
    ref = ops::select(ref, 0);
  }
  return {rec, ref};
}

ForwardOutput TfFormerModel::forward(const RgbImage& image, ops::Mode mode) { return forward(image.pixels, mode); }

}  // namespace tfformer
