#include "tfformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "tfformer/training.hpp"

namespace tfformer {

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

std::vector<GradcheckSample> check_gradients(const std::function<Tensor()>& loss, const std::vector<NamedTensor>& wrt,
                                             std::size_t samples, Rng& rng, double step) {
  for (const auto& t : wrt) {
    Tensor v = t.value;
    v.set_requires_grad(true);
    v.zero_grad();
  }
  loss().backward();
  std::vector<GradcheckSample> out;
  for (std::size_t s = 0; s < samples; ++s) {
    const auto& pick = wrt[rng.below(wrt.size())];
    Tensor v = pick.value;
    const std::size_t i = rng.below(v.size());
    const double analytic = v.grad()[i];
    auto data = v.mutable_data();
    const double orig = data[i];
    data[i] = orig + step;
    const double up = loss().item();
    data[i] = orig - step;
    const double down = loss().item();
    data[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    out.push_back({pick.name, i, analytic, numeric, relative_error(analytic, numeric)});
  }
  return out;
}

bool GradcheckReport::passed() const {
  return !blocks.empty() && std::all_of(blocks.begin(), blocks.end(), [](const BlockCheck& b) { return b.passed; });
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::from(std::move(shape), std::move(v), true);
}

std::vector<double> random_weights(std::size_t n, Rng& rng) {
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal(0.0, 1.0) / static_cast<double>(n);
  return w;
}

// Smooth scalar probe: sum of <output_i, fixed random weights_i>.
class Probe {
 public:
  explicit Probe(Rng& rng) : rng_(rng) {}
  Tensor operator()(const std::vector<Tensor>& outputs) {
    if (weights_.empty()) {
      for (const auto& o : outputs) weights_.push_back(random_weights(o.size(), rng_));
    }
    Tensor total = ops::weighted_sum(outputs[0], weights_[0]);
    for (std::size_t i = 1; i < outputs.size(); ++i) total = ops::add(total, ops::weighted_sum(outputs[i], weights_[i]));
    return total;
  }

 private:
  Rng& rng_;
  std::vector<std::vector<double>> weights_;
};

std::vector<NamedTensor> params_with_prefix(const TfFormerModel& m, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& p : m.parameters()) {
    if (p.name.rfind(prefix, 0) == 0) out.push_back(p);
  }
  return out;
}

// Offsets whose luminance and every chrominance component stay at least
// ~0.05 away from zero, so |.| kinks are never crossed by a 1e-4 probe.
Tensor offset_target(const Tensor& base, Rng& rng) {
  const std::size_t plane = base.dim(base.rank() - 1) * base.dim(base.rank() - 2);
  const std::size_t batch = base.size() / (3 * plane);
  std::vector<double> v(base.data().begin(), base.data().end());
  constexpr double kPattern[3] = {0.5, -0.4, 0.3};
  for (std::size_t n = 0; n < batch; ++n) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
      for (std::size_t c = 0; c < 3; ++c) v[(n * 3 + c) * plane + i] += sign * kPattern[c];
    }
  }
  return Tensor::from(base.shape(), std::move(v));
}

BlockCheck summarize(const std::string& block, const std::vector<GradcheckSample>& samples, double tol) {
  BlockCheck b;
  b.block = block;
  b.samples = samples.size();
  for (const auto& s : samples) {
    if (s.rel_error >= b.max_rel_error) {
      b.max_rel_error = s.rel_error;
      b.worst_tensor = s.tensor + "[" + std::to_string(s.index) + "]";
    }
  }
  b.passed = std::isfinite(b.max_rel_error) && b.max_rel_error < tol;
  return b;
}

}  // namespace

GradcheckReport run_gradcheck(const ModelConfig& config, const GradcheckOptions& opt) {
  config.validate();
  TfFormerModel model(config, opt.seed);
  Rng rng(opt.seed ^ 0x6772616463686bULL);
  // The zero-initialized refinement output would hide every gradient behind
  // it; give it small random weights for verification.
  for (auto& v : model.refine_block().out.weight.mutable_data()) v = rng.normal(0.0, 0.01);

  const std::size_t s = opt.image_size;
  const std::size_t m = config.input_multiple();
  if (s % m != 0) throw ConfigError("gradcheck image_size must be a multiple of " + std::to_string(m));
  const auto mode = ops::Mode::train;
  GradcheckReport report;
  const auto run = [&](const std::string& name, const std::function<Tensor()>& loss, std::vector<NamedTensor> wrt,
                       std::size_t samples) {
    report.blocks.push_back(summarize(name, check_gradients(loss, wrt, samples, rng, opt.step), opt.tolerance));
  };

  Tensor image = Tensor::from({1, 3, s, s}, std::vector<double>(3 * s * s), true);
  for (auto& v : image.mutable_data()) v = rng.uniform();

  // (a), (b) LC mapping blocks.
  for (const bool lum : {true, false}) {
    Probe probe(rng);
    auto wrt = params_with_prefix(model, lum ? "lcmap_L." : "lcmap_C.");
    wrt.push_back({"input", image});
    run(lum ? "(a) lc_map_L" : "(b) lc_map_C",
        [&, lum] {
          const LcPair lc = decompose(image);
          auto out = model.lc_map(lum ? model.lcmap_l() : model.lcmap_c(), image, lum ? lc.luminance : lc.chrominance, mode);
          return probe({out.features, out.boosted});
        },
        wrt, opt.samples_per_block);
  }

  const std::size_t w0 = config.base_width;
  {
    Probe probe(rng);
    const Tensor ib = random_tensor({1, w0, s, s}, rng), f = random_tensor({1, w0, s, s}, rng);
    auto wrt = params_with_prefix(model, "enc_L.stage0.lcgab0.");
    wrt.push_back({"boosted", ib});
    wrt.push_back({"guidance", f});
    const auto& block = model.enc_l().stages[0].blocks[0];
    run("lcgab", [&] { return probe({block(ib, f)}); }, wrt, opt.samples_per_block);
  }

  // (c), (d) encoders.
  for (const bool lum : {true, false}) {
    Probe probe(rng);
    const Tensor ib = random_tensor({1, w0, s, s}, rng), f = random_tensor({1, w0, s, s}, rng);
    auto wrt = params_with_prefix(model, lum ? "enc_L." : "enc_C.");
    wrt.push_back({"boosted", ib});
    wrt.push_back({"features", f});
    run(lum ? "(c) encoder_L" : "(d) encoder_C",
        [&, lum] {
          auto e = model.encode(lum ? model.enc_l() : model.enc_c(), ib, f);
          std::vector<Tensor> outs{e.features, e.guidance};
          outs.insert(outs.end(), e.skips.begin(), e.skips.end());
          return probe(outs);
        },
        wrt, opt.samples_per_block);
  }

  // (e) LCCAB. A 2x2 bottleneck so attention has more than one key.
  {
    Probe probe(rng);
    const std::size_t bw = config.bottleneck_width();
    const Tensor el = random_tensor({1, bw, 2, 2}, rng), gl = random_tensor({1, bw, 2, 2}, rng);
    const Tensor ec = random_tensor({1, bw, 2, 2}, rng), gc = random_tensor({1, bw, 2, 2}, rng);
    auto wrt = params_with_prefix(model, "lccab.");
    for (const auto& [n, t] : {std::pair{"E_L", el}, {"G_L", gl}, {"E_C", ec}, {"G_C", gc}}) wrt.push_back({n, t});
    run("(e) lccab", [&] { return probe({model.lccab(el, gl, ec, gc)}); }, wrt, opt.samples_per_block);
  }

  // (f) decoder.
  {
    Probe probe(rng);
    const std::size_t bs = s / m;
    const Tensor fused = random_tensor({1, config.bottleneck_width(), bs, bs}, rng);
    std::vector<Tensor> sl, sc;
    for (std::size_t st = 0; st < config.stages; ++st) {
      const std::size_t e = s >> st;
      sl.push_back(random_tensor({1, config.width_at(st), e, e}, rng));
      sc.push_back(random_tensor({1, config.width_at(st), e, e}, rng));
    }
    auto wrt = params_with_prefix(model, "decoder.");
    wrt.push_back({"fused", fused});
    wrt.push_back({"skip_L0", sl[0]});
    wrt.push_back({"skip_C0", sc[0]});
    run("(f) decoder", [&] { return probe({model.decode(fused, sl, sc)}); }, wrt, opt.samples_per_block);
  }

  // (g) LCGRB.
  {
    Probe probe(rng);
    Tensor rec = Tensor::from({1, 3, s, s}, std::vector<double>(3 * s * s), true);
    for (auto& v : rec.mutable_data()) v = rng.uniform();
    auto wrt = params_with_prefix(model, "lcgrb.");
    wrt.push_back({"I_rec", rec});
    run("(g) lcgrb", [&] { return probe({model.lcgrb(rec)}); }, wrt, opt.samples_per_block);
  }

  // Loss: gradients with respect to both predictions.
  {
    Tensor gt = Tensor::from({1, 3, s, s}, std::vector<double>(3 * s * s));
    for (auto& v : gt.mutable_data()) v = rng.uniform();
    Tensor rec = offset_target(gt, rng), ref = offset_target(gt, rng);
    rec.set_requires_grad(true);
    ref.set_requires_grad(true);
    run("loss", [&] { return total_loss(gt, rec, ref, 0.2); }, {{"I_rec", rec}, {"I_ref", ref}},
        opt.samples_per_block);
  }

  // Full model against a target offset from its own initial output.
  {
    image.set_requires_grad(false);
    const auto init = model.forward(image, mode);
    const Tensor gt = offset_target(init.reconstructed.detach(), rng);
    run("full_model",
        [&] {
          const auto out = model.forward(image, mode);
          return total_loss(gt, out.reconstructed, out.refined, 0.2);
        },
        model.parameters(), opt.model_samples);
  }
  return report;
}

}  // namespace tfformer
