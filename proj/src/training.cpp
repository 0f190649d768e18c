#include "tfformer/training.hpp"

#include <charconv>
#include <cmath>
#include <sstream>

#include "tfformer/checkpoint.hpp"
#include "tfformer/metrics.hpp"

namespace tfformer {

Tensor lcc_distance(const Tensor& gt, const Tensor& pred) {
  if (gt.shape() != pred.shape()) {
    throw DimensionError("lcc_distance: shape mismatch " + shape_str(gt.shape()) + " vs " + shape_str(pred.shape()));
  }
  const LcPair a = decompose(gt);
  const LcPair b = decompose(pred);
  const Tensor total = ops::add(ops::sum(ops::abs(ops::sub(a.luminance, b.luminance))),
                                ops::sum(ops::abs(ops::sub(a.chrominance, b.chrominance))));
  return ops::scale(total, 1.0 / static_cast<double>(a.luminance.size()));
}

Tensor l1_loss(const Tensor& gt, const Tensor& pred) {
  if (gt.shape() != pred.shape()) {
    throw DimensionError("l1_loss: shape mismatch " + shape_str(gt.shape()) + " vs " + shape_str(pred.shape()));
  }
  return ops::mean(ops::abs(ops::sub(gt, pred)));
}

Tensor total_loss(const Tensor& gt, const Tensor& reconstructed, const Tensor& refined, double lambda_r) {
  const Tensor l_r = ops::add(l1_loss(gt, reconstructed), l1_loss(gt, refined));
  const Tensor l_lc = ops::add(lcc_distance(gt, reconstructed), lcc_distance(gt, refined));
  return ops::scale(ops::add(l_r, l_lc), lambda_r);
}

void adam_step(TrainState& state, const std::vector<NamedTensor>& params) {
  for (const auto& p : params) {
    if (!p.value.has_grad()) continue;
    for (double g : p.value.node().grad) {
      if (!std::isfinite(g)) throw TrainingError("non-finite gradient in parameter " + p.name);
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (const auto& p : params) {
    Tensor value = p.value;
    auto& mom = state.moments[p.name];
    if (mom.m.empty()) {
      mom.m.assign(value.size(), 0.0);
      mom.v.assign(value.size(), 0.0);
    }
    if (!value.has_grad()) continue;
    auto w = value.mutable_data();
    auto g = value.mutable_grad();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = state.beta1 * mom.m[i] + (1.0 - state.beta1) * g[i];
      mom.v[i] = state.beta2 * mom.v[i] + (1.0 - state.beta2) * g[i] * g[i];
      const double m_hat = mom.m[i] / c1;
      const double v_hat = mom.v[i] / c2;
      w[i] -= state.lr * m_hat / (std::sqrt(v_hat) + state.eps);
      g[i] = 0.0;
    }
  }
}

double plateau_step(TrainState& state, double metric) {
  auto& s = state.scheduler;
  if (!s.has_best || metric > s.best + s.threshold) {
    s.has_best = true;
    s.best = metric;
    s.bad_calls = 0;
    return state.lr;
  }
  if (++s.bad_calls >= s.patience) {
    state.lr = std::max(state.lr * s.factor, s.min_lr);
    s.bad_calls = 0;
  }
  return state.lr;
}

TrainState initial_state(const TrainConfig& cfg) {
  TrainState s;
  s.lr = cfg.lr;
  s.beta1 = cfg.beta1;
  s.beta2 = cfg.beta2;
  s.lambda_r = cfg.lambda_r;
  s.scheduler.factor = cfg.plateau_factor;
  s.scheduler.patience = cfg.plateau_patience;
  s.scheduler.min_lr = cfg.min_lr;
  s.sampler_rng = Rng(cfg.seed ^ 0x5a17c0ffee5eedULL).next_u64();
  return s;
}

namespace {

class BatchSampler {
 public:
  BatchSampler(const std::vector<PairRecord>& data, std::uint64_t seed, TrainState& state, std::size_t patch)
      : data_(data), seed_(seed), state_(state), patch_(patch), crop_rng_(state.sampler_rng) {
    for (const auto& p : data_) {
      if (p.low.height() < patch || p.low.width() < patch) {
        throw TrainingError("training pair " + p.source_id + " is smaller than the " + std::to_string(patch) +
                            "px patch");
      }
    }
    shuffle();
  }

  // Returns (low, reference) batches [N, 3, patch, patch].
  std::pair<Tensor, Tensor> next(std::size_t batch) {
    std::vector<double> low, ref;
    low.reserve(batch * 3 * patch_ * patch_);
    ref.reserve(batch * 3 * patch_ * patch_);
    for (std::size_t b = 0; b < batch; ++b) {
      if (state_.sampler_pos == data_.size()) {
        ++state_.sampler_epoch;
        state_.sampler_pos = 0;
        shuffle();
      }
      const auto& pair = data_[order_[state_.sampler_pos++]];
      const std::size_t h = pair.low.height(), w = pair.low.width();
      const std::size_t r = crop_rng_.below(h - patch_ + 1);
      const std::size_t c = crop_rng_.below(w - patch_ + 1);
      for (const auto* img : {&pair.low, &pair.reference}) {
        auto& dst = img == &pair.low ? low : ref;
        for (std::size_t ch = 0; ch < 3; ++ch) {
          for (std::size_t y = 0; y < patch_; ++y) {
            const double* src = img->pixels.data().data() + (ch * h + r + y) * w + c;
            dst.insert(dst.end(), src, src + patch_);
          }
        }
      }
    }
    state_.sampler_rng = crop_rng_.state();
    return {Tensor::from({batch, 3, patch_, patch_}, std::move(low)),
            Tensor::from({batch, 3, patch_, patch_}, std::move(ref))};
  }

 private:
  void shuffle() {
    order_.resize(data_.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    Rng rng(seed_ + 0x9e3779b97f4a7c15ULL * (state_.sampler_epoch + 1));
    for (std::size_t i = order_.size(); i > 1; --i) std::swap(order_[i - 1], order_[rng.below(i)]);
  }

  const std::vector<PairRecord>& data_;
  std::uint64_t seed_;
  TrainState& state_;
  std::size_t patch_;
  Rng crop_rng_;
  std::vector<std::size_t> order_;
};

}  // namespace

double validation_psnr(TfFormerModel& model, const std::vector<PairRecord>& pairs) {
  double total = 0.0;
  for (const auto& p : pairs) {
    const auto out = model.forward(p.low, ops::Mode::eval);
    total += psnr(RgbImage(out.refined), p.reference, 1.0);
  }
  return pairs.empty() ? 0.0 : total / static_cast<double>(pairs.size());
}

TrainResult train(TfFormerModel& model, const std::vector<PairRecord>& train_set, const std::vector<PairRecord>& val_set,
                  const TrainConfig& cfg, TrainState state, const TrainHooks& hooks) {
  if (train_set.empty()) throw TrainingError("training set is empty");
  if (cfg.batch == 0 || cfg.patch == 0) throw TrainingError("batch and patch must be positive");
  std::vector<PairRecord> val = val_set;
  if (val.empty()) val.assign(train_set.begin(), train_set.begin() + static_cast<long>(std::min<std::size_t>(4, train_set.size())));

  TrainResult result;
  BatchSampler sampler(train_set, cfg.seed, state, cfg.patch);
  // A batch never holds the same pair twice within an epoch.
  const std::size_t batch = std::min(cfg.batch, train_set.size());
  double interval_loss = 0.0;
  std::size_t interval_steps = 0;
  model.zero_grad();
  while (state.step < cfg.steps) {
    auto [low, ref] = sampler.next(batch);
    const auto out = model.forward(low, ops::Mode::train);
    const Tensor loss = total_loss(ref, out.reconstructed, out.refined, state.lambda_r);
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("non-finite loss at step " + std::to_string(state.step + 1));
    loss.backward();
    adam_step(state, model.parameters());
    result.losses.push_back(value);
    interval_loss += value;
    ++interval_steps;
    if (hooks.on_step) hooks.on_step(state.step, value);

    const bool last = state.step == cfg.steps;
    if ((cfg.validate_every && state.step % cfg.validate_every == 0) || last) {
      MetricRecord rec;
      rec.step = state.step;
      rec.train_loss = interval_loss / static_cast<double>(interval_steps);
      rec.val_psnr = validation_psnr(model, val);
      if (state.step >= cfg.scheduler_start) plateau_step(state, rec.val_psnr);
      rec.lr = state.lr;
      result.log.push_back(rec);
      if (hooks.on_validation) hooks.on_validation(rec);
      interval_loss = 0.0;
      interval_steps = 0;
    }
    if (((cfg.checkpoint_every && state.step % cfg.checkpoint_every == 0) || last) && hooks.on_checkpoint) {
      hooks.on_checkpoint(state);
    }
  }
  result.state = std::move(state);
  return result;
}

namespace {

std::string exact(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double parse_double(const std::map<std::string, std::string>& f, const std::string& key) {
  const auto it = f.find(key);
  if (it == f.end()) throw CheckpointError("train state: missing field " + key);
  double v = 0.0;
  const auto r = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (r.ec != std::errc()) throw CheckpointError("train state: bad value for " + key);
  return v;
}

std::uint64_t parse_u64(const std::map<std::string, std::string>& f, const std::string& key) {
  const auto it = f.find(key);
  if (it == f.end()) throw CheckpointError("train state: missing field " + key);
  std::uint64_t v = 0;
  const auto r = std::from_chars(it->second.data(), it->second.data() + it->second.size(), v);
  if (r.ec != std::errc()) throw CheckpointError("train state: bad value for " + key);
  return v;
}

}  // namespace

void save_train_state(const TrainState& s, const std::filesystem::path& path) {
  std::ostringstream h;
  h << "step = " << s.step << "\nlr = " << exact(s.lr) << "\nbeta1 = " << exact(s.beta1) << "\nbeta2 = " << exact(s.beta2)
    << "\neps = " << exact(s.eps) << "\nlambda_r = " << exact(s.lambda_r) << "\nplateau_factor = " << exact(s.scheduler.factor)
    << "\nplateau_patience = " << s.scheduler.patience << "\nplateau_threshold = " << exact(s.scheduler.threshold)
    << "\nmin_lr = " << exact(s.scheduler.min_lr) << "\nplateau_has_best = " << (s.scheduler.has_best ? 1 : 0)
    << "\nplateau_best = " << exact(s.scheduler.best) << "\nplateau_bad_calls = " << s.scheduler.bad_calls
    << "\nsampler_epoch = " << s.sampler_epoch << "\nsampler_pos = " << s.sampler_pos
    << "\nsampler_rng = " << s.sampler_rng << '\n';
  Container c;
  c.magic = kTrainStateMagic;
  c.header = h.str();
  for (const auto& [name, mom] : s.moments) {
    c.records.push_back({"m." + name, {mom.m.size()}, mom.m});
    c.records.push_back({"v." + name, {mom.v.size()}, mom.v});
  }
  write_container(path, c);
}

TrainState load_train_state(const std::filesystem::path& path) {
  const Container c = read_container(path, kTrainStateMagic);
  std::map<std::string, std::string> f;
  std::istringstream in(c.header);
  std::string line;
  while (std::getline(in, line)) {
    const auto eq = line.find(" = ");
    if (eq != std::string::npos) f[line.substr(0, eq)] = line.substr(eq + 3);
  }
  TrainState s;
  s.step = parse_u64(f, "step");
  s.lr = parse_double(f, "lr");
  s.beta1 = parse_double(f, "beta1");
  s.beta2 = parse_double(f, "beta2");
  s.eps = parse_double(f, "eps");
  s.lambda_r = parse_double(f, "lambda_r");
  s.scheduler.factor = parse_double(f, "plateau_factor");
  s.scheduler.patience = parse_u64(f, "plateau_patience");
  s.scheduler.threshold = parse_double(f, "plateau_threshold");
  s.scheduler.min_lr = parse_double(f, "min_lr");
  s.scheduler.has_best = parse_u64(f, "plateau_has_best") != 0;
  s.scheduler.best = parse_double(f, "plateau_best");
  s.scheduler.bad_calls = parse_u64(f, "plateau_bad_calls");
  s.sampler_epoch = parse_u64(f, "sampler_epoch");
  s.sampler_pos = parse_u64(f, "sampler_pos");
  s.sampler_rng = parse_u64(f, "sampler_rng");
  for (const auto& r : c.records) {
    if (r.name.size() < 3 || r.name[1] != '.' || (r.name[0] != 'm' && r.name[0] != 'v')) {
      throw CheckpointError(path.string() + ": unexpected record " + r.name);
    }
    auto& mom = s.moments[r.name.substr(2)];
    (r.name[0] == 'm' ? mom.m : mom.v) = r.values;
  }
  return s;
}

}  // namespace tfformer
