#include "tfformer/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>

#include "tfformer/image_io.hpp"

namespace tfformer {

namespace {

RgbImage crop_image(const RgbImage& img, std::size_t row, std::size_t col, std::size_t size) {
  const std::size_t h = img.height(), w = img.width();
  std::vector<double> out(3 * size * size);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t y = 0; y < size; ++y) {
      const double* src = img.pixels.data().data() + (c * h + row + y) * w + col;
      std::copy(src, src + size, out.data() + (c * size + y) * size);
    }
  }
  return RgbImage(Tensor::from({3, size, size}, std::move(out)));
}

std::vector<std::size_t> grid_origins(std::size_t extent, std::size_t size, std::size_t stride) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r + size <= extent; r += stride) out.push_back(r);
  if (out.empty() || out.back() + size < extent) out.push_back(extent - size);
  return out;
}

std::vector<double> luminance_plane(const RgbImage& img) {
  const Tensor l = luminance(img.pixels);
  return std::vector<double>(l.data().begin(), l.data().end());
}

}  // namespace

bool PairRecord::accepted() const {
  return std::all_of(verdicts.begin(), verdicts.end(), [](const FilterVerdict& v) { return v.passed; });
}

std::vector<PairRecord> extract_patches(const PairRecord& pair, std::size_t size, std::size_t stride,
                                        FilterVerdict* warning) {
  if (pair.low.height() != pair.reference.height() || pair.low.width() != pair.reference.width()) {
    throw DimensionError("extract_patches: " + pair.source_id + " low and reference sizes differ");
  }
  if (size == 0 || stride == 0) throw std::invalid_argument("extract_patches: size and stride must be positive");
  const std::size_t h = pair.low.height(), w = pair.low.width();
  if (size > h || size > w) {
    if (warning) {
      *warning = {"patch_size", static_cast<double>(std::min(h, w)), false,
                  "image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than patch " + std::to_string(size)};
    }
    return {};
  }
  std::vector<PairRecord> out;
  for (std::size_t r : grid_origins(h, size, stride)) {
    for (std::size_t c : grid_origins(w, size, stride)) {
      PairRecord p;
      p.low = crop_image(pair.low, r, c, size);
      p.reference = crop_image(pair.reference, r, c, size);
      p.source_id = pair.source_id;
      p.row = pair.row + r;
      p.col = pair.col + c;
      out.push_back(std::move(p));
    }
  }
  return out;
}

double mean_intensity(const RgbImage& img) {
  double s = 0.0;
  for (double v : img.pixels.data()) s += v;
  return 255.0 * s / static_cast<double>(img.pixels.size());
}

FilterVerdict brightness_filter(const RgbImage& reference, double threshold) {
  const double avg = mean_intensity(reference);
  // Sums of k/255 values can land a hair under an integer mean; compare in
  // units of 1/255 with a half-ulp-scale allowance.
  const bool below = avg < threshold - 1e-9;
  return {"brightness", avg, !below, {}};
}

double variance_of_laplacian(const RgbImage& img) {
  const std::size_t h = img.height(), w = img.width();
  if (h < 3 || w < 3) return 0.0;
  const auto l = luminance_plane(img);
  std::vector<double> resp;
  resp.reserve((h - 2) * (w - 2));
  for (std::size_t y = 1; y + 1 < h; ++y) {
    for (std::size_t x = 1; x + 1 < w; ++x) {
      const double c = l[y * w + x];
      resp.push_back(l[(y - 1) * w + x] + l[(y + 1) * w + x] + l[y * w + x - 1] + l[y * w + x + 1] - 4.0 * c);
    }
  }
  double mean = 0.0;
  for (double v : resp) mean += v;
  mean /= static_cast<double>(resp.size());
  double var = 0.0;
  for (double v : resp) var += (v - mean) * (v - mean);
  return var / static_cast<double>(resp.size());
}

double heuristic_quality_score(const RgbImage& img) {
  const double sharp = 1.0 - std::exp(-variance_of_laplacian(img) / kSharpnessScale);
  std::size_t clipped = 0;
  for (double v : img.pixels.data()) clipped += v >= 250.0 / 255.0 ? 1 : 0;
  const double clip_frac = static_cast<double>(clipped) / static_cast<double>(img.pixels.size());
  return std::clamp(sharp * (1.0 - clip_frac), 0.0, 1.0);
}

FilterVerdict confidence_filter(const RgbImage& reference, const QualityScorer& scorer, double threshold,
                                const std::string& source_id) {
  double score = 0.0;
  try {
    score = scorer(reference);
  } catch (const std::exception& e) {
    throw std::runtime_error("confidence scorer failed on " + (source_id.empty() ? "<unnamed>" : source_id) + ": " +
                             e.what());
  }
  return {"confidence", score, score >= threshold, {}};
}

RgbImage histogram_match(const RgbImage& source, const RgbImage& target) {
  const std::size_t sn = source.height() * source.width();
  const std::size_t tn = target.height() * target.width();
  std::vector<double> out(3 * sn);
  const auto bin_of = [](double v) { return static_cast<std::size_t>(quantize(v)); };
  for (std::size_t c = 0; c < 3; ++c) {
    const double* s = source.pixels.data().data() + c * sn;
    const double* t = target.pixels.data().data() + c * tn;
    std::array<double, 256> s_hist{}, t_hist{}, t_sum{};
    for (std::size_t i = 0; i < sn; ++i) s_hist[bin_of(s[i])] += 1.0;
    for (std::size_t i = 0; i < tn; ++i) {
      const auto b = bin_of(t[i]);
      t_hist[b] += 1.0;
      t_sum[b] += t[i];
    }
    std::array<double, 256> s_cdf{}, t_cdf{};
    double acc_s = 0.0, acc_t = 0.0;
    for (std::size_t b = 0; b < 256; ++b) {
      acc_s += s_hist[b];
      acc_t += t_hist[b];
      s_cdf[b] = acc_s / static_cast<double>(sn);
      t_cdf[b] = acc_t / static_cast<double>(tn);
    }
    std::array<double, 256> lut{};
    for (std::size_t b = 0; b < 256; ++b) {
      std::size_t best = 256;
      double best_d = 0.0;
      for (std::size_t j = 0; j < 256; ++j) {
        if (t_hist[j] == 0.0) continue;
        const double d = std::abs(t_cdf[j] - s_cdf[b]);
        if (best == 256 || d < best_d) {
          best = j;
          best_d = d;
        }
      }
      lut[b] = t_sum[best] / t_hist[best];
    }
    for (std::size_t i = 0; i < sn; ++i) out[c * sn + i] = lut[bin_of(s[i])];
  }
  return RgbImage(Tensor::from({3, source.height(), source.width()}, std::move(out)));
}

RgbImage synth_degrade(const RgbImage& clean, const DegradeParams& p) {
  Rng rng(p.seed);
  std::vector<double> out(clean.pixels.size());
  const bool noisy = p.read_sigma > 0.0 || p.shot_scale > 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::max(clean.pixels[i], 0.0);
    const double signal = p.gain * (p.gamma == 1.0 ? v : std::pow(v, p.gamma));
    double noise = 0.0;
    if (noisy) noise = rng.normal(0.0, std::sqrt(p.read_sigma * p.read_sigma + p.shot_scale * signal));
    out[i] = std::clamp(signal + noise, 0.0, 1.0);
  }
  return RgbImage(Tensor::from(clean.pixels.shape(), std::move(out)));
}

DegradeParams sample_degrade_params(Rng& rng) {
  DegradeParams p;
  p.gamma = rng.uniform(2.0, 3.5);
  p.gain = rng.uniform(0.1, 0.5);
  p.read_sigma = rng.uniform(0.0, 0.02);
  p.shot_scale = rng.uniform(0.0, 0.01);
  p.seed = rng.next_u64();
  return p;
}

RgbImage synth_scene(std::size_t height, std::size_t width, Rng& rng) {
  std::vector<double> data(3 * height * width);
  std::array<double, 3> base, dy, dx;
  for (std::size_t c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.2, 0.6);
    dy[c] = rng.uniform(-0.3, 0.3);
    dx[c] = rng.uniform(-0.3, 0.3);
  }
  const auto idx = [&](std::size_t c, std::size_t y, std::size_t x) { return (c * height + y) * width + x; };
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const double fy = static_cast<double>(y) / static_cast<double>(height);
      const double fx = static_cast<double>(x) / static_cast<double>(width);
      for (std::size_t c = 0; c < 3; ++c) data[idx(c, y, x)] = base[c] + dy[c] * fy + dx[c] * fx;
    }
  }
  const std::size_t shapes = 3 + rng.below(4);
  for (std::size_t s = 0; s < shapes; ++s) {
    std::array<double, 3> color{rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95), rng.uniform(0.05, 0.95)};
    const double cy = rng.uniform(0.0, static_cast<double>(height));
    const double cx = rng.uniform(0.0, static_cast<double>(width));
    const double r = rng.uniform(0.1, 0.3) * static_cast<double>(std::min(height, width));
    const bool disc = rng.uniform() < 0.5;
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t x = 0; x < width; ++x) {
        const double oy = static_cast<double>(y) - cy, ox = static_cast<double>(x) - cx;
        const bool inside = disc ? oy * oy + ox * ox <= r * r : std::abs(oy) <= r && std::abs(ox) <= 0.7 * r;
        if (!inside) continue;
        for (std::size_t c = 0; c < 3; ++c) data[idx(c, y, x)] = color[c];
      }
    }
  }
  for (auto& v : data) v = std::clamp(v, 0.0, 1.0);
  return RgbImage(Tensor::from({3, height, width}, std::move(data)));
}

std::vector<PairRecord> synthetic_pairs(std::size_t count, std::size_t height, std::size_t width, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<PairRecord> out;
  for (std::size_t i = 0; i < count; ++i) {
    PairRecord p;
    p.reference = synth_scene(height, width, rng);
    p.low = synth_degrade(p.reference, sample_degrade_params(rng));
    p.source_id = "synthetic_" + std::to_string(i);
    out.push_back(std::move(p));
  }
  return out;
}

std::size_t CurationReport::accepted() const {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const PairRecord& r) { return r.accepted(); }));
}

CurationReport curate(const std::vector<PairRecord>& pairs, const CurationOptions& options, const QualityScorer& scorer) {
  CurationReport report;
  for (const auto& pair : pairs) {
    FilterVerdict warning;
    auto patches = extract_patches(pair, options.patch_size, options.stride, &warning);
    if (patches.empty()) {
      report.errors.push_back(pair.source_id + ": " + warning.note);
      continue;
    }
    for (auto& p : patches) {
      if (options.brightness) p.verdicts.push_back(brightness_filter(p.reference, options.brightness_threshold));
      if (options.confidence) {
        p.verdicts.push_back(confidence_filter(p.reference, scorer, options.confidence_threshold, p.source_id));
      }
      report.records.push_back(std::move(p));
    }
  }
  return report;
}

void write_manifest(std::ostream& out, const CurationReport& report) {
  out << "source_id\trow\tcol\tbrightness\tbrightness_pass\tconfidence\tconfidence_pass\taccepted\n";
  char buf[64];
  for (const auto& r : report.records) {
    out << r.source_id << '\t' << r.row << '\t' << r.col;
    for (const char* name : {"brightness", "confidence"}) {
      const auto it = std::find_if(r.verdicts.begin(), r.verdicts.end(),
                                   [&](const FilterVerdict& v) { return v.filter == name; });
      if (it == r.verdicts.end()) {
        out << "\t-\t-";
      } else {
        std::snprintf(buf, sizeof buf, "%.6f", it->statistic);
        out << '\t' << buf << '\t' << (it->passed ? "pass" : "reject");
      }
    }
    out << '\t' << (r.accepted() ? "accept" : "reject") << '\n';
  }
}

std::vector<PairRecord> load_paired_corpus(const std::filesystem::path& root, std::vector<std::string>& errors) {
  namespace fs = std::filesystem;
  const auto low_dir = root / "low", ref_dir = root / "ref";
  std::set<std::string> low_names, ref_names;
  const auto list = [](const fs::path& dir, std::set<std::string>& names) {
    if (!fs::is_directory(dir)) return;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.is_regular_file()) names.insert(e.path().filename().string());
    }
  };
  list(low_dir, low_names);
  list(ref_dir, ref_names);
  for (const auto& n : ref_names) {
    if (!low_names.count(n)) errors.push_back("missing pair partner: low/" + n);
  }
  std::vector<PairRecord> out;
  for (const auto& n : low_names) {
    if (!ref_names.count(n)) {
      errors.push_back("missing pair partner: ref/" + n);
      continue;
    }
    try {
      PairRecord p;
      p.low = load_image(low_dir / n);
      p.reference = load_image(ref_dir / n);
      if (p.low.height() != p.reference.height() || p.low.width() != p.reference.width()) {
        errors.push_back(n + ": low and reference sizes differ");
        continue;
      }
      p.source_id = fs::path(n).stem().string();
      out.push_back(std::move(p));
    } catch (const std::exception& e) {
      errors.push_back(e.what());
    }
  }
  return out;
}

}  // namespace tfformer
