#include "tfformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "tfformer/data.hpp"

namespace tfformer {

namespace {

void require_same(const RgbImage& a, const RgbImage& b, const char* what) {
  if (a.pixels.shape() != b.pixels.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_str(a.pixels.shape()) + " vs " +
                         shape_str(b.pixels.shape()));
  }
}

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = static_cast<double>(size / 2);
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = static_cast<double>(i) - c;
    g[i] = std::exp(-d * d / (2.0 * sigma * sigma));
    s += g[i];
  }
  for (auto& v : g) v /= s;
  return g;
}

// Separable valid-mode filtering of an h x w plane.
std::vector<double> filter_valid(const std::vector<double>& img, std::size_t h, std::size_t w,
                                 const std::vector<double>& g) {
  const std::size_t k = g.size(), oh = h - k + 1, ow = w - k + 1;
  std::vector<double> tmp(h * ow, 0.0), out(oh * ow, 0.0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * img[y * w + x + i];
      tmp[y * ow + x] = s;
    }
  }
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t x = 0; x < ow; ++x) {
      double s = 0.0;
      for (std::size_t i = 0; i < k; ++i) s += g[i] * tmp[(y + i) * ow + x];
      out[y * ow + x] = s;
    }
  }
  return out;
}

Histogram make_histogram(const std::vector<double>& values, double lo, double hi) {
  Histogram h{lo, hi, std::vector<std::size_t>(kReportBins, 0)};
  const double span = hi - lo;
  for (double v : values) {
    std::size_t b = 0;
    if (span > 0.0) {
      const double f = (v - lo) / span * static_cast<double>(kReportBins);
      b = static_cast<std::size_t>(std::clamp(f, 0.0, static_cast<double>(kReportBins - 1)));
    }
    ++h.counts[b];
  }
  return h;
}

std::string fmt(double v, const char* spec = "%.6f") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

double psnr(const RgbImage& a, const RgbImage& b, double peak) {
  require_same(a, b, "psnr");
  double se = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    const double d = a.pixels[i] - b.pixels[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.pixels.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const RgbImage& a, const RgbImage& b) {
  require_same(a, b, "ssim");
  constexpr std::size_t kWin = 11;
  const std::size_t h = a.height(), w = a.width();
  if (h < kWin || w < kWin) {
    throw DimensionError("ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " smaller than the 11x11 window");
  }
  const Tensor la = luminance(a.pixels), lb = luminance(b.pixels);
  const std::vector<double> x(la.data().begin(), la.data().end()), y(lb.data().begin(), lb.data().end());
  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto g = gaussian_window(kWin, 1.5);
  const auto mx = filter_valid(x, h, w, g), my = filter_valid(y, h, w, g);
  const auto sxx = filter_valid(xx, h, w, g), syy = filter_valid(yy, h, w, g), sxy = filter_valid(xy, h, w, g);
  constexpr double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(mx.size());
}

double bradley_terry_log_likelihood(const std::vector<RankingOutcome>& outcomes,
                                    const std::map<std::string, double>& strength) {
  double ll = 0.0;
  for (const auto& o : outcomes) {
    const double pw = strength.at(o.winner), pl = strength.at(o.loser);
    ll += o.weight * std::log(pw / (pw + pl));
  }
  return ll;
}

BradleyTerryResult bradley_terry_fit(const std::vector<RankingOutcome>& outcomes, const BradleyTerryOptions& options) {
  std::map<std::string, std::size_t> index;
  for (const auto& o : outcomes) {
    if (o.winner == o.loser) throw std::invalid_argument("bradley_terry_fit: item '" + o.winner + "' compared with itself");
    if (!(o.weight > 0.0)) throw std::invalid_argument("bradley_terry_fit: outcome weight must be positive");
    index.emplace(o.winner, 0);
    index.emplace(o.loser, 0);
  }
  if (index.empty()) throw std::invalid_argument("bradley_terry_fit: no outcomes");
  std::vector<std::string> names;
  for (auto& [name, i] : index) {
    i = names.size();
    names.push_back(name);
  }
  const std::size_t n = names.size();
  std::vector<std::vector<double>> games(n, std::vector<double>(n, 0.0));
  std::vector<double> wins(n, options.win_smoothing);
  for (const auto& o : outcomes) {
    const auto w = index[o.winner], l = index[o.loser];
    games[w][l] += o.weight;
    games[l][w] += o.weight;
    wins[w] += o.weight;
  }

  // Connectivity via union-find.
  std::vector<std::size_t> parent(n);
  std::iota(parent.begin(), parent.end(), 0);
  const auto find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (games[i][j] > 0.0) parent[find(i)] = find(j);
    }
  }
  std::map<std::size_t, std::vector<std::string>> components;
  for (std::size_t i = 0; i < n; ++i) components[find(i)].push_back(names[i]);
  if (components.size() > 1) {
    std::string msg = "bradley_terry_fit: comparison graph is disconnected; components:";
    for (const auto& [root, members] : components) {
      msg += " {";
      for (std::size_t i = 0; i < members.size(); ++i) msg += (i ? ", " : "") + members[i];
      msg += "}";
    }
    throw std::invalid_argument(msg);
  }

  BradleyTerryResult result;
  std::vector<double> pi(n, 1.0 / static_cast<double>(n)), next(n);
  const auto as_map = [&](const std::vector<double>& p) {
    std::map<std::string, double> m;
    for (std::size_t i = 0; i < n; ++i) m[names[i]] = p[i];
    return m;
  };
  double prev_ll = options.check_monotone ? bradley_terry_log_likelihood(outcomes, as_map(pi)) : 0.0;
  for (int it = 1; it <= options.max_iterations; ++it) {
    for (std::size_t i = 0; i < n; ++i) {
      double denom = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (games[i][j] > 0.0) denom += games[i][j] / (pi[i] + pi[j]);
      }
      next[i] = wins[i] / denom;
    }
    const double total = std::accumulate(next.begin(), next.end(), 0.0);
    double change = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] /= total;
      if (pi[i] > 0.0) change = std::max(change, std::abs(next[i] - pi[i]) / pi[i]);
      else if (next[i] > 0.0) change = std::max(change, 1.0);
    }
    pi.swap(next);
    result.iterations = it;
    if (options.check_monotone && options.win_smoothing == 0.0) {
      const double ll = bradley_terry_log_likelihood(outcomes, as_map(pi));
      if (ll < prev_ll - 1e-9 * std::max(1.0, std::abs(prev_ll))) {
        throw std::logic_error("bradley_terry_fit: MM sweep " + std::to_string(it) + " decreased the log-likelihood");
      }
      prev_ll = ll;
    }
    if (change < options.tolerance) {
      result.converged = true;
      break;
    }
  }
  result.strength = as_map(pi);
  bool all_positive = std::all_of(pi.begin(), pi.end(), [](double p) { return p > 0.0; });
  result.log_likelihood = all_positive ? bradley_terry_log_likelihood(outcomes, result.strength) : -INFINITY;
  return result;
}

DistributionReport distribution_report(const std::vector<RgbImage>& images, const std::vector<std::string>& ids) {
  if (images.empty()) throw std::invalid_argument("distribution_report: empty image list");
  if (!ids.empty() && ids.size() != images.size()) throw std::invalid_argument("distribution_report: id count mismatch");
  DistributionReport rep;
  std::vector<double> means, sharp;
  for (std::size_t i = 0; i < images.size(); ++i) {
    ImageStats s;
    s.id = ids.empty() ? std::to_string(i) : ids[i];
    s.mean_intensity = mean_intensity(images[i]);
    s.sharpness = variance_of_laplacian(images[i]);
    means.push_back(s.mean_intensity);
    sharp.push_back(s.sharpness);
    rep.rows.push_back(std::move(s));
  }
  rep.intensity = make_histogram(means, 0.0, 255.0);
  rep.sharpness = make_histogram(sharp, 0.0, *std::max_element(sharp.begin(), sharp.end()));
  return rep;
}

void write_distribution_report(std::ostream& out, const DistributionReport& report) {
  out << "id\tmean_intensity\tsharpness\n";
  for (const auto& r : report.rows) out << r.id << '\t' << fmt(r.mean_intensity) << '\t' << fmt(r.sharpness, "%.9g") << '\n';
  for (const auto* h : {&report.intensity, &report.sharpness}) {
    out << (h == &report.intensity ? "# intensity_histogram" : "# sharpness_histogram") << '\t' << fmt(h->lo, "%.9g")
        << '\t' << fmt(h->hi, "%.9g");
    for (auto c : h->counts) out << '\t' << c;
    out << '\n';
  }
}

// Enough digits that the footer can be re-derived from the printed rows.
constexpr const char* kTableFormat = "%.12f";

void write_results_table(std::ostream& out, const std::vector<ScoreRow>& rows) {
  out << "# psnr capped at " << fmt(kPsnrCap, "%.0f") << " dB for identical images; lpips not computed\n";
  out << "pair_id\tpsnr_db\tssim\n";
  std::map<std::string, std::pair<double, double>> cat_sum;
  std::map<std::string, std::size_t> cat_n;
  double sp = 0.0, ss = 0.0;
  for (const auto& r : rows) {
    out << r.pair_id << '\t' << fmt(r.psnr_db, kTableFormat) << '\t' << fmt(r.ssim, kTableFormat) << '\n';
    cat_sum[r.category].first += r.psnr_db;
    cat_sum[r.category].second += r.ssim;
    ++cat_n[r.category];
    sp += r.psnr_db;
    ss += r.ssim;
  }
  if (cat_sum.size() > 1) {
    for (const auto& [cat, s] : cat_sum) {
      const double n = static_cast<double>(cat_n[cat]);
      out << "mean[" << cat << "]\t" << fmt(s.first / n, kTableFormat) << '\t' << fmt(s.second / n, kTableFormat) << '\n';
    }
  }
  if (!rows.empty()) {
    const double n = static_cast<double>(rows.size());
    out << "mean\t" << fmt(sp / n, kTableFormat) << '\t' << fmt(ss / n, kTableFormat) << '\n';
  }
}

}  // namespace tfformer
