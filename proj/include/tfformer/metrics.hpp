#pragma once

#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "tfformer/lc_color.hpp"

namespace tfformer {

/// PSNR reported for identical images instead of +inf.
inline constexpr double kPsnrCap = 100.0;

/// 10 log10(peak^2 / MSE) over all samples; kPsnrCap when MSE is zero.
double psnr(const RgbImage& a, const RgbImage& b, double peak = 1.0);

/// Single-scale SSIM on luminance: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, dynamic range 1, mean over valid window positions.
double ssim(const RgbImage& a, const RgbImage& b);

/// One pairwise preference observation, repeated `weight` times.
struct RankingOutcome {
  std::string winner;
  std::string loser;
  double weight = 1.0;
};

struct BradleyTerryOptions {
  double tolerance = 1e-10;  // max relative change between sweeps
  int max_iterations = 10000;
  /// Pseudo-wins added to every item; 0 reports the plain MM fixed point.
  double win_smoothing = 0.0;
  /// Check that every MM sweep does not lower the log-likelihood.
  bool check_monotone = false;
};

struct BradleyTerryResult {
  std::map<std::string, double> strength;  // sums to 1
  int iterations = 0;
  bool converged = false;
  double log_likelihood = 0.0;
};

/// Maximum-likelihood Bradley-Terry strengths via the minorization-maximization
/// update pi_i <- W_i / sum_j n_ij / (pi_i + pi_j). Throws std::invalid_argument
/// for a disconnected comparison graph, listing its components.
BradleyTerryResult bradley_terry_fit(const std::vector<RankingOutcome>& outcomes,
                                     const BradleyTerryOptions& options = {});

/// log L = sum over outcomes of w * log(pi_winner / (pi_winner + pi_loser)).
double bradley_terry_log_likelihood(const std::vector<RankingOutcome>& outcomes,
                                    const std::map<std::string, double>& strength);

struct ImageStats {
  std::string id;
  double mean_intensity = 0.0;  // 0-255 scale
  double sharpness = 0.0;       // variance of Laplacian
};

struct Histogram {
  double lo = 0.0;
  double hi = 0.0;
  std::vector<std::size_t> counts;
};

struct DistributionReport {
  std::vector<ImageStats> rows;  // input order
  Histogram intensity;           // over [0, 255]
  Histogram sharpness;           // over [0, max observed]
};

inline constexpr std::size_t kReportBins = 32;

DistributionReport distribution_report(const std::vector<RgbImage>& images, const std::vector<std::string>& ids = {});
void write_distribution_report(std::ostream& out, const DistributionReport& report);

/// One scored image pair; `category` groups rows for the mean footers.
struct ScoreRow {
  std::string pair_id;
  std::string category;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

/// Tab-separated pair_id, psnr_db, ssim rows followed by per-category
/// "mean[<category>]" rows (when more than one category) and an overall
/// "mean" row. The LPIPS column is not computed.
void write_results_table(std::ostream& out, const std::vector<ScoreRow>& rows);

}  // namespace tfformer
