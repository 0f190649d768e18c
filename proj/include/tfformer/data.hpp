#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tfformer/lc_color.hpp"
#include "tfformer/rng.hpp"

namespace tfformer {

/// Outcome of one curation filter on one record.
struct FilterVerdict {
  std::string filter;
  double statistic = 0.0;
  bool passed = true;
  std::string note;
};

/// An aligned low-light / reference pair, optionally a crop of a larger pair.
struct PairRecord {
  RgbImage low;
  RgbImage reference;
  std::string source_id;
  std::vector<FilterVerdict> verdicts;
  std::size_t row = 0;
  std::size_t col = 0;

  bool accepted() const;
};

/// Crops size x size windows at identical coordinates in both images. Grid
/// origins step by `stride`; a final row/column is snapped to the border so
/// the whole image is covered. An image smaller than `size` yields nothing
/// and, when `warning` is given, a rejected "patch_size" verdict there.
std::vector<PairRecord> extract_patches(const PairRecord& pair, std::size_t size, std::size_t stride,
                                        FilterVerdict* warning = nullptr);

/// Mean over all 3*H*W samples on the 0-255 scale.
double mean_intensity(const RgbImage& img);

/// Rejects references whose mean intensity is strictly below `threshold`.
FilterVerdict brightness_filter(const RgbImage& reference, double threshold = 10.0);

/// Quality score in [0, 1] for a reference image.
using QualityScorer = std::function<double(const RgbImage&)>;

/// Default scorer: (1 - exp(-VoL / tau)) * (1 - clipped fraction), where VoL
/// is variance_of_laplacian and a sample counts as clipped at >= 250/255.
double heuristic_quality_score(const RgbImage& img);
inline constexpr double kSharpnessScale = 2e-3;

/// Passes iff scorer(reference) >= threshold. Scorer exceptions are rethrown
/// as std::runtime_error carrying `source_id`.
FilterVerdict confidence_filter(const RgbImage& reference, const QualityScorer& scorer, double threshold = 0.90,
                                const std::string& source_id = {});

/// Variance of the 3x3 Laplacian response of the luminance, taken over
/// interior positions where the stencil lies inside the image. Zero for
/// images smaller than 3x3.
double variance_of_laplacian(const RgbImage& img);

/// Per-channel 256-bin CDF matching of source onto target. Every source bin
/// maps to the occupied target bin with the nearest CDF value (ties go to the
/// lower bin) and takes the mean target value of that bin.
RgbImage histogram_match(const RgbImage& source, const RgbImage& target);

struct DegradeParams {
  double gamma = 1.0;
  double gain = 1.0;
  double read_sigma = 0.0;
  double shot_scale = 0.0;
  std::uint64_t seed = 0;
};

/// clamp(gain * clean^gamma + n, 0, 1) with n ~ N(0, read^2 + shot * signal).
RgbImage synth_degrade(const RgbImage& clean, const DegradeParams& p);

/// Draws degradation parameters from the desk-scale ranges
/// gamma in [2, 3.5], gain in [0.1, 0.5], read sigma in [0, 0.02], shot in [0, 0.01].
DegradeParams sample_degrade_params(Rng& rng);

/// Procedural clean scene: smooth colour gradients with random discs and
/// rectangles, values in [0, 1].
RgbImage synth_scene(std::size_t height, std::size_t width, Rng& rng);

/// Synthetic (low, reference) pairs for training without a capture corpus.
std::vector<PairRecord> synthetic_pairs(std::size_t count, std::size_t height, std::size_t width,
                                        std::uint64_t seed);

struct CurationOptions {
  std::size_t patch_size = 512;
  std::size_t stride = 512;
  bool brightness = true;
  double brightness_threshold = 10.0;
  bool confidence = true;
  double confidence_threshold = 0.90;
};

struct CurationReport {
  std::vector<PairRecord> records;  // every extracted patch with verdicts
  std::vector<std::string> errors;  // skipped sources
  std::size_t extracted() const { return records.size(); }
  std::size_t accepted() const;
  std::size_t rejected() const { return extracted() - accepted(); }
};

/// Runs patch extraction and the enabled filters over every pair, in input order.
CurationReport curate(const std::vector<PairRecord>& pairs, const CurationOptions& options,
                      const QualityScorer& scorer = heuristic_quality_score);

/// Tab-separated manifest with a header row:
/// source_id, row, col, brightness, brightness_pass, confidence, confidence_pass, accepted.
void write_manifest(std::ostream& out, const CurationReport& report);

/// Loads `<root>/low/*` and `<root>/ref/*` pairs with identical file names,
/// sorted by name. Files without a partner or that fail to decode are
/// reported in `errors` and skipped.
std::vector<PairRecord> load_paired_corpus(const std::filesystem::path& root, std::vector<std::string>& errors);

}  // namespace tfformer
