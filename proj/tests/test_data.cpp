#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "tfformer/data.hpp"
#include "tfformer/image_io.hpp"

using namespace tfformer;
using fixtures::TempDir;
namespace fs = std::filesystem;

namespace {

PairRecord pair_of(const RgbImage& low, const RgbImage& ref, std::string id = "p") {
  PairRecord p;
  p.low = low;
  p.reference = ref;
  p.source_id = std::move(id);
  return p;
}

RgbImage gaussian_blur(const RgbImage& img, double sigma) {
  const int r = static_cast<int>(std::ceil(3 * sigma));
  std::vector<double> k(2 * r + 1);
  double z = 0.0;
  for (int i = -r; i <= r; ++i) z += (k[i + r] = std::exp(-i * i / (2 * sigma * sigma)));
  for (auto& v : k) v /= z;
  const std::size_t h = img.height(), w = img.width();
  auto tmp = RgbImage::zeros(h, w), out = RgbImage::zeros(h, w);
  const auto clampi = [](long v, long n) { return std::clamp(v, 0L, n - 1); };
  auto t = tmp.pixels.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * img.at(c, y, clampi(static_cast<long>(x) + i, w));
        t[(c * h + y) * w + x] = acc;
      }
  auto o = out.pixels.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(c, clampi(static_cast<long>(y) + i, h), x);
        o[(c * h + y) * w + x] = acc;
      }
  return out;
}

RgbImage checkerboard(std::size_t n) {
  auto img = RgbImage::zeros(n, n);
  auto d = img.pixels.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < n; ++y)
      for (std::size_t x = 0; x < n; ++x) d[(c * n + y) * n + x] = (x + y) % 2 ? 1.0 : 0.0;
  return img;
}

RgbImage box_blur(const RgbImage& img) {
  const std::size_t h = img.height(), w = img.width();
  auto out = RgbImage::zeros(h, w);
  auto d = out.pixels.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        int n = 0;
        for (long dy = -1; dy <= 1; ++dy)
          for (long dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            acc += img.at(c, yy, xx);
            ++n;
          }
        d[(c * h + y) * w + x] = acc / n;
      }
  return out;
}

std::array<double, 256> cdf_of(const RgbImage& img, std::size_t c) {
  std::array<double, 256> hist{};
  const std::size_t n = img.height() * img.width();
  for (std::size_t i = 0; i < n; ++i) hist[quantize(img.pixels[c * n + i])] += 1.0 / static_cast<double>(n);
  for (std::size_t b = 1; b < 256; ++b) hist[b] += hist[b - 1];
  return hist;
}

double max_bin_mass(const RgbImage& img, std::size_t c) {
  const auto cdf = cdf_of(img, c);
  double m = cdf[0];
  for (std::size_t b = 1; b < 256; ++b) m = std::max(m, cdf[b] - cdf[b - 1]);
  return m;
}

}  // namespace

TEST(ExtractPatches, ExactTiling) {
  const auto img = RgbImage::zeros(1024, 1024);
  EXPECT_EQ(extract_patches(pair_of(img, img), 512, 512).size(), 4u);
}

TEST(ExtractPatches, BorderSnap) {
  const auto img = RgbImage::zeros(600, 512);
  const auto patches = extract_patches(pair_of(img, img), 512, 512);
  ASSERT_EQ(patches.size(), 2u);
  EXPECT_EQ(patches[0].row, 0u);
  EXPECT_EQ(patches[1].row, 88u);
  EXPECT_EQ(patches[1].col, 0u);
}

TEST(ExtractPatches, CropsMatchSlicingOracleAndShareCoordinates) {
  auto low = fixtures::texture(37, 29, 0.0, 1.0, 5);
  auto ref = fixtures::texture(37, 29, 0.0, 1.0, 6);
  // Sentinels in the corners mark the true coordinates in both images.
  for (auto* img : {&low, &ref}) {
    auto d = img->pixels.mutable_data();
    d[0] = 0.123;
    d[(0 * 37 + 36) * 29 + 28] = 0.987;
  }
  for (const auto& p : extract_patches(pair_of(low, ref), 10, 7)) {
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t y = 0; y < 10; ++y)
        for (std::size_t x = 0; x < 10; ++x) {
          ASSERT_EQ(p.low.at(c, y, x), low.at(c, p.row + y, p.col + x));
          ASSERT_EQ(p.reference.at(c, y, x), ref.at(c, p.row + y, p.col + x));
        }
    if (p.row == 0 && p.col == 0) EXPECT_EQ(p.low.at(0, 0, 0), 0.123);
    if (p.row == 27 && p.col == 19) EXPECT_EQ(p.reference.at(0, 9, 9), 0.987);
  }
}

TEST(ExtractPatches, TooSmallGivesWarning) {
  const auto img = RgbImage::zeros(8, 8);
  FilterVerdict warning;
  EXPECT_TRUE(extract_patches(pair_of(img, img), 16, 16, &warning).empty());
  EXPECT_FALSE(warning.passed);
  EXPECT_FALSE(warning.note.empty());
}

TEST(Brightness, ThresholdBoundary) {
  EXPECT_FALSE(brightness_filter(RgbImage::filled(4, 4, 9 / 255.0, 9 / 255.0, 9 / 255.0)).passed);
  EXPECT_TRUE(brightness_filter(RgbImage::filled(4, 4, 10 / 255.0, 10 / 255.0, 10 / 255.0)).passed);
  EXPECT_TRUE(brightness_filter(RgbImage::filled(4, 4, 1, 1, 1)).passed);
  EXPECT_NEAR(brightness_filter(RgbImage::filled(4, 4, 1, 1, 1)).statistic, 255.0, 1e-9);
}

TEST(Confidence, ConstantScorers) {
  const auto img = fixtures::texture(8, 8, 0, 1, 7);
  EXPECT_TRUE(confidence_filter(img, [](const RgbImage&) { return 1.0; }).passed);
  EXPECT_FALSE(confidence_filter(img, [](const RgbImage&) { return 0.5; }, 0.9).passed);
}

TEST(Confidence, ScorerFailureNamesTheSource) {
  const auto img = RgbImage::zeros(4, 4);
  try {
    confidence_filter(img, [](const RgbImage&) -> double { throw std::runtime_error("model missing"); }, 0.9,
                      "scene_42");
    FAIL();
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("scene_42"), std::string::npos);
  }
}

TEST(Confidence, HeuristicPrefersSharpOverBlurred) {
  const auto sharp = fixtures::texture(32, 32, 0.1, 0.9, 8);
  const auto blurred = gaussian_blur(sharp, 2.0);
  EXPECT_GT(heuristic_quality_score(sharp), heuristic_quality_score(blurred));
}

TEST(VarianceOfLaplacian, Properties) {
  EXPECT_EQ(variance_of_laplacian(RgbImage::filled(9, 9, 0.4, 0.4, 0.4)), 0.0);
  const auto board = checkerboard(12);
  EXPECT_GT(variance_of_laplacian(board), variance_of_laplacian(box_blur(board)));
  const auto img = fixtures::texture(16, 16, 0.0, 0.7, 9);
  auto shifted = RgbImage(img.pixels.clone());
  for (auto& v : shifted.pixels.mutable_data()) v += 0.25;
  EXPECT_NEAR(variance_of_laplacian(shifted), variance_of_laplacian(img), 1e-12);
}

TEST(HistogramMatch, SelfMatchWithinOneLevel) {
  const auto img = fixtures::texture(20, 20, 0.0, 1.0, 10);
  const auto out = histogram_match(img, img);
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_LE(std::abs(out.pixels[i] - img.pixels[i]), 1.0 / 255.0);
}

TEST(HistogramMatch, ConstantTarget) {
  const auto out = histogram_match(fixtures::texture(10, 10, 0, 1, 11), RgbImage::filled(5, 5, 0.3, 0.7, 0.1));
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_NEAR(out.pixels[i], 0.3, 1e-12);
    EXPECT_NEAR(out.pixels[100 + i], 0.7, 1e-12);
    EXPECT_NEAR(out.pixels[200 + i], 0.1, 1e-12);
  }
}

TEST(HistogramMatch, CdfWithinOneBinMassAndMonotone) {
  const auto src = fixtures::texture(40, 40, 0.0, 0.5, 12);
  auto tgt = fixtures::texture(30, 30, 0.0, 1.0, 13);
  for (auto& v : tgt.pixels.mutable_data()) v = v * v;
  const auto out = histogram_match(src, tgt);
  for (std::size_t c = 0; c < 3; ++c) {
    const auto co = cdf_of(out, c), ct = cdf_of(tgt, c);
    const double bound = std::max(max_bin_mass(src, c), max_bin_mass(tgt, c));
    for (std::size_t b = 0; b < 256; ++b) EXPECT_LE(std::abs(co[b] - ct[b]), bound + 1e-12) << "bin " << b;
    // Monotone: a brighter source sample never maps below a darker one.
    const std::size_t n = 1600;
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](auto a, auto b) { return src.pixels[c * n + a] < src.pixels[c * n + b]; });
    for (std::size_t i = 1; i < n; ++i) EXPECT_LE(out.pixels[c * n + idx[i - 1]], out.pixels[c * n + idx[i]]);
  }
}

TEST(SynthDegrade, IdentityAndClosedForm) {
  const auto img = fixtures::texture(6, 6, 0, 1, 14);
  const auto same = synth_degrade(img, DegradeParams{});
  for (std::size_t i = 0; i < img.pixels.size(); ++i) EXPECT_EQ(same.pixels[i], img.pixels[i]);
  DegradeParams p;
  p.gamma = 2.0;
  p.gain = 0.25;
  const auto dark = synth_degrade(RgbImage::filled(3, 3, 1, 1, 1), p);
  for (double v : dark.pixels.data()) EXPECT_EQ(v, 0.25);
}

TEST(SynthDegrade, BrightnessFallsWithGamma) {
  const auto img = fixtures::texture(16, 16, 0.05, 0.95, 15);
  double prev = 1e9;
  for (double g = 1.0; g <= 4.0; g += 0.25) {
    DegradeParams p;
    p.gamma = g;
    p.gain = 0.3;
    const double m = mean_intensity(synth_degrade(img, p));
    EXPECT_LT(m, prev);
    prev = m;
  }
}

TEST(SynthDegrade, SeededNoiseIsDeterministic) {
  const auto img = fixtures::texture(8, 8, 0, 1, 16);
  DegradeParams p;
  p.gamma = 2.2;
  p.gain = 0.3;
  p.read_sigma = 0.01;
  p.shot_scale = 0.005;
  p.seed = 77;
  const auto a = synth_degrade(img, p), b = synth_degrade(img, p);
  for (std::size_t i = 0; i < a.pixels.size(); ++i) {
    EXPECT_EQ(a.pixels[i], b.pixels[i]);
    EXPECT_GE(a.pixels[i], 0.0);
    EXPECT_LE(a.pixels[i], 1.0);
  }
}

TEST(Curation, FixtureAcceptsTheTwoValidPairs) {
  TempDir dir("curate_fixture");
  fixtures::write_curation_fixture(dir.path);
  std::vector<std::string> errors;
  const auto pairs = load_paired_corpus(dir.path, errors);
  EXPECT_TRUE(errors.empty());
  ASSERT_EQ(pairs.size(), 6u);
  CurationOptions opt;
  opt.patch_size = 16;
  opt.stride = 16;
  const auto report = curate(pairs, opt);
  EXPECT_EQ(report.extracted(), 6u);
  EXPECT_EQ(report.accepted(), 2u);
  EXPECT_EQ(report.accepted() + report.rejected(), report.extracted());
  for (const auto& r : report.records) EXPECT_EQ(r.accepted(), r.source_id.rfind("valid", 0) == 0) << r.source_id;
  // Each designed failure trips exactly its own filter.
  for (const auto& r : report.records) {
    const bool bright = r.verdicts[0].passed, conf = r.verdicts[1].passed;
    if (r.source_id.rfind("dark", 0) == 0) EXPECT_FALSE(bright) << r.source_id;
    if (r.source_id.rfind("flat", 0) == 0) {
      EXPECT_TRUE(bright) << r.source_id;
      EXPECT_FALSE(conf) << r.source_id;
    }
  }
}

TEST(Curation, FilterOrderDoesNotMatter) {
  const auto pairs = synthetic_pairs(6, 24, 24, 3);
  CurationOptions opt;
  opt.patch_size = 12;
  opt.stride = 12;
  opt.confidence_threshold = 0.5;
  const auto both = curate(pairs, opt);
  std::vector<bool> reversed;
  for (const auto& p : pairs)
    for (const auto& patch : extract_patches(p, 12, 12)) {
      const bool conf = confidence_filter(patch.reference, heuristic_quality_score, 0.5).passed;
      reversed.push_back(conf && brightness_filter(patch.reference).passed);
    }
  ASSERT_EQ(reversed.size(), both.records.size());
  for (std::size_t i = 0; i < reversed.size(); ++i) EXPECT_EQ(both.records[i].accepted(), bool(reversed[i]));
}

TEST(Curation, MissingPartnerIsNamedAndSkipped) {
  TempDir dir("curate_missing");
  fixtures::write_curation_fixture(dir.path);
  fs::remove(dir.path / "low" / "valid_2.ppm");
  std::vector<std::string> errors;
  const auto pairs = load_paired_corpus(dir.path, errors);
  EXPECT_EQ(pairs.size(), 5u);
  ASSERT_EQ(errors.size(), 1u);
  EXPECT_NE(errors[0].find("valid_2"), std::string::npos);
}

TEST(Curation, ManifestRowsAndDeterminism) {
  TempDir dir("curate_manifest");
  fixtures::write_curation_fixture(dir.path);
  std::vector<std::string> errors;
  CurationOptions opt;
  opt.patch_size = 8;
  opt.stride = 8;
  std::string text[2];
  for (auto& t : text) {
    std::ostringstream os;
    write_manifest(os, curate(load_paired_corpus(dir.path, errors), opt));
    t = os.str();
  }
  EXPECT_EQ(text[0], text[1]);
  EXPECT_EQ(std::count(text[0].begin(), text[0].end(), '\n'), 1 + 6 * 4);
  EXPECT_EQ(text[0].rfind("source_id\trow\tcol", 0), 0u);
}

TEST(Curation, EmptyCorpus) {
  const auto report = curate({}, CurationOptions{});
  EXPECT_EQ(report.extracted(), 0u);
  std::ostringstream os;
  write_manifest(os, report);
  const std::string text = os.str();
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 1);
}
