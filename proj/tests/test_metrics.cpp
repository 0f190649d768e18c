#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "fixtures.hpp"
#include "tfformer/metrics.hpp"

using namespace tfformer;

namespace {

std::vector<RankingOutcome> repeated(const std::string& w, const std::string& l, int n) {
  return std::vector<RankingOutcome>(static_cast<std::size_t>(n), RankingOutcome{w, l, 1.0});
}

std::vector<RankingOutcome> three_items() {
  std::vector<RankingOutcome> o;
  for (auto part : {repeated("a", "b", 3), repeated("b", "a", 1), repeated("b", "c", 2), repeated("c", "b", 2),
                    repeated("a", "c", 1), repeated("c", "a", 1)}) {
    o.insert(o.end(), part.begin(), part.end());
  }
  return o;
}

// Brute-force maximizer on the simplex: a 21x21 grid over (pi_a, pi_b) that
// recentres on its best point and shrinks by 4 every round.
std::map<std::string, double> grid_argmax(const std::vector<RankingOutcome>& outcomes) {
  double ca = 1.0 / 3, cb = 1.0 / 3, span = 0.3;
  for (int round = 0; round < 40; ++round) {
    double best = -INFINITY, ba = ca, bb = cb;
    for (int i = -10; i <= 10; ++i)
      for (int j = -10; j <= 10; ++j) {
        const double a = ca + span * i / 10, b = cb + span * j / 10;
        if (a <= 0 || b <= 0 || a + b >= 1) continue;
        const double ll = bradley_terry_log_likelihood(outcomes, {{"a", a}, {"b", b}, {"c", 1 - a - b}});
        if (ll > best) best = ll, ba = a, bb = b;
      }
    ca = ba;
    cb = bb;
    span /= 4;
  }
  return {{"a", ca}, {"b", cb}, {"c", 1 - ca - cb}};
}

}  // namespace

TEST(Psnr, ClosedForms) {
  const auto a = RgbImage::filled(4, 4, 0.5, 0.5, 0.5);
  EXPECT_EQ(psnr(a, a), kPsnrCap);
  EXPECT_NEAR(psnr(a, RgbImage::filled(4, 4, 0.6, 0.6, 0.6)), 20.0, 1e-6);
  // Off by 10 levels on a 0-255 scale everywhere: MSE = 100.
  const auto b = RgbImage::filled(4, 4, 100 / 255.0, 100 / 255.0, 100 / 255.0);
  const auto c = RgbImage::filled(4, 4, 110 / 255.0, 110 / 255.0, 110 / 255.0);
  EXPECT_NEAR(psnr(b, c), 10 * std::log10(255.0 * 255.0 / 100.0), 1e-6);
  EXPECT_NEAR(psnr(b, c), 28.13, 5e-3);
}

TEST(Ssim, IdentityAndConstants) {
  const auto img = fixtures::texture(16, 16, 0, 1, 1);
  EXPECT_NEAR(ssim(img, img), 1.0, 1e-12);
  const auto g = RgbImage::filled(12, 12, 0.4, 0.4, 0.4);
  EXPECT_NEAR(ssim(g, g), 1.0, 1e-12);
  const double c1 = 1e-4;
  EXPECT_NEAR(ssim(RgbImage::zeros(12, 12), RgbImage::filled(12, 12, 1, 1, 1)), c1 / (1 + c1), 1e-9);
}

TEST(Ssim, TooSmallThrows) {
  EXPECT_THROW(ssim(RgbImage::zeros(8, 20), RgbImage::zeros(8, 20)), DimensionError);
}

TEST(BradleyTerry, TwoItemRatio) {
  auto o = repeated("x", "y", 3);
  o.push_back({"y", "x", 1.0});
  const auto r = bradley_terry_fit(o);
  EXPECT_TRUE(r.converged);
  EXPECT_NEAR(r.strength.at("x") / r.strength.at("y"), 3.0, 1e-9);
  EXPECT_NEAR(r.strength.at("x") + r.strength.at("y"), 1.0, 1e-12);
}

TEST(BradleyTerry, SymmetricTriangleIsUniform) {
  const std::vector<RankingOutcome> o{{"a", "b"}, {"b", "a"}, {"b", "c"}, {"c", "b"}, {"c", "a"}, {"a", "c"}};
  for (const auto& [k, v] : bradley_terry_fit(o).strength) EXPECT_NEAR(v, 1.0 / 3.0, 1e-12) << k;
}

TEST(BradleyTerry, MatchesBruteForceLikelihoodMaximizer) {
  const auto o = three_items();
  BradleyTerryOptions opt;
  opt.check_monotone = true;
  const auto fit = bradley_terry_fit(o, opt);
  const auto grid = grid_argmax(o);
  for (const auto& [k, v] : grid) EXPECT_NEAR(fit.strength.at(k), v, 1e-6) << k;
  EXPECT_GE(fit.log_likelihood + 1e-12, bradley_terry_log_likelihood(o, grid));
}

TEST(BradleyTerry, WeightsActLikeRepeats) {
  std::vector<RankingOutcome> weighted{{"x", "y", 3.0}, {"y", "x", 1.0}};
  EXPECT_NEAR(bradley_terry_fit(weighted).strength.at("x"), 0.75, 1e-9);
}

TEST(BradleyTerry, DisconnectedGraphListsComponents) {
  const std::vector<RankingOutcome> o{{"a", "b"}, {"b", "a"}, {"c", "d"}, {"d", "c"}};
  try {
    bradley_terry_fit(o);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    for (const char* item : {"a", "b", "c", "d"}) EXPECT_NE(msg.find(item), std::string::npos);
  }
}

TEST(BradleyTerry, SmoothingKeepsWinlessItemPositive) {
  const std::vector<RankingOutcome> o{{"x", "y"}, {"x", "y"}};
  BradleyTerryOptions opt;
  opt.win_smoothing = 1e-9;
  const auto r = bradley_terry_fit(o, opt);
  EXPECT_GT(r.strength.at("y"), 0.0);
  EXPECT_GT(r.strength.at("x"), r.strength.at("y"));
}

TEST(DistributionReport, BlackImageAndOrdering) {
  const auto black = RgbImage::zeros(8, 8);
  const auto rep = distribution_report({black, fixtures::texture(8, 8, 0.2, 0.8, 3)}, {"dark", "lit"});
  ASSERT_EQ(rep.rows.size(), 2u);
  EXPECT_EQ(rep.rows[0].id, "dark");
  EXPECT_EQ(rep.rows[1].id, "lit");
  EXPECT_EQ(rep.rows[0].mean_intensity, 0.0);
  EXPECT_EQ(rep.rows[0].sharpness, 0.0);
  EXPECT_GT(rep.rows[1].sharpness, 0.0);
  for (const auto* h : {&rep.intensity, &rep.sharpness}) {
    std::size_t total = 0;
    for (auto c : h->counts) total += c;
    EXPECT_EQ(total, 2u);
    EXPECT_EQ(h->counts.size(), kReportBins);
  }
  std::ostringstream os;
  write_distribution_report(os, rep);
  EXPECT_EQ(os.str().rfind("id\tmean_intensity\tsharpness\ndark\t", 0), 0u);
}

TEST(ResultsTable, RowsAndMeanFooter) {
  const std::vector<ScoreRow> rows{{"p1", "", 21.5, 0.71}, {"p2", "", 24.25, 0.8125}};
  std::ostringstream os;
  write_results_table(os, rows);
  std::istringstream in(os.str());
  std::string line;
  std::vector<std::vector<std::string>> table;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, '\t');) cells.push_back(cell);
    table.push_back(cells);
  }
  ASSERT_EQ(table.size(), 4u);
  EXPECT_EQ(table[0][0], "pair_id");
  EXPECT_EQ(table[1][0], "p1");
  EXPECT_EQ(table[3][0], "mean");
  for (std::size_t col = 1; col <= 2; ++col) {
    const double mean = (std::stod(table[1][col]) + std::stod(table[2][col])) / 2;
    EXPECT_NEAR(std::stod(table[3][col]), mean, 1e-9);
  }
}

TEST(ResultsTable, PerCategoryMeans) {
  const std::vector<ScoreRow> rows{{"a", "indoor", 20, 0.5}, {"b", "indoor", 22, 0.7}, {"c", "outdoor", 30, 0.9}};
  std::ostringstream os;
  write_results_table(os, rows);
  const auto s = os.str();
  EXPECT_NE(s.find("mean[indoor]\t21.000000000000\t0.600000000000"), std::string::npos) << s;
  EXPECT_NE(s.find("mean[outdoor]\t30.000000000000"), std::string::npos);
  EXPECT_NE(s.find("\nmean\t24.000000000000"), std::string::npos);
}
