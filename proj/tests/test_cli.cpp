#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "cli.hpp"
#include "fixtures.hpp"
#include "tfformer/image_io.hpp"

using namespace tfformer;
using fixtures::TempDir;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "tfformer");
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::string> lines_of(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

const std::vector<std::string> kTinyModel = {"--set", "model.base_width=4",       "--set", "model.heads_per_stage=1,1,2",
                                             "--set", "model.bottleneck_heads=2", "--set", "model.refine_width=2"};

std::vector<std::string> with_tiny(std::vector<std::string> args) {
  args.insert(args.end(), kTinyModel.begin(), kTinyModel.end());
  return args;
}

void write_pair_dir(const fs::path& root, const std::vector<std::string>& names, bool identical) {
  fs::create_directories(root / "low");
  fs::create_directories(root / "ref");
  std::uint64_t seed = 100;
  for (const auto& n : names) {
    const auto ref = fixtures::texture(16, 16, 0.1, 0.9, seed++);
    save_image(ref, root / "ref" / (n + ".png"));
    save_image(identical ? ref : fixtures::scaled(ref, 0.3), root / "low" / (n + ".png"));
  }
}

}  // namespace

TEST(Cli, HelpAndUsageErrors) {
  EXPECT_EQ(invoke({"--help"}).code, 0);
  const auto none = invoke({});
  EXPECT_EQ(none.code, 1);
  EXPECT_EQ(invoke({"frobnicate"}).code, 1);
}

TEST(Cli, CurateFixtureAcceptsTwoAndIsByteStable) {
  TempDir dir("cli_curate");
  fixtures::write_curation_fixture(dir.path / "corpus");
  std::string manifests[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = dir.path / ("run" + std::to_string(i));
    const auto r = invoke({"curate", (dir.path / "corpus").string(), "--out", out.string(), "--patch-size", "16",
                        "--stride", "16"});
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("extracted 6 accepted 2 rejected 4"), std::string::npos) << r.out;
    manifests[i] = slurp(out / "manifest.tsv");
    EXPECT_TRUE(fs::exists(out / "patches" / "low" / "valid_1_r0_c0.png"));
    EXPECT_TRUE(fs::exists(out / "patches" / "ref" / "valid_2_r0_c0.png"));
    EXPECT_FALSE(fs::exists(out / "patches" / "ref" / "dark_1_r0_c0.png"));
    EXPECT_TRUE(fs::exists(out / "curate.config.txt"));
  }
  EXPECT_EQ(manifests[0], manifests[1]);
  EXPECT_EQ(lines_of(manifests[0]).size(), 7u);
}

TEST(Cli, CurateEmptyCorpusWritesHeaderOnly) {
  TempDir dir("cli_curate_empty");
  fs::create_directories(dir.path / "corpus" / "low");
  fs::create_directories(dir.path / "corpus" / "ref");
  const auto r = invoke({"curate", (dir.path / "corpus").string(), "--out", (dir.path / "o").string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(slurp(dir.path / "o" / "manifest.tsv")).size(), 1u);
}

TEST(Cli, CurateMissingCorpusIsDataError) {
  TempDir dir("cli_curate_missing");
  EXPECT_EQ(invoke({"curate", (dir.path / "nope").string(), "--out", dir.path.string()}).code, 2);
}

TEST(Cli, BadConfigValueNamesTheField) {
  TempDir dir("cli_badcfg");
  const auto r = invoke({"train", "--synthetic", "--out", dir.path.string(), "--set", "train.lr=-1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("train.lr"), std::string::npos) << r.err;
  const auto unknown = invoke({"train", "--synthetic", "--out", dir.path.string(), "--set", "train.bogus=3"});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_NE(unknown.err.find("train.bogus"), std::string::npos) << unknown.err;
}

TEST(Cli, ConfigFileAndOverrideLogging) {
  TempDir dir("cli_cfgfile");
  {
    std::ofstream f(dir.path / "run.cfg");
    f << "# tiny run\ntrain.steps = 0\nmodel.base_width = 4\nmodel.heads_per_stage = 1,1,2\n"
         "model.bottleneck_heads = 2\nmodel.refine_width = 2\ndata.synthetic = true\n";
  }
  const auto r = invoke({"train", "--config", (dir.path / "run.cfg").string(), "--out", (dir.path / "o").string(),
                      "--set", "train.patch=16"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("override train.patch = 16"), std::string::npos) << r.err;
  EXPECT_NE(r.out.find("train.patch = 16"), std::string::npos);
  EXPECT_NE(slurp(dir.path / "o" / "train.config.txt").find("model.base_width = 4"), std::string::npos);
}

TEST(Cli, TrainZeroStepsWritesInitCheckpoint) {
  TempDir dir("cli_train0");
  const auto r = invoke(with_tiny({"train", "--synthetic", "--steps", "0", "--patch", "16", "--out", dir.path.string()}));
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir.path / "checkpoint.tff"));
  EXPECT_TRUE(fs::exists(dir.path / "train_state.tfs"));
  EXPECT_EQ(lines_of(slurp(dir.path / "loss.tsv")).size(), 1u);
}

TEST(Cli, ResumeReproducesTheUninterruptedLossLog) {
  TempDir dir("cli_resume");
  const auto base = [&](const fs::path& out, const std::string& steps) {
    return with_tiny({"train", "--synthetic", "--patch", "16", "--steps", steps, "--out", out.string(), "--set",
                      "data.synthetic_count=3", "--set", "train.batch=2", "--set", "train.lr=1e-3", "--set",
                      "train.checkpoint_every=3", "--set", "train.validate_every=2"});
  };
  ASSERT_EQ(invoke(base(dir.path / "full", "6")).code, 0);
  // An interrupted run: train to step 3 only, then resume to 6.
  ASSERT_EQ(invoke(base(dir.path / "split", "3")).code, 0);
  auto resume = base(dir.path / "split", "6");
  resume.push_back("--resume");
  const auto r = invoke(resume);
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.err.find("resuming at step 3"), std::string::npos);
  EXPECT_EQ(slurp(dir.path / "full" / "loss.tsv"), slurp(dir.path / "split" / "loss.tsv"));
  EXPECT_EQ(lines_of(slurp(dir.path / "full" / "loss.tsv")).size(), 7u);
  EXPECT_EQ(slurp(dir.path / "full" / "checkpoint.tff"), slurp(dir.path / "split" / "checkpoint.tff"));
}

TEST(Cli, ResumeWithoutStateIsDataError) {
  TempDir dir("cli_resume_missing");
  EXPECT_EQ(invoke(with_tiny({"train", "--synthetic", "--resume", "--out", dir.path.string()})).code, 2);
}

TEST(Cli, EnhanceKeepsSizeAndIsBitwiseRepeatable) {
  TempDir dir("cli_enhance");
  ASSERT_EQ(invoke(with_tiny({"train", "--synthetic", "--steps", "0", "--patch", "16", "--out",
                           (dir.path / "m").string()}))
                .code,
            0);
  save_image(fixtures::texture(33, 45, 0, 0.3, 5), dir.path / "odd.png");
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    const auto out = dir.path / ("e" + std::to_string(i));
    const auto r = invoke({"enhance", (dir.path / "m" / "checkpoint.tff").string(), (dir.path / "odd.png").string(),
                        "--out", out.string(), "--emit-rec"});
    ASSERT_EQ(r.code, 0) << r.err;
    const auto img = load_image(out / "odd.png");
    EXPECT_EQ(img.height(), 33u);
    EXPECT_EQ(img.width(), 45u);
    EXPECT_TRUE(fs::exists(out / "rec" / "odd.png"));
    bytes[i] = slurp(out / "odd.png");
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(Cli, EnhanceDirectoryContinuesPastACorruptFile) {
  TempDir dir("cli_enhance_dir");
  ASSERT_EQ(invoke(with_tiny({"train", "--synthetic", "--steps", "0", "--patch", "16", "--out",
                           (dir.path / "m").string()}))
                .code,
            0);
  fs::create_directories(dir.path / "in");
  save_image(fixtures::texture(8, 8, 0, 1, 1), dir.path / "in" / "a.png");
  save_image(fixtures::texture(9, 7, 0, 1, 2), dir.path / "in" / "c.ppm");
  {
    std::ofstream f(dir.path / "in" / "b.png", std::ios::binary);
    f << "garbage";
  }
  const auto r = invoke({"enhance", (dir.path / "m" / "checkpoint.tff").string(), (dir.path / "in").string(), "--out",
                      (dir.path / "o").string()});
  EXPECT_NE(r.code, 0);
  EXPECT_NE(r.err.find("b.png"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(dir.path / "o" / "a.png"));
  EXPECT_TRUE(fs::exists(dir.path / "o" / "c.ppm"));
  EXPECT_FALSE(fs::exists(dir.path / "o" / "b.png"));
}

TEST(Cli, EvalIdentityOnMatchingPairs) {
  TempDir dir("cli_eval");
  write_pair_dir(dir.path / "test", {"p1", "p2"}, true);
  const auto r = invoke({"eval", (dir.path / "test").string(), "--identity", "--out", (dir.path / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::vector<std::vector<std::string>> rows;
  for (const auto& line : lines_of(slurp(dir.path / "o" / "results.tsv"))) {
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    for (std::string c; std::getline(ls, c, '\t');) cells.push_back(c);
    rows.push_back(cells);
  }
  ASSERT_EQ(rows.size(), 4u);
  for (std::size_t i = 1; i <= 3; ++i) {
    EXPECT_EQ(std::stod(rows[i][1]), 100.0);
    EXPECT_NEAR(std::stod(rows[i][2]), 1.0, 1e-12);
  }
  EXPECT_EQ(rows[3][0], "mean");
}

TEST(Cli, EvalFooterIsTheRowMean) {
  TempDir dir("cli_eval_mean");
  write_pair_dir(dir.path / "test", {"p1", "p2"}, false);
  const auto r = invoke({"eval", (dir.path / "test").string(), "--identity", "--out", (dir.path / "o").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto lines = lines_of(slurp(dir.path / "o" / "results.tsv"));
  std::vector<double> psnr;
  for (const auto& line : lines) {
    if (line.empty() || line[0] == '#' || line.rfind("pair_id", 0) == 0) continue;
    psnr.push_back(std::stod(line.substr(line.find('\t') + 1)));
  }
  ASSERT_EQ(psnr.size(), 3u);
  EXPECT_NEAR(psnr[2], (psnr[0] + psnr[1]) / 2, 1e-9);
}

TEST(Cli, EvalRequiresExactlyOneModelSource) {
  TempDir dir("cli_eval_flags");
  write_pair_dir(dir.path / "test", {"p1"}, true);
  EXPECT_EQ(invoke({"eval", (dir.path / "test").string(), "--out", dir.path.string()}).code, 1);
  EXPECT_EQ(invoke({"eval", (dir.path / "test").string(), "--identity", "--checkpoint", "x.tff", "--out",
                 dir.path.string()})
                .code,
            1);
}

TEST(Cli, GradcheckPassesAndCatchesAnInjectedFault) {
  TempDir dir("cli_gradcheck");
  const auto ok = invoke(with_tiny({"gradcheck", "--out", (dir.path / "a").string()}));
  EXPECT_EQ(ok.code, 0) << ok.out;
  EXPECT_NE(ok.out.find("gradcheck PASS"), std::string::npos);
  const auto bad = invoke(with_tiny({"gradcheck", "--inject-fault", "softmax", "--out", (dir.path / "b").string()}));
  EXPECT_EQ(bad.code, 3);
  EXPECT_NE(bad.out.find("gradcheck FAIL"), std::string::npos);
  EXPECT_NE(slurp(dir.path / "b" / "gradcheck.txt").find("lcgab\t"), std::string::npos);
}
