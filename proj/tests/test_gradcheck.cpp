#include <gtest/gtest.h>

#include <set>

#include "tfformer/gradcheck.hpp"
#include "tfformer/ops.hpp"

using namespace tfformer;

namespace {

ModelConfig narrow() {
  ModelConfig c;
  c.base_width = 8;
  c.heads_per_stage = {1, 2, 2};
  c.bottleneck_heads = 2;
  c.refine_width = 4;
  return c;
}

}  // namespace

TEST(Gradcheck, RelativeErrorFloor) {
  EXPECT_EQ(relative_error(0.0, 0.0), 0.0);
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_NEAR(relative_error(1e-9, 0.0), 1e-3, 1e-15);
}

TEST(Gradcheck, EveryBlockIsCoveredAndPasses) {
  const auto report = run_gradcheck(narrow(), GradcheckOptions{});
  std::set<std::string> names;
  for (const auto& b : report.blocks) {
    names.insert(b.block);
    EXPECT_TRUE(b.passed) << b.block << " max rel " << b.max_rel_error << " worst " << b.worst_tensor;
    EXPECT_GT(b.samples, 0u) << b.block;
  }
  for (const char* want : {"(a) lc_map_L", "(b) lc_map_C", "(c) encoder_L", "(d) encoder_C", "(e) lccab",
                           "(f) decoder", "(g) lcgrb", "loss", "full_model"}) {
    EXPECT_TRUE(names.count(want)) << want;
  }
  EXPECT_TRUE(report.passed());
}

TEST(Gradcheck, InjectedFaultIsCaughtAndNamed) {
  tfformer::testing::inject_backward_fault(tfformer::testing::FaultOp::gelu);
  const auto report = run_gradcheck(narrow(), GradcheckOptions{});
  tfformer::testing::inject_backward_fault(tfformer::testing::FaultOp::none);
  EXPECT_FALSE(report.passed());
  bool lc_map_failed = false;
  for (const auto& b : report.blocks)
    if (b.block == "(a) lc_map_L" && !b.passed) lc_map_failed = true;
  EXPECT_TRUE(lc_map_failed);
}
