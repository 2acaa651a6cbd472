#include <gtest/gtest.h>

#include "wat/gradcheck_suite.hpp"

using namespace wat;

namespace {

TEST(GradcheckSuite, EveryPrimitiveAndModelPasses) {
  const SuiteReport rep = run_gradcheck_suite();
  for (const auto& e : rep.entries) {
    EXPECT_TRUE(e.passed()) << e.group << " " << e.result.name << " rel " << e.result.max_rel_error << " in "
                            << e.result.worst_tensor << "[" << e.result.worst_index << "]";
  }
  EXPECT_TRUE(rep.corrupted_rule_detected);
  EXPECT_TRUE(rep.all_passed());
  EXPECT_GE(rep.entries.size(), 45u);
}

TEST(GradcheckSuite, PrimitivesOnlyIsFast) {
  SuiteOptions so;
  so.include_models = false;
  const SuiteReport rep = run_gradcheck_suite(so);
  EXPECT_TRUE(rep.all_passed());
  EXPECT_DOUBLE_EQ(rep.worst("model"), 0.0);
  EXPECT_LT(rep.worst("primitive"), 1e-3);
}

}  // namespace
