#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "rwmn/error.hpp"
#include "rwmn/gradcheck_suite.hpp"

using namespace rwmn;

TEST(GradCheckSuite, CoversEveryVariant) {
  std::set<std::string> names;
  for (const auto& c : model_gradcheck_cases()) names.insert(c.name);
  for (const char* v : {"full", "noRW", "noR", "noQ", "noVid"}) {
    bool found = false;
    for (const auto& n : names) found |= n.find(v) != std::string::npos;
    EXPECT_TRUE(found) << v;
  }
  EXPECT_GT(op_gradcheck_cases().size(), 20u);
  EXPECT_EQ(default_gradcheck_cases().size(), op_gradcheck_cases().size() + model_gradcheck_cases().size());
}

TEST(GradCheckSuite, AllCasesPassOnFewSeeds) {
  GradCheckSuiteConfig config;
  config.seeds = 2;
  const auto cases = default_gradcheck_cases();
  const GradCheckReport report = run_gradcheck_suite(cases, config);
  ASSERT_EQ(report.entries.size(), cases.size());
  for (const auto& e : report.entries) {
    EXPECT_TRUE(e.passed) << e.name << " " << e.max_rel_error << " " << e.failure;
    EXPECT_EQ(e.seeds_run, 2u);
  }
  EXPECT_TRUE(report.passed());
}

TEST(GradCheckSuite, CorruptedBackwardIsCaught) {
  const std::vector<GradCheckCase> cases = {corrupted_gradcheck_case()};
  const GradCheckReport report = run_gradcheck_suite(cases, {});
  EXPECT_FALSE(report.passed());
  EXPECT_GT(report.entries[0].max_rel_error, 1e-2);
  std::ostringstream out;
  print_gradcheck_report(out, report, 1e-4);
  EXPECT_NE(out.str().find("FAIL"), std::string::npos);
}

TEST(GradCheckSuite, ExceptionsBecomeFailures) {
  const std::vector<GradCheckCase> cases = {
      {"throws", [](std::uint64_t, double) -> GradCheckResult { throw DimensionError("bad shape"); }}};
  const GradCheckReport report = run_gradcheck_suite(cases, {});
  ASSERT_EQ(report.entries.size(), 1u);
  EXPECT_FALSE(report.entries[0].passed);
  EXPECT_NE(report.entries[0].failure.find("bad shape"), std::string::npos);
}
