#pragma once

// Finite-difference checks for every differentiable op and for the
// end-to-end loss of each model variant, on toy shapes at 64-bit.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "rwmn/tensor.hpp"

namespace rwmn {

struct GradCheckSuiteConfig {
  std::size_t seeds = 20;
  std::uint64_t base_seed = 1;
  double tolerance = 1e-4;
  double step = 1e-5;
};

// One named check; `run` draws fresh inputs from `seed`.
struct GradCheckCase {
  std::string name;
  std::function<GradCheckResult(std::uint64_t seed, double step)> run;
};

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;  // worst over seeds
  std::size_t seeds_run = 0;
  bool passed = false;
  std::string failure;  // first non-finite value or exception, if any
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double seconds = 0.0;

  bool passed() const;
};

std::vector<GradCheckCase> op_gradcheck_cases();
// Loss of full, noRW, noR, noQ and noVid models, plus full with a trainable
// word table.
std::vector<GradCheckCase> model_gradcheck_cases();
std::vector<GradCheckCase> default_gradcheck_cases();

// An op whose backward is deliberately off by 10%. It must fail.
GradCheckCase corrupted_gradcheck_case();

// Exceptions inside a case are recorded as failures, never rethrown.
GradCheckReport run_gradcheck_suite(std::span<const GradCheckCase> cases, const GradCheckSuiteConfig& config);

// One line per check with its max relative error, then a summary line.
void print_gradcheck_report(std::ostream& out, const GradCheckReport& report, double tolerance);

}  // namespace rwmn
