#pragma once

// Randomised finite-difference suites behind `posewarp gradcheck`.

#include <cstdint>
#include <string>
#include <vector>

namespace posewarp {

inline constexpr double kOpsTolerance = 1e-2;
inline constexpr double kEnd2EndTolerance = 2e-2;
inline constexpr int kDefaultConfigs = 64;

struct SuiteEntry {
  std::string name;
  double worst_rel_error = 0.0;
  int configs = 0;
  double tolerance = kOpsTolerance;
  std::string worst_case;  // description of the configuration behind the worst error

  bool passed() const { return worst_rel_error < tolerance; }
};

struct SuiteResult {
  std::string scope;
  std::vector<SuiteEntry> entries;
  double seconds = 0.0;

  bool passed() const;
  std::vector<std::string> failing() const;
};

// Every differentiable primitive, `configs` random configurations each.
SuiteResult run_ops_suite(std::uint64_t seed, int configs = kDefaultConfigs);
// Loss terms on random small tensors.
SuiteResult run_losses_suite(std::uint64_t seed, int configs = kDefaultConfigs);
// full_generator_loss through both generator passes on a 16x16 toy model,
// against every G parameter tensor (identity and L1-ablation variants).
SuiteResult run_end2end_suite(std::uint64_t seed);

SuiteResult run_suite(const std::string& scope, std::uint64_t seed, int configs = kDefaultConfigs);

}  // namespace posewarp
