#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "alignlab/types.hpp"

// Identity and monotonicity suites over randomized fixtures. These are the
// checks behind the `losscheck` subcommand; each one validates a structural
// property of the objectives rather than a frozen numeric value.

namespace alignlab {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;  // max residual / counterexample description
};

/// The full suite, deterministic per seed.
std::vector<PropertyResult> run_property_checks(std::uint64_t seed);

struct GradFixtureResult {
  std::string name;
  bool passed = false;
  Scalar max_relative_error = 0.0;
  std::size_t param_count = 0;  // checked entries = trainable scalars
};

/// Finite-difference validation of every objective on small random models
/// (a few hundred parameters each): three fixtures per objective family,
/// sequence and grid variants included. Discrete choices are stable by
/// construction — fixtures whose greedy picks sit within 1e-3 of a tie are
/// rerolled, and rollout negatives are frozen before probing.
std::vector<GradFixtureResult> run_gradient_fixtures(std::uint64_t seed);

}  // namespace alignlab
