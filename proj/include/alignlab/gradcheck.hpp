#pragma once

#include <functional>
#include <string>
#include <vector>

#include "alignlab/autodiff.hpp"

// Central-difference verification of the reverse-mode gradients. The loss
// builder must rebuild the full graph from the current parameter values on
// every call; any discrete choices inside it (greedy picks, sampled
// negatives) must be frozen by the caller beforehand, since the checker
// probes the smooth neighborhood of the current point.

namespace alignlab::ad {

struct GradCheckReport {
  bool passed = false;
  Scalar max_relative_error = 0.0;
  Scalar tolerance = 0.0;
  std::string worst_parameter;
  int worst_row = -1;
  int worst_col = -1;
  std::size_t checked_entries = 0;
};

/// Compares reverse-mode gradients of `build_loss()` against central
/// differences with the given step, entry by entry over every parameter in
/// `params`. Error metric per entry: |analytic - numeric| divided by
/// max(|analytic|, |numeric|, 1), so large gradients are judged relatively
/// and vanishing ones absolutely.
GradCheckReport finite_difference_check(
    ParamStore& params, const std::function<NodePtr()>& build_loss,
    Scalar tolerance = 1e-4, Scalar step = 1e-5);

}  // namespace alignlab::ad
