#pragma once

#include <functional>

#include "pcadv/types.hpp"

namespace pcadv::ad {

struct FiniteDiffOptions {
  double h = 1e-4;
  /// Coordinates for which this returns true are left out of the check
  /// (subgradient points: relu kinks, max-pool ties, assignment switches).
  std::function<bool(Index)> skip;
};

struct FiniteDiffReport {
  double max_relative_error = 0.0;
  Index worst_coordinate = -1;
  Index checked = 0;
  Index skipped = 0;
};

/// Central differences of `f` at `x` compared coordinate-wise against
/// `analytic`; error is |analytic - fd| / max(1, |analytic|).
FiniteDiffReport finite_diff_check(const std::function<double(const Vector&)>& f, const Vector& x,
                                   const Vector& analytic, const FiniteDiffOptions& options = {});

/// Skip rule for a function with relu kinks at coordinate value 0.
std::function<bool(Index)> near_kink_skip(const Vector& x, double h);

}  // namespace pcadv::ad
