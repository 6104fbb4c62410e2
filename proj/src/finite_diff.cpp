#include "pcadv/finite_diff.hpp"

#include <algorithm>
#include <cmath>

#include "pcadv/error.hpp"

namespace pcadv::ad {

FiniteDiffReport finite_diff_check(const std::function<double(const Vector&)>& f, const Vector& x,
                                   const Vector& analytic, const FiniteDiffOptions& options) {
  if (analytic.size() != x.size()) throw ShapeMismatch("finite_diff_check: gradient length differs from x");
  FiniteDiffReport report;
  Vector probe = x;
  for (Index i = 0; i < x.size(); ++i) {
    if (options.skip && options.skip(i)) {
      ++report.skipped;
      continue;
    }
    probe[i] = x[i] + options.h;
    const double up = f(probe);
    probe[i] = x[i] - options.h;
    const double down = f(probe);
    probe[i] = x[i];
    const double numeric = (up - down) / (2.0 * options.h);
    const double err = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    if (err > report.max_relative_error || report.worst_coordinate < 0) {
      report.max_relative_error = std::max(report.max_relative_error, err);
      report.worst_coordinate = i;
    }
    ++report.checked;
  }
  return report;
}

std::function<bool(Index)> near_kink_skip(const Vector& x, double h) {
  return [x, h](Index i) { return std::abs(x[i]) < 10.0 * h; };
}

}  // namespace pcadv::ad
