#pragma once

#include <vector>

#include "pcadv/pointcloud.hpp"
#include "pcadv/types.hpp"

namespace pcadv {

class AEModel;
class Classifier;

/// Chamfer distance together with the nearest-neighbour assignments that
/// produced it. `x_to_y[i]` is the closest row of Y to row i of X.
struct ChamferTerms {
  double value = 0.0;
  double x_term = 0.0;  // mean over X of min squared distance to Y
  double y_term = 0.0;
  std::vector<Index> x_to_y;
  std::vector<Index> y_to_x;
  std::vector<double> x_sq;  // per-point min squared distances
  std::vector<double> y_sq;
};

/// Mean-of-min squared distances in both directions, summed.
ChamferTerms chamfer_terms(const Points& x, const Points& y);
double chamfer(const Points& x, const Points& y);
inline double chamfer(const PointCloud& x, const PointCloud& y) { return chamfer(x.points(), y.points()); }

/// Per-point min squared distance from each row of `x` to `y`.
std::vector<double> nearest_squared(const Points& x, const Points& y);

struct OffSurface {
  Index count = 0;
  std::vector<Index> ids;
};

inline constexpr double kOffSurfaceGamma = 0.05;

/// Points of Q whose Euclidean distance to the closest point of S exceeds gamma.
OffSurface os_count(const Points& q, const Points& s, double gamma = kOffSurfaceGamma);

/// Geometric attack metrics; CD-family values are stored unscaled.
struct MetricRecord {
  Index os = 0;
  double s_cd = 0.0;   // CD(Q, S)
  double t_re = 0.0;   // CD(Q_hat, T)
  double t_nre = 0.0;  // t_re / CD(T_hat, T)
  double r = 0.0;      // s_cd + t_re
};

/// CD(f_AE(X), X): the model's inherent error on X.
double reconstruction_error(const AEModel& model, const Points& x);

/// CD(f_AE(Q), T) / CD(f_AE(T), T). Throws when the denominator is zero.
double t_nre(const AEModel& model, const Points& q, const Points& t);
double t_nre_with(double t_re, double target_self_error);

/// CD(f_AE(X), S) / CD(f_AE(S), S). Throws when the denominator is zero.
double s_nre(const AEModel& model, const Points& x, const Points& s);
double s_nre_with(double s_re, double source_self_error);

struct SemanticReport {
  double hit_target = 0.0;    // fraction predicted as the target class
  double avoid_source = 0.0;  // fraction predicted as anything but the source class
  Matrix confusion;           // rows true class, cols predicted, row-normalized
  Index count = 0;
};

/// `predicted[i]` is the classifier's label for reconstruction i. The
/// confusion matrix is indexed by target label (the intended class).
SemanticReport semantic_eval(const std::vector<int>& predicted, const std::vector<int>& source_labels,
                             const std::vector<int>& target_labels, int num_classes);
/// Classifies each reconstruction, then scores as above.
SemanticReport semantic_eval(const Classifier& classifier, const std::vector<Points>& reconstructions,
                             const std::vector<int>& source_labels, const std::vector<int>& target_labels);

}  // namespace pcadv
