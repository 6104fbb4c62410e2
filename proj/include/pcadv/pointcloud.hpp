#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pcadv/error.hpp"
#include "pcadv/types.hpp"

namespace pcadv {

struct ShapeClass {
  int id = 0;
  std::string name;
};

/// The procedural shape classes, ids dense in [0, C).
const std::vector<ShapeClass>& shape_classes();
const ShapeClass& shape_class(int id);
const ShapeClass& shape_class(std::string_view name);

/// An ordered set of points, optionally labelled with a shape class.
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(Points points, std::optional<int> label = std::nullopt);

  const Points& points() const noexcept { return points_; }
  Index size() const noexcept { return points_.rows(); }
  const std::optional<int>& label() const noexcept { return label_; }
  void set_label(std::optional<int> label) { label_ = label; }

  /// Rows selected by `ids`, in the given order; keeps the label.
  PointCloud subset(const std::vector<Index>& ids) const;

 private:
  Points points_;
  std::optional<int> label_;
};

template <typename Derived>
bool all_finite(const Eigen::MatrixBase<Derived>& m) {
  return m.array().isFinite().all();
}

/// Center the bounding box at the origin and scale uniformly so the largest
/// extent is 1. A zero-extent cloud is only translated.
template <typename Derived>
PointsX<typename Derived::Scalar> normalize_unit_cube(const Eigen::MatrixBase<Derived>& points) {
  using Scalar = typename Derived::Scalar;
  if (points.rows() < 1 || points.cols() != 3) {
    throw InvalidInput("normalize_unit_cube: expected a non-empty n x 3 point set");
  }
  if (!all_finite(points)) {
    throw InvalidInput("normalize_unit_cube: non-finite coordinate");
  }
  const Point3X<Scalar> lo = points.colwise().minCoeff();
  const Point3X<Scalar> hi = points.colwise().maxCoeff();
  const Point3X<Scalar> center = (lo + hi) / Scalar(2);
  const Scalar extent = (hi - lo).maxCoeff();

  PointsX<Scalar> out = points.rowwise() - center;
  if (extent > Scalar(0)) {
    out /= extent;
    // Clamp rounding spill so the [-0.5, 0.5] bound is exact.
    out = out.cwiseMax(Scalar(-0.5)).cwiseMin(Scalar(0.5));
  }
  return out;
}

PointCloud normalize_unit_cube(const PointCloud& cloud);

/// Deterministic quasi-uniform surface sample of a jittered class instance,
/// already unit-cube normalized.
PointCloud generate_shape(int class_id, Index n, Seed seed);

}  // namespace pcadv
