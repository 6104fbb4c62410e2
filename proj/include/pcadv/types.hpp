#pragma once

#include <Eigen/Core>

#include <cstdint>

namespace pcadv {

using Index = Eigen::Index;

/// n x 3 coordinates, one point per row.
template <typename Scalar>
using PointsX = Eigen::Matrix<Scalar, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Points = PointsX<double>;

template <typename Scalar>
using Point3X = Eigen::Matrix<Scalar, 1, 3>;
using Point3 = Point3X<double>;

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using Vector = Eigen::VectorXd;

using Seed = std::uint64_t;

}  // namespace pcadv
