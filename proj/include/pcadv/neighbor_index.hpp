#pragma once

#include <optional>
#include <vector>

#include "pcadv/types.hpp"

namespace pcadv {

struct Neighbor {
  Index id = 0;
  double distance = 0.0;  // Euclidean, not squared

  friend bool operator==(const Neighbor&, const Neighbor&) = default;
};

inline double squared_distance(const double* a, const double* b) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

/// Exact k-d tree over a fixed reference cloud. Results are identical to a
/// brute-force scan ordered by (distance, id). Immutable after construction.
class NeighborIndex {
 public:
  explicit NeighborIndex(Points reference);

  const Points& reference() const noexcept { return points_; }
  Index size() const noexcept { return points_.rows(); }

  /// k nearest neighbours of `query`, ascending by distance, ties by lower id.
  /// `exclude` removes one reference id from consideration (self-match).
  std::vector<Neighbor> knn(const Point3& query, Index k, std::optional<Index> exclude = std::nullopt) const;

  /// Nearest reference point: (id, squared distance), ties by lower id.
  std::pair<Index, double> nearest(const double* query) const;

 private:
  struct Node {
    Index begin, end;  // range in order_
    int axis;          // -1 for a leaf
    double split;
    int left, right;
  };

  int build(Index begin, Index end);

  Points points_;
  std::vector<Index> order_;
  std::vector<Node> nodes_;
};

std::vector<Neighbor> knn(const NeighborIndex& index, const Point3& query, Index k,
                          std::optional<Index> exclude = std::nullopt);

}  // namespace pcadv
