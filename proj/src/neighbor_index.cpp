#include "pcadv/neighbor_index.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcadv/error.hpp"

namespace pcadv {

namespace {

constexpr Index kLeafSize = 8;

struct Candidate {
  double sq;
  Index id;
  bool operator<(const Candidate& o) const { return sq < o.sq || (sq == o.sq && id < o.id); }
};

}  // namespace

NeighborIndex::NeighborIndex(Points reference) : points_(std::move(reference)) {
  if (points_.rows() < 1) throw InvalidInput("NeighborIndex: empty reference cloud");
  order_.resize(static_cast<std::size_t>(points_.rows()));
  std::iota(order_.begin(), order_.end(), Index{0});
  nodes_.reserve(static_cast<std::size_t>(2 * points_.rows() / kLeafSize + 2));
  build(0, points_.rows());
}

int NeighborIndex::build(Index begin, Index end) {
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back({begin, end, -1, 0.0, -1, -1});
  if (end - begin <= kLeafSize) return id;

  Point3 lo = points_.row(order_[begin]);
  Point3 hi = lo;
  for (Index i = begin + 1; i < end; ++i) {
    lo = lo.cwiseMin(points_.row(order_[i]));
    hi = hi.cwiseMax(points_.row(order_[i]));
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] == lo[axis]) return id;  // all coincident; stay a leaf

  const Index mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](Index a, Index b) {
                     const double pa = points_(a, axis), pb = points_(b, axis);
                     return pa < pb || (pa == pb && a < b);
                   });
  const double split = points_(order_[mid], axis);
  const int left = build(begin, mid);
  const int right = build(mid, end);
  nodes_[id].axis = axis;
  nodes_[id].split = split;
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

std::vector<Neighbor> NeighborIndex::knn(const Point3& query, Index k, std::optional<Index> exclude) const {
  const Index available = size() - ((exclude && *exclude >= 0 && *exclude < size()) ? 1 : 0);
  if (k < 1 || k > available) {
    throw InvalidInput("knn: k=" + std::to_string(k) + " out of range [1, " + std::to_string(available) + "]");
  }
  const double q[3] = {query[0], query[1], query[2]};

  // Max-heap of the best k candidates under (sq, id) order.
  std::vector<Candidate> heap;
  heap.reserve(static_cast<std::size_t>(k) + 1);
  auto offer = [&](Index id) {
    if (exclude && id == *exclude) return;
    const Candidate c{squared_distance(q, &points_(id, 0)), id};
    if (static_cast<Index>(heap.size()) < k) {
      heap.push_back(c);
      std::push_heap(heap.begin(), heap.end());
    } else if (c < heap.front()) {
      std::pop_heap(heap.begin(), heap.end());
      heap.back() = c;
      std::push_heap(heap.begin(), heap.end());
    }
  };
  auto bound = [&]() {
    return static_cast<Index>(heap.size()) < k ? std::numeric_limits<double>::infinity() : heap.front().sq;
  };

  std::vector<std::pair<int, double>> stack{{0, 0.0}};
  while (!stack.empty()) {
    const auto [node_id, gap] = stack.back();
    stack.pop_back();
    // Equal-distance subtrees may still hold lower ids, so prune strictly.
    if (gap > bound()) continue;
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (Index i = node.begin; i < node.end; ++i) offer(order_[i]);
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    stack.emplace_back(far, diff * diff);
    stack.emplace_back(near, 0.0);
  }

  std::sort_heap(heap.begin(), heap.end());
  std::vector<Neighbor> out;
  out.reserve(heap.size());
  for (const auto& c : heap) out.push_back({c.id, std::sqrt(c.sq)});
  return out;
}

std::pair<Index, double> NeighborIndex::nearest(const double* q) const {
  Candidate best{std::numeric_limits<double>::infinity(), -1};
  // Small fixed stack; depth is logarithmic in the reference size.
  std::pair<int, double> stack[128];
  int top = 0;
  stack[top++] = {0, 0.0};
  while (top > 0) {
    const auto [node_id, gap] = stack[--top];
    if (gap > best.sq) continue;
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
      for (Index i = node.begin; i < node.end; ++i) {
        const Index id = order_[i];
        const Candidate c{squared_distance(q, &points_(id, 0)), id};
        if (c < best) best = c;
      }
      continue;
    }
    const double diff = q[node.axis] - node.split;
    const int near = diff < 0 ? node.left : node.right;
    const int far = diff < 0 ? node.right : node.left;
    stack[top++] = {far, diff * diff};
    stack[top++] = {near, 0.0};
  }
  return {best.id, best.sq};
}

std::vector<Neighbor> knn(const NeighborIndex& index, const Point3& query, Index k, std::optional<Index> exclude) {
  return index.knn(query, k, exclude);
}

}  // namespace pcadv
