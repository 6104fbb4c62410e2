#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

#include "pcadv/types.hpp"

namespace pcadv::ad {

/// Plain (tape-free) kernels. Tape forward passes call exactly these, so
/// tape values and direct evaluation agree bit for bit.
namespace ops {

/// Per-row affine map: out.row(i) = bias + x.row(i) * weight. Each row is
/// computed with the same summation order regardless of the other rows.
Matrix affine(const Matrix& x, const Matrix& weight, const Matrix& bias);
Matrix relu(const Matrix& x);
/// Column-wise max over rows; `argmax[j]` is the first row attaining it.
Matrix maxpool_points(const Matrix& features, std::vector<Index>* argmax = nullptr);
/// 1 x 3n row -> n x 3, point i taken from columns 3i..3i+2.
Matrix to_points(const Matrix& flat);

}  // namespace ops

enum class Op {
  leaf,
  affine,
  relu,
  maxpool_points,
  add,
  sub,
  scale,
  l2_norm,
  chamfer,
  mean,
  to_points,
  softmax_cross_entropy,
  max_nearest_squared,
};

std::string_view op_name(Op op);

/// Handle to a tape node.
struct Var {
  std::size_t id = 0;
};

/// Reverse-mode tape over a fixed set of matrix ops. Nodes are appended in
/// topological order; backward visits them once in reverse.
class Tape {
 public:
  Var variable(Matrix value);  // leaf that receives a gradient
  Var constant(Matrix value);  // leaf without gradient

  Var affine(Var x, Var weight, Var bias);
  Var relu(Var x);
  Var maxpool_points(Var features);
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, double factor);
  Var l2_norm(Var v);
  Var chamfer(Var x, Var y);
  Var mean(Var x);
  Var to_points(Var flat);
  Var softmax_cross_entropy(Var logits, int label);
  /// max over rows x of min over rows y of ||x - y||^2.
  Var max_nearest_squared(Var x, Var y);

  const Matrix& value(Var v) const;
  double scalar(Var v) const;
  /// Argmax rows recorded by a maxpool_points node.
  const std::vector<Index>& argmax(Var pooled) const;

  /// Populates adjoints of every node that depends on a variable leaf.
  /// Throws if `root` is not 1 x 1.
  void backward(Var root);
  /// Adjoint after backward(); a zero matrix for nodes not reached.
  Matrix grad(Var v) const;

  /// Hash of every piecewise selection made in the forward pass (relu masks,
  /// max-pool argmaxes, nearest-neighbour assignments). Two evaluations with
  /// equal signatures lie on the same smooth piece.
  std::uint64_t branch_signature() const;

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Op op = Op::leaf;
    std::size_t a = 0, b = 0, c = 0;
    bool needs_grad = false;
    Matrix value;
    Matrix adjoint;
    double factor = 0.0;
    int label = 0;
    std::vector<Index> sel_a;  // argmax, or x->y assignment
    std::vector<Index> sel_b;  // y->x assignment
  };

  Var push(Node node);
  Node& at(Var v);
  const Node& at(Var v) const;
  void accumulate(std::size_t id, const Matrix& delta);

  std::vector<Node> nodes_;
};

}  // namespace pcadv::ad
