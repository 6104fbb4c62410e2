#include "pcadv/autodiff.hpp"

#include <cmath>
#include <string>

#include "pcadv/error.hpp"
#include "pcadv/metrics.hpp"

namespace pcadv::ad {

namespace ops {

Matrix affine(const Matrix& x, const Matrix& weight, const Matrix& bias) {
  if (x.cols() != weight.rows() || bias.rows() != 1 || bias.cols() != weight.cols()) {
    throw ShapeMismatch("affine: x is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                        ", weight " + std::to_string(weight.rows()) + "x" + std::to_string(weight.cols()) +
                        ", bias " + std::to_string(bias.rows()) + "x" + std::to_string(bias.cols()));
  }
  Matrix out(x.rows(), weight.cols());
  for (Index j = 0; j < weight.cols(); ++j) out.col(j).setConstant(bias(0, j));
  for (Index k = 0; k < x.cols(); ++k) {
    for (Index j = 0; j < weight.cols(); ++j) out.col(j) += weight(k, j) * x.col(k);
  }
  return out;
}

Matrix relu(const Matrix& x) { return x.cwiseMax(0.0); }

Matrix maxpool_points(const Matrix& features, std::vector<Index>* argmax) {
  if (features.rows() < 1) throw ShapeMismatch("maxpool_points: no rows");
  Matrix out(1, features.cols());
  if (argmax) argmax->assign(static_cast<std::size_t>(features.cols()), 0);
  for (Index j = 0; j < features.cols(); ++j) {
    Index best = 0;
    double value = features(0, j);
    for (Index i = 1; i < features.rows(); ++i) {
      if (features(i, j) > value) {
        value = features(i, j);
        best = i;
      }
    }
    out(0, j) = value;
    if (argmax) (*argmax)[j] = best;
  }
  return out;
}

Matrix to_points(const Matrix& flat) {
  if (flat.rows() != 1 || flat.cols() % 3 != 0) throw ShapeMismatch("to_points: expected a 1 x 3n row");
  const Index n = flat.cols() / 3;
  Matrix out(n, 3);
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < 3; ++c) out(i, c) = flat(0, 3 * i + c);
  }
  return out;
}

}  // namespace ops

namespace {

Points as_points(const Matrix& m) {
  if (m.cols() != 3) throw ShapeMismatch("expected an n x 3 point matrix");
  return Points(m);
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeMismatch(std::string(op) + ": operand shapes " + std::to_string(a.rows()) + "x" +
                        std::to_string(a.cols()) + " and " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + " differ");
  }
}

Matrix scalar_matrix(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace

std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::affine: return "affine";
    case Op::relu: return "relu";
    case Op::maxpool_points: return "maxpool_points";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::scale: return "scale";
    case Op::l2_norm: return "l2_norm";
    case Op::chamfer: return "chamfer";
    case Op::mean: return "mean";
    case Op::to_points: return "to_points";
    case Op::softmax_cross_entropy: return "softmax_cross_entropy";
    case Op::max_nearest_squared: return "max_nearest_squared";
  }
  return "?";
}

Var Tape::push(Node node) {
  if (!node.value.allFinite()) {
    throw NumericError("autodiff: non-finite value produced by " + std::string(op_name(node.op)) + " (node " +
                       std::to_string(nodes_.size()) + ")");
  }
  nodes_.push_back(std::move(node));
  return Var{nodes_.size() - 1};
}

Tape::Node& Tape::at(Var v) {
  if (v.id >= nodes_.size()) throw InvalidInput("autodiff: unknown node");
  return nodes_[v.id];
}

const Tape::Node& Tape::at(Var v) const {
  if (v.id >= nodes_.size()) throw InvalidInput("autodiff: unknown node");
  return nodes_[v.id];
}

Var Tape::variable(Matrix value) {
  Node n;
  n.needs_grad = true;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::affine(Var x, Var weight, Var bias) {
  Node n;
  n.op = Op::affine;
  n.a = x.id;
  n.b = weight.id;
  n.c = bias.id;
  n.value = ops::affine(at(x).value, at(weight).value, at(bias).value);
  n.needs_grad = at(x).needs_grad || at(weight).needs_grad || at(bias).needs_grad;
  return push(std::move(n));
}

Var Tape::relu(Var x) {
  Node n;
  n.op = Op::relu;
  n.a = x.id;
  n.value = ops::relu(at(x).value);
  n.needs_grad = at(x).needs_grad;
  return push(std::move(n));
}

Var Tape::maxpool_points(Var features) {
  Node n;
  n.op = Op::maxpool_points;
  n.a = features.id;
  n.value = ops::maxpool_points(at(features).value, &n.sel_a);
  n.needs_grad = at(features).needs_grad;
  return push(std::move(n));
}

Var Tape::add(Var a, Var b) {
  require_same_shape(at(a).value, at(b).value, "add");
  Node n;
  n.op = Op::add;
  n.a = a.id;
  n.b = b.id;
  n.value = at(a).value + at(b).value;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  return push(std::move(n));
}

Var Tape::sub(Var a, Var b) {
  require_same_shape(at(a).value, at(b).value, "sub");
  Node n;
  n.op = Op::sub;
  n.a = a.id;
  n.b = b.id;
  n.value = at(a).value - at(b).value;
  n.needs_grad = at(a).needs_grad || at(b).needs_grad;
  return push(std::move(n));
}

Var Tape::scale(Var a, double factor) {
  Node n;
  n.op = Op::scale;
  n.a = a.id;
  n.factor = factor;
  n.value = factor * at(a).value;
  n.needs_grad = at(a).needs_grad;
  return push(std::move(n));
}

Var Tape::l2_norm(Var v) {
  Node n;
  n.op = Op::l2_norm;
  n.a = v.id;
  n.value = scalar_matrix(at(v).value.norm());
  n.needs_grad = at(v).needs_grad;
  return push(std::move(n));
}

Var Tape::chamfer(Var x, Var y) {
  const Points px = as_points(at(x).value);
  const Points py = as_points(at(y).value);
  ChamferTerms terms = chamfer_terms(px, py);
  Node n;
  n.op = Op::chamfer;
  n.a = x.id;
  n.b = y.id;
  n.value = scalar_matrix(terms.value);
  n.sel_a = std::move(terms.x_to_y);
  n.sel_b = std::move(terms.y_to_x);
  n.needs_grad = at(x).needs_grad || at(y).needs_grad;
  return push(std::move(n));
}

Var Tape::mean(Var x) {
  const Matrix& v = at(x).value;
  if (v.size() == 0) throw ShapeMismatch("mean: empty operand");
  Node n;
  n.op = Op::mean;
  n.a = x.id;
  n.value = scalar_matrix(v.mean());
  n.needs_grad = at(x).needs_grad;
  return push(std::move(n));
}

Var Tape::to_points(Var flat) {
  Node n;
  n.op = Op::to_points;
  n.a = flat.id;
  n.value = ops::to_points(at(flat).value);
  n.needs_grad = at(flat).needs_grad;
  return push(std::move(n));
}

Var Tape::softmax_cross_entropy(Var logits, int label) {
  const Matrix& z = at(logits).value;
  if (z.rows() != 1 || label < 0 || label >= z.cols()) {
    throw ShapeMismatch("softmax_cross_entropy: expected 1 x C logits and a label in [0, C)");
  }
  const double top = z.maxCoeff();
  const double lse = top + std::log((z.array() - top).exp().sum());
  Node n;
  n.op = Op::softmax_cross_entropy;
  n.a = logits.id;
  n.label = label;
  n.value = scalar_matrix(lse - z(0, label));
  n.needs_grad = at(logits).needs_grad;
  return push(std::move(n));
}

Var Tape::max_nearest_squared(Var x, Var y) {
  const Points px = as_points(at(x).value);
  const Points py = as_points(at(y).value);
  const ChamferTerms terms = chamfer_terms(px, py);
  Index worst = 0;
  for (Index i = 1; i < px.rows(); ++i) {
    if (terms.x_sq[i] > terms.x_sq[worst]) worst = i;
  }
  Node n;
  n.op = Op::max_nearest_squared;
  n.a = x.id;
  n.b = y.id;
  n.value = scalar_matrix(terms.x_sq[worst]);
  n.sel_a = {worst, terms.x_to_y[worst]};
  n.needs_grad = at(x).needs_grad || at(y).needs_grad;
  return push(std::move(n));
}

const Matrix& Tape::value(Var v) const { return at(v).value; }

double Tape::scalar(Var v) const {
  const Matrix& m = at(v).value;
  if (m.size() != 1) throw ShapeMismatch("scalar: node is not 1 x 1");
  return m(0, 0);
}

const std::vector<Index>& Tape::argmax(Var pooled) const {
  const Node& n = at(pooled);
  if (n.op != Op::maxpool_points) throw InvalidInput("argmax: node is not a max-pool");
  return n.sel_a;
}

void Tape::accumulate(std::size_t id, const Matrix& delta) {
  Node& n = nodes_[id];
  if (!n.needs_grad) return;
  if (n.adjoint.size() == 0) {
    n.adjoint = delta;
  } else {
    n.adjoint += delta;
  }
}

void Tape::backward(Var root) {
  if (at(root).value.size() != 1) throw ShapeMismatch("backward: root must be a scalar node");
  for (auto& n : nodes_) n.adjoint.resize(0, 0);
  if (!nodes_[root.id].needs_grad) return;
  nodes_[root.id].adjoint = scalar_matrix(1.0);

  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.adjoint.size() == 0 || n.op == Op::leaf) continue;
    const Matrix& g = n.adjoint;
    switch (n.op) {
      case Op::leaf:
        break;
      case Op::affine: {
        const Matrix& x = nodes_[n.a].value;
        const Matrix& w = nodes_[n.b].value;
        if (nodes_[n.a].needs_grad) accumulate(n.a, g * w.transpose());
        if (nodes_[n.b].needs_grad) accumulate(n.b, x.transpose() * g);
        if (nodes_[n.c].needs_grad) accumulate(n.c, g.colwise().sum());
        break;
      }
      case Op::relu: {
        const Matrix& x = nodes_[n.a].value;
        accumulate(n.a, (x.array() > 0.0).select(g, 0.0));
        break;
      }
      case Op::maxpool_points: {
        const Matrix& x = nodes_[n.a].value;
        Matrix d = Matrix::Zero(x.rows(), x.cols());
        for (Index j = 0; j < x.cols(); ++j) d(n.sel_a[j], j) = g(0, j);
        accumulate(n.a, d);
        break;
      }
      case Op::add:
        accumulate(n.a, g);
        accumulate(n.b, g);
        break;
      case Op::sub:
        accumulate(n.a, g);
        accumulate(n.b, -g);
        break;
      case Op::scale:
        accumulate(n.a, n.factor * g);
        break;
      case Op::l2_norm: {
        const Matrix& v = nodes_[n.a].value;
        const double norm = n.value(0, 0);
        // Subgradient 0 at the origin.
        accumulate(n.a, norm > 0.0 ? Matrix((g(0, 0) / norm) * v) : Matrix::Zero(v.rows(), v.cols()));
        break;
      }
      case Op::chamfer: {
        const Matrix& x = nodes_[n.a].value;
        const Matrix& y = nodes_[n.b].value;
        Matrix dx = Matrix::Zero(x.rows(), 3);
        Matrix dy = Matrix::Zero(y.rows(), 3);
        const double cx = 2.0 * g(0, 0) / static_cast<double>(x.rows());
        const double cy = 2.0 * g(0, 0) / static_cast<double>(y.rows());
        for (Index i = 0; i < x.rows(); ++i) {
          const Index j = n.sel_a[i];
          const Eigen::RowVector3d diff = cx * (x.row(i) - y.row(j));
          dx.row(i) += diff;
          dy.row(j) -= diff;
        }
        for (Index j = 0; j < y.rows(); ++j) {
          const Index i = n.sel_b[j];
          const Eigen::RowVector3d diff = cy * (y.row(j) - x.row(i));
          dy.row(j) += diff;
          dx.row(i) -= diff;
        }
        accumulate(n.a, dx);
        accumulate(n.b, dy);
        break;
      }
      case Op::mean: {
        const Matrix& x = nodes_[n.a].value;
        accumulate(n.a, Matrix::Constant(x.rows(), x.cols(), g(0, 0) / static_cast<double>(x.size())));
        break;
      }
      case Op::to_points: {
        const Index count = n.value.rows();
        Matrix d(1, 3 * count);
        for (Index i = 0; i < count; ++i) {
          for (Index c = 0; c < 3; ++c) d(0, 3 * i + c) = g(i, c);
        }
        accumulate(n.a, d);
        break;
      }
      case Op::softmax_cross_entropy: {
        const Matrix& z = nodes_[n.a].value;
        const double top = z.maxCoeff();
        Matrix p = (z.array() - top).exp().matrix();
        p /= p.sum();
        p(0, n.label) -= 1.0;
        accumulate(n.a, g(0, 0) * p);
        break;
      }
      case Op::max_nearest_squared: {
        const Matrix& x = nodes_[n.a].value;
        const Matrix& y = nodes_[n.b].value;
        const Index i = n.sel_a[0], j = n.sel_a[1];
        const Eigen::RowVector3d diff = 2.0 * g(0, 0) * (x.row(i) - y.row(j));
        Matrix dx = Matrix::Zero(x.rows(), 3);
        Matrix dy = Matrix::Zero(y.rows(), 3);
        dx.row(i) = diff;
        dy.row(j) = -diff;
        accumulate(n.a, dx);
        accumulate(n.b, dy);
        break;
      }
    }
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = at(v);
  if (n.adjoint.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.adjoint;
}

std::uint64_t Tape::branch_signature() const {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](std::uint64_t v) {
    h ^= v;
    h *= 1099511628211ULL;
  };
  for (const auto& n : nodes_) {
    switch (n.op) {
      case Op::relu: {
        const Matrix& x = nodes_[n.a].value;
        for (Index i = 0; i < x.size(); ++i) mix(x.data()[i] > 0.0 ? 1 : 2);
        break;
      }
      case Op::maxpool_points:
      case Op::chamfer:
      case Op::max_nearest_squared:
        for (Index s : n.sel_a) mix(static_cast<std::uint64_t>(s) + 3);
        for (Index s : n.sel_b) mix(static_cast<std::uint64_t>(s) + 7);
        break;
      default:
        break;
    }
  }
  return h;
}

}  // namespace pcadv::ad
