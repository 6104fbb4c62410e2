#include "pcadv/metrics.hpp"

#include <cmath>

#include "pcadv/models.hpp"
#include "pcadv/neighbor_index.hpp"

namespace pcadv {

namespace {

void require_non_empty(const Points& x, const Points& y, const char* what) {
  if (x.rows() < 1 || y.rows() < 1) throw InvalidInput(std::string(what) + ": empty point cloud");
}

double mean_of(const std::vector<double>& v) {
  double sum = 0.0;
  for (double d : v) sum += d;
  return sum / static_cast<double>(v.size());
}

}  // namespace

std::vector<double> nearest_squared(const Points& x, const Points& y) {
  require_non_empty(x, y, "nearest_squared");
  const NeighborIndex index(y);
  std::vector<double> out(static_cast<std::size_t>(x.rows()));
  for (Index i = 0; i < x.rows(); ++i) out[i] = index.nearest(&x(i, 0)).second;
  return out;
}

ChamferTerms chamfer_terms(const Points& x, const Points& y) {
  require_non_empty(x, y, "chamfer");
  ChamferTerms t;
  const NeighborIndex y_index(y);
  const NeighborIndex x_index(x);
  t.x_to_y.resize(static_cast<std::size_t>(x.rows()));
  t.x_sq.resize(t.x_to_y.size());
  for (Index i = 0; i < x.rows(); ++i) {
    std::tie(t.x_to_y[i], t.x_sq[i]) = y_index.nearest(&x(i, 0));
  }
  t.y_to_x.resize(static_cast<std::size_t>(y.rows()));
  t.y_sq.resize(t.y_to_x.size());
  for (Index j = 0; j < y.rows(); ++j) {
    std::tie(t.y_to_x[j], t.y_sq[j]) = x_index.nearest(&y(j, 0));
  }
  t.x_term = mean_of(t.x_sq);
  t.y_term = mean_of(t.y_sq);
  t.value = t.x_term + t.y_term;
  return t;
}

double chamfer(const Points& x, const Points& y) { return chamfer_terms(x, y).value; }

OffSurface os_count(const Points& q, const Points& s, double gamma) {
  require_non_empty(q, s, "os_count");
  const NeighborIndex index(s);
  OffSurface out;
  for (Index i = 0; i < q.rows(); ++i) {
    if (std::sqrt(index.nearest(&q(i, 0)).second) > gamma) out.ids.push_back(i);
  }
  out.count = static_cast<Index>(out.ids.size());
  return out;
}

double reconstruction_error(const AEModel& model, const Points& x) { return chamfer(reconstruct(model, x), x); }

double t_nre_with(double t_re, double target_self_error) {
  if (!(target_self_error > 0.0)) {
    throw NumericError("T-NRE undefined: the model reconstructs the target perfectly (CD(T_hat, T) = 0)");
  }
  return t_re / target_self_error;
}

double t_nre(const AEModel& model, const Points& q, const Points& t) {
  return t_nre_with(chamfer(reconstruct(model, q), t), reconstruction_error(model, t));
}

double s_nre_with(double s_re, double source_self_error) {
  if (!(source_self_error > 0.0)) {
    throw NumericError("S-NRE undefined: the model reconstructs the source perfectly (CD(S_hat, S) = 0)");
  }
  return s_re / source_self_error;
}

double s_nre(const AEModel& model, const Points& x, const Points& s) {
  return s_nre_with(chamfer(reconstruct(model, x), s), reconstruction_error(model, s));
}

SemanticReport semantic_eval(const std::vector<int>& predicted, const std::vector<int>& source_labels,
                             const std::vector<int>& target_labels, int num_classes) {
  if (predicted.size() != source_labels.size() || predicted.size() != target_labels.size()) {
    throw ShapeMismatch("semantic_eval: label vectors differ in length");
  }
  auto check = [&](int label) {
    if (label < 0 || label >= num_classes) {
      throw InvalidInput("semantic_eval: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(num_classes) + ")");
    }
  };
  SemanticReport rep;
  rep.count = static_cast<Index>(predicted.size());
  rep.confusion = Matrix::Zero(num_classes, num_classes);
  if (predicted.empty()) return rep;

  Index hits = 0, avoids = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    check(predicted[i]);
    check(source_labels[i]);
    check(target_labels[i]);
    if (predicted[i] == target_labels[i]) ++hits;
    if (predicted[i] != source_labels[i]) ++avoids;
    rep.confusion(target_labels[i], predicted[i]) += 1.0;
  }
  for (Index r = 0; r < num_classes; ++r) {
    const double total = rep.confusion.row(r).sum();
    if (total > 0.0) rep.confusion.row(r) /= total;
  }
  rep.hit_target = static_cast<double>(hits) / static_cast<double>(rep.count);
  rep.avoid_source = static_cast<double>(avoids) / static_cast<double>(rep.count);
  return rep;
}

SemanticReport semantic_eval(const Classifier& classifier, const std::vector<Points>& reconstructions,
                             const std::vector<int>& source_labels, const std::vector<int>& target_labels) {
  std::vector<int> predicted;
  predicted.reserve(reconstructions.size());
  for (const auto& r : reconstructions) predicted.push_back(predict(classifier, r));
  return semantic_eval(predicted, source_labels, target_labels, classifier.num_classes());
}

}  // namespace pcadv
