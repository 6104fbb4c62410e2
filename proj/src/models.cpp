#include "pcadv/models.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "pcadv/error.hpp"

namespace pcadv {

namespace {

Index scaled(Index width, double factor) {
  return std::max<Index>(1, static_cast<Index>(std::lround(static_cast<double>(width) * factor)));
}

std::vector<DenseLayer> init_stack(Index fan_in, const std::vector<Index>& widths, std::mt19937_64& rng) {
  std::vector<DenseLayer> layers;
  for (Index w : widths) {
    layers.push_back(init_dense(fan_in, w, rng));
    fan_in = w;
  }
  return layers;
}

void validate_stack(const std::vector<DenseLayer>& layers, Index fan_in, const std::vector<Index>& widths,
                    const char* what) {
  if (layers.size() != widths.size()) throw ShapeMismatch(std::string(what) + ": layer count mismatch");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    if (l.weight.rows() != fan_in || l.weight.cols() != widths[i] || l.bias.rows() != 1 ||
        l.bias.cols() != widths[i]) {
      throw ShapeMismatch(std::string(what) + ": layer " + std::to_string(i) + " has unexpected shape");
    }
    if (!l.weight.allFinite() || !l.bias.allFinite()) {
      throw NumericError(std::string(what) + ": non-finite parameter in layer " + std::to_string(i));
    }
    fan_in = widths[i];
  }
}

/// Applies the stack; relu after every layer unless `linear_last`.
Matrix run_stack(const std::vector<DenseLayer>& layers, Matrix x, bool linear_last) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = ad::ops::affine(x, layers[i].weight, layers[i].bias);
    if (!(linear_last && i + 1 == layers.size())) x = ad::ops::relu(x);
  }
  return x;
}

ad::Var run_stack(ad::Tape& tape, const std::vector<LayerVars>& layers, ad::Var x, bool linear_last) {
  for (std::size_t i = 0; i < layers.size(); ++i) {
    x = tape.affine(x, layers[i].weight, layers[i].bias);
    if (!(linear_last && i + 1 == layers.size())) x = tape.relu(x);
  }
  return x;
}

void check_finite(const Matrix& m, const char* stage) {
  if (!m.allFinite()) throw NumericError(std::string("non-finite activation in ") + stage);
}

void collect(std::vector<DenseLayer>& layers, std::vector<Matrix*>& out) {
  for (auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

void collect(const std::vector<DenseLayer>& layers, std::vector<const Matrix*>& out) {
  for (const auto& l : layers) {
    out.push_back(&l.weight);
    out.push_back(&l.bias);
  }
}

}  // namespace

DenseLayer init_dense(Index fan_in, Index fan_out, std::mt19937_64& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer layer{Matrix(fan_in, fan_out), Matrix::Zero(1, fan_out)};
  for (Index i = 0; i < fan_in; ++i) {
    for (Index j = 0; j < fan_out; ++j) layer.weight(i, j) = dist(rng);
  }
  return layer;
}

std::vector<Index> encoder_widths(const AEConfig& c) {
  return {scaled(64, c.width_factor), scaled(128, c.width_factor), scaled(128, c.width_factor),
          scaled(256, c.width_factor), c.latent};
}

std::vector<Index> decoder_widths(const AEConfig& c) {
  return {scaled(256, c.width_factor), scaled(256, c.width_factor), 3 * c.points};
}

AEModel::AEModel(const AEConfig& config) : config_(config) {
  if (config.latent < 1 || config.points < 1 || !(config.width_factor > 0.0)) {
    throw InvalidInput("AEModel: latent, points and width factor must be positive");
  }
  std::mt19937_64 rng(config.seed);
  encoder_ = init_stack(3, encoder_widths(config), rng);
  decoder_ = init_stack(config.latent, decoder_widths(config), rng);
}

AEModel::AEModel(const AEConfig& config, std::vector<DenseLayer> encoder, std::vector<DenseLayer> decoder)
    : config_(config), encoder_(std::move(encoder)), decoder_(std::move(decoder)) {
  validate();
}

void AEModel::validate() const {
  validate_stack(encoder_, 3, encoder_widths(config_), "encoder");
  validate_stack(decoder_, config_.latent, decoder_widths(config_), "decoder");
}

std::vector<Matrix*> AEModel::mutable_parameters() {
  if (frozen_) throw InvalidInput("model is frozen; its parameters cannot be modified");
  std::vector<Matrix*> out;
  collect(encoder_, out);
  collect(decoder_, out);
  return out;
}

std::vector<const Matrix*> AEModel::parameters() const {
  std::vector<const Matrix*> out;
  collect(encoder_, out);
  collect(decoder_, out);
  return out;
}

Encoding encode(const AEModel& model, const Points& cloud) {
  if (cloud.rows() < 1) throw InvalidInput("encode: empty point cloud");
  const Matrix features = run_stack(model.encoder(), Matrix(cloud), false);
  check_finite(features, "encoder");
  Encoding e;
  e.latent = ad::ops::maxpool_points(features, &e.critical_ids).transpose();
  return e;
}

Points decode(const AEModel& model, const Vector& latent) {
  if (latent.size() != model.latent_dim()) {
    throw ShapeMismatch("decode: latent has " + std::to_string(latent.size()) + " entries, model expects " +
                        std::to_string(model.latent_dim()));
  }
  const Matrix flat = run_stack(model.decoder(), Matrix(latent.transpose()), true);
  check_finite(flat, "decoder");
  return Points(ad::ops::to_points(flat));
}

Points reconstruct(const AEModel& model, const Points& cloud) { return decode(model, encode(model, cloud).latent); }

std::vector<Index> unique_critical_ids(const Encoding& encoding) {
  std::vector<Index> ids = encoding.critical_ids;
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  return ids;
}

std::uint64_t parameter_hash(const std::vector<const Matrix*>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const Matrix* m : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m->size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  }
  return h;
}

Classifier::Classifier(const ClassifierConfig& config) : config_(config) {
  if (config.num_classes < 1) throw InvalidInput("Classifier: need at least one class");
  std::mt19937_64 rng(config.seed);
  point_layers_ = init_stack(3, config.point_widths, rng);
  std::vector<Index> head = config.head_widths;
  head.push_back(config.num_classes);
  head_ = init_stack(config.point_widths.back(), head, rng);
}

Classifier::Classifier(const ClassifierConfig& config, std::vector<DenseLayer> point_layers,
                       std::vector<DenseLayer> head)
    : config_(config), point_layers_(std::move(point_layers)), head_(std::move(head)) {
  validate();
}

void Classifier::validate() const {
  if (config_.point_widths.empty()) throw ShapeMismatch("classifier: no per-point layers");
  validate_stack(point_layers_, 3, config_.point_widths, "classifier point layers");
  std::vector<Index> head = config_.head_widths;
  head.push_back(config_.num_classes);
  validate_stack(head_, config_.point_widths.back(), head, "classifier head");
}

std::vector<Matrix*> Classifier::mutable_parameters() {
  std::vector<Matrix*> out;
  collect(point_layers_, out);
  collect(head_, out);
  return out;
}

std::vector<const Matrix*> Classifier::parameters() const {
  std::vector<const Matrix*> out;
  collect(point_layers_, out);
  collect(head_, out);
  return out;
}

Matrix classify(const Classifier& classifier, const Points& cloud) {
  if (cloud.rows() < 1) throw InvalidInput("classify: empty point cloud");
  const Matrix features = run_stack(classifier.point_layers(), Matrix(cloud), false);
  const Matrix logits = run_stack(classifier.head(), ad::ops::maxpool_points(features), true);
  check_finite(logits, "classifier");
  return logits;
}

int predict(const Classifier& classifier, const Points& cloud) {
  const Matrix logits = classify(classifier, cloud);
  Index best = 0;
  for (Index j = 1; j < logits.cols(); ++j) {
    if (logits(0, j) > logits(0, best)) best = j;
  }
  return static_cast<int>(best);
}

std::vector<LayerVars> bind_layers(ad::Tape& tape, const std::vector<DenseLayer>& layers, bool trainable) {
  std::vector<LayerVars> out;
  out.reserve(layers.size());
  for (const auto& l : layers) {
    if (trainable) {
      out.push_back({tape.variable(l.weight), tape.variable(l.bias)});
    } else {
      out.push_back({tape.constant(l.weight), tape.constant(l.bias)});
    }
  }
  return out;
}

BoundAE bind(ad::Tape& tape, const AEModel& model, bool trainable) {
  return {bind_layers(tape, model.encoder(), trainable), bind_layers(tape, model.decoder(), trainable)};
}

ad::Var encode_on_tape(ad::Tape& tape, const BoundAE& ae, ad::Var points) {
  return tape.maxpool_points(run_stack(tape, ae.encoder, points, false));
}

ad::Var decode_on_tape(ad::Tape& tape, const BoundAE& ae, ad::Var latent) {
  return tape.to_points(run_stack(tape, ae.decoder, latent, true));
}

BoundClassifier bind(ad::Tape& tape, const Classifier& classifier, bool trainable) {
  return {bind_layers(tape, classifier.point_layers(), trainable), bind_layers(tape, classifier.head(), trainable)};
}

ad::Var logits_on_tape(ad::Tape& tape, const BoundClassifier& c, ad::Var points) {
  return run_stack(tape, c.head, tape.maxpool_points(run_stack(tape, c.point_layers, points, false)), true);
}

}  // namespace pcadv
