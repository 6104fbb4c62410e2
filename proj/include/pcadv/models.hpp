#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "pcadv/autodiff.hpp"
#include "pcadv/pointcloud.hpp"
#include "pcadv/types.hpp"

namespace pcadv {

/// y = x * weight + bias, weight is fan_in x fan_out, bias 1 x fan_out.
struct DenseLayer {
  Matrix weight;
  Matrix bias;
};

/// Glorot-uniform weights, zero bias.
DenseLayer init_dense(Index fan_in, Index fan_out, std::mt19937_64& rng);

struct AEConfig {
  double width_factor = 0.25;
  Index latent = 32;   // m
  Index points = 256;  // n, decoder output size
  Seed seed = 1;       // weight init
};

/// Per-point layer widths; the last is the latent width m.
std::vector<Index> encoder_widths(const AEConfig& config);
/// Fully connected widths; the last is 3n.
std::vector<Index> decoder_widths(const AEConfig& config);

/// PointNet-style autoencoder: per-point relu layers, global max-pool,
/// fully connected decoder emitting n points.
class AEModel {
 public:
  explicit AEModel(const AEConfig& config);
  AEModel(const AEConfig& config, std::vector<DenseLayer> encoder, std::vector<DenseLayer> decoder);

  const AEConfig& config() const noexcept { return config_; }
  Index latent_dim() const noexcept { return config_.latent; }
  Index num_points() const noexcept { return config_.points; }

  const std::vector<DenseLayer>& encoder() const noexcept { return encoder_; }
  const std::vector<DenseLayer>& decoder() const noexcept { return decoder_; }

  bool frozen() const noexcept { return frozen_; }
  void freeze() noexcept { frozen_ = true; }

  /// Mutable views of every parameter array (encoder first). Throws when frozen.
  std::vector<Matrix*> mutable_parameters();
  std::vector<const Matrix*> parameters() const;

 private:
  void validate() const;

  AEConfig config_;
  std::vector<DenseLayer> encoder_;
  std::vector<DenseLayer> decoder_;
  bool frozen_ = false;
};

struct Encoding {
  Vector latent;
  /// critical_ids[j] is the first point attaining the max of feature j.
  std::vector<Index> critical_ids;
};

Encoding encode(const AEModel& model, const Points& cloud);
Points decode(const AEModel& model, const Vector& latent);
Points reconstruct(const AEModel& model, const Points& cloud);
inline Encoding encode(const AEModel& model, const PointCloud& c) { return encode(model, c.points()); }
inline Points reconstruct(const AEModel& model, const PointCloud& c) { return reconstruct(model, c.points()); }

/// Sorted distinct critical point ids.
std::vector<Index> unique_critical_ids(const Encoding& encoding);

/// FNV-1a over the raw parameter bytes.
std::uint64_t parameter_hash(const std::vector<const Matrix*>& params);
inline std::uint64_t parameter_hash(const AEModel& model) { return parameter_hash(model.parameters()); }

struct ClassifierConfig {
  std::vector<Index> point_widths{32, 64, 128};
  std::vector<Index> head_widths{64};
  int num_classes = 4;
  Seed seed = 1;
};

/// Reduced PointNet classifier: per-point relu layers, max-pool, dense head.
class Classifier {
 public:
  explicit Classifier(const ClassifierConfig& config);
  Classifier(const ClassifierConfig& config, std::vector<DenseLayer> point_layers, std::vector<DenseLayer> head);

  const ClassifierConfig& config() const noexcept { return config_; }
  int num_classes() const noexcept { return config_.num_classes; }
  const std::vector<DenseLayer>& point_layers() const noexcept { return point_layers_; }
  const std::vector<DenseLayer>& head() const noexcept { return head_; }

  std::vector<Matrix*> mutable_parameters();
  std::vector<const Matrix*> parameters() const;

 private:
  void validate() const;

  ClassifierConfig config_;
  std::vector<DenseLayer> point_layers_;
  std::vector<DenseLayer> head_;
};

/// 1 x C logits.
Matrix classify(const Classifier& classifier, const Points& cloud);
/// Argmax of the logits, ties to the lower class id.
int predict(const Classifier& classifier, const Points& cloud);

/// Tape bindings. Parameters enter the tape as variables (training) or
/// constants (attacks, where only the input receives a gradient).
struct LayerVars {
  ad::Var weight;
  ad::Var bias;
};

std::vector<LayerVars> bind_layers(ad::Tape& tape, const std::vector<DenseLayer>& layers, bool trainable);

struct BoundAE {
  std::vector<LayerVars> encoder;
  std::vector<LayerVars> decoder;
};
BoundAE bind(ad::Tape& tape, const AEModel& model, bool trainable);

/// Returns the 1 x m pooled latent node.
ad::Var encode_on_tape(ad::Tape& tape, const BoundAE& ae, ad::Var points);
/// Returns the n x 3 reconstruction node.
ad::Var decode_on_tape(ad::Tape& tape, const BoundAE& ae, ad::Var latent);

struct BoundClassifier {
  std::vector<LayerVars> point_layers;
  std::vector<LayerVars> head;
};
BoundClassifier bind(ad::Tape& tape, const Classifier& classifier, bool trainable);
ad::Var logits_on_tape(ad::Tape& tape, const BoundClassifier& c, ad::Var points);

}  // namespace pcadv
