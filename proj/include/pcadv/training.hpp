#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "pcadv/error.hpp"
#include "pcadv/models.hpp"
#include "pcadv/pointcloud.hpp"

namespace pcadv {

/// beta1 is the "momentum" of the optimizer; beta2 and eps are the usual defaults.
struct AdamOptions {
  double lr = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamState {
 public:
  explicit AdamState(AdamOptions options = {}) : options_(options) {}

  const AdamOptions& options() const noexcept { return options_; }
  long long step_count() const noexcept { return step_; }
  const std::vector<Matrix>& first_moments() const noexcept { return m_; }
  const std::vector<Matrix>& second_moments() const noexcept { return v_; }

  /// One bias-corrected Adam update of `params` in place.
  void step(std::span<Matrix* const> params, std::span<const Matrix> grads);

 private:
  AdamOptions options_;
  long long step_ = 0;
  std::vector<Matrix> m_;
  std::vector<Matrix> v_;
};

inline void adam_step(AdamState& state, std::span<Matrix* const> params, std::span<const Matrix> grads) {
  state.step(params, grads);
}

struct DatasetSpec {
  int num_classes = 4;  // uses shape classes 0..C-1
  Index per_class = 200;
  Index points = 256;
  Seed seed = 1;
  double train_fraction = 0.85;
  double validation_fraction = 0.05;
  double test_fraction = 0.10;
};

struct Instance {
  Index id = 0;
  PointCloud cloud;
  int label() const { return cloud.label().value_or(-1); }
};

struct Dataset {
  int num_classes = 0;
  std::vector<Instance> train;
  std::vector<Instance> validation;
  std::vector<Instance> test;
};

/// Deterministic synthetic dataset, split per class.
Dataset make_dataset(const DatasetSpec& spec);

struct TrainConfig {
  Index epochs = 100;
  Index batch_size = 25;
  double lr = 0.0005;
  Seed seed = 1;  // shuffling
  unsigned threads = 1;
};

struct AETrainReport {
  /// Mean validation Chamfer distance; entry 0 is before the first epoch.
  std::vector<double> validation_cd;
  std::vector<double> train_loss;
  std::vector<std::string> warnings;
};

struct ClassifierTrainReport {
  std::vector<double> train_loss;
  std::vector<double> validation_accuracy;
  double test_accuracy = 0.0;
  std::vector<std::string> warnings;
};

/// Training produced a non-finite loss; carries the trace so far.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(const std::string& what, std::vector<double> trace)
      : Error(what), trace_(std::move(trace)) {}
  const std::vector<double>& trace() const noexcept { return trace_; }

 private:
  std::vector<double> trace_;
};

using EpochCallback = std::function<void(Index epoch, double train_loss, double validation_metric)>;

/// Minimizes the Chamfer reconstruction loss; freezes the model afterwards.
AETrainReport train_ae(AEModel& model, const Dataset& data, const TrainConfig& config,
                       const EpochCallback& on_epoch = {});

/// Cross-entropy training; reports held-out accuracy on `data.test`.
ClassifierTrainReport train_classifier(Classifier& classifier, const Dataset& data, const TrainConfig& config,
                                       const EpochCallback& on_epoch = {});

double mean_reconstruction_error(const AEModel& model, const std::vector<Instance>& instances);
double accuracy(const Classifier& classifier, const std::vector<Instance>& instances);

struct TransferTraining {
  AEModel model;
  AETrainReport report;
};

/// Same architecture and data as the victim, different initialization seed.
TransferTraining train_transfer_ae(const AEConfig& victim, Seed transfer_seed, const Dataset& data,
                                   const TrainConfig& config, const EpochCallback& on_epoch = {});

}  // namespace pcadv
