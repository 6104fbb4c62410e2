#include "pcadv/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "pcadv/metrics.hpp"
#include "pcadv/parallel.hpp"

namespace pcadv {

void AdamState::step(std::span<Matrix* const> params, std::span<const Matrix> grads) {
  if (params.size() != grads.size()) throw ShapeMismatch("adam_step: parameter and gradient counts differ");
  if (m_.empty()) {
    for (const Matrix* p : params) {
      m_.push_back(Matrix::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix::Zero(p->rows(), p->cols()));
    }
  }
  if (m_.size() != params.size()) throw ShapeMismatch("adam_step: parameter count changed between steps");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->rows() != grads[i].rows() || params[i]->cols() != grads[i].cols() ||
        m_[i].rows() != grads[i].rows() || m_[i].cols() != grads[i].cols()) {
      throw ShapeMismatch("adam_step: shape mismatch for parameter " + std::to_string(i));
    }
  }

  ++step_;
  const double b1 = options_.beta1, b2 = options_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
    params[i]->array() -= options_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + options_.eps);
  }
}

namespace {

std::uint64_t mix_seed(Seed seed, std::uint64_t a, std::uint64_t b) {
  std::uint64_t h = seed * 0x9e3779b97f4a7c15ULL + 0x632be59bd9b4e019ULL;
  h ^= a + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  h ^= b + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

void check_config(const TrainConfig& config) {
  if (config.epochs < 1 || config.batch_size < 1 || !(config.lr > 0.0)) {
    throw ConfigError("training: epochs, batch size and learning rate must be positive");
  }
}

/// Mean of per-sample gradients over `batch`, summed in batch order.
template <typename SampleGrad>
double batch_gradient(const std::vector<Index>& batch, unsigned threads, std::size_t param_count,
                      SampleGrad&& sample_grad, std::vector<Matrix>& mean_grad) {
  std::vector<std::vector<Matrix>> per_sample(batch.size());
  std::vector<double> losses(batch.size());
  parallel_for(static_cast<Index>(batch.size()), threads,
               [&](Index i) { losses[i] = sample_grad(batch[i], per_sample[i]); });

  const double inv = 1.0 / static_cast<double>(batch.size());
  mean_grad.resize(param_count);
  double loss = 0.0;
  for (std::size_t s = 0; s < batch.size(); ++s) {
    loss += losses[s];
    for (std::size_t p = 0; p < param_count; ++p) {
      if (s == 0) {
        mean_grad[p] = per_sample[s][p];
      } else {
        mean_grad[p] += per_sample[s][p];
      }
    }
  }
  for (auto& g : mean_grad) g *= inv;
  return loss * inv;
}

template <typename Fn>
void for_each_batch(Index count, Index batch_size, std::mt19937_64& rng, Fn&& fn) {
  std::vector<Index> order(static_cast<std::size_t>(count));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (Index start = 0; start < count; start += batch_size) {
    const Index end = std::min(count, start + batch_size);
    fn(std::vector<Index>(order.begin() + start, order.begin() + end));
  }
}

}  // namespace

Dataset make_dataset(const DatasetSpec& spec) {
  const int available = static_cast<int>(shape_classes().size());
  if (spec.num_classes < 1 || spec.num_classes > available) {
    throw ConfigError("dataset: num_classes must lie in [1, " + std::to_string(available) + "]");
  }
  if (spec.per_class < 1 || spec.points < 8) throw ConfigError("dataset: per_class >= 1 and points >= 8 required");
  const double total = spec.train_fraction + spec.validation_fraction + spec.test_fraction;
  if (std::abs(total - 1.0) > 1e-9 || spec.train_fraction <= 0.0 || spec.validation_fraction < 0.0 ||
      spec.test_fraction < 0.0) {
    throw ConfigError("dataset: split fractions must be non-negative, train positive, and sum to 1");
  }

  const auto n_train = static_cast<Index>(std::lround(static_cast<double>(spec.per_class) * spec.train_fraction));
  const auto n_val = static_cast<Index>(std::lround(static_cast<double>(spec.per_class) * spec.validation_fraction));
  if (n_train < 1 || n_train + n_val > spec.per_class) throw ConfigError("dataset: split leaves no training data");

  Dataset d;
  d.num_classes = spec.num_classes;
  Index id = 0;
  for (int c = 0; c < spec.num_classes; ++c) {
    for (Index i = 0; i < spec.per_class; ++i, ++id) {
      Instance inst{id, generate_shape(c, spec.points, mix_seed(spec.seed, static_cast<std::uint64_t>(c),
                                                                static_cast<std::uint64_t>(i)))};
      if (i < n_train) {
        d.train.push_back(std::move(inst));
      } else if (i < n_train + n_val) {
        d.validation.push_back(std::move(inst));
      } else {
        d.test.push_back(std::move(inst));
      }
    }
  }
  return d;
}

double mean_reconstruction_error(const AEModel& model, const std::vector<Instance>& instances) {
  if (instances.empty()) throw ConfigError("mean_reconstruction_error: empty split");
  double sum = 0.0;
  for (const auto& inst : instances) sum += reconstruction_error(model, inst.cloud.points());
  return sum / static_cast<double>(instances.size());
}

double accuracy(const Classifier& classifier, const std::vector<Instance>& instances) {
  if (instances.empty()) throw ConfigError("accuracy: empty split");
  Index correct = 0;
  for (const auto& inst : instances) {
    if (predict(classifier, inst.cloud.points()) == inst.label()) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(instances.size());
}

AETrainReport train_ae(AEModel& model, const Dataset& data, const TrainConfig& config, const EpochCallback& on_epoch) {
  if (model.frozen()) throw InvalidInput("train_ae: model is frozen");
  check_config(config);
  if (data.train.empty() || data.validation.empty()) {
    throw ConfigError("train_ae: training and validation splits must be non-empty");
  }
  for (const auto& inst : data.train) {
    if (inst.cloud.size() != model.num_points()) {
      throw ShapeMismatch("train_ae: dataset clouds have " + std::to_string(inst.cloud.size()) +
                          " points, model emits " + std::to_string(model.num_points()));
    }
  }

  AETrainReport report;
  report.validation_cd.push_back(mean_reconstruction_error(model, data.validation));

  std::vector<Matrix*> params = model.mutable_parameters();
  AdamState adam({config.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(config.seed);
  std::vector<Matrix> grad;

  auto sample_grad = [&](Index idx, std::vector<Matrix>& out) {
    ad::Tape tape;
    const BoundAE bound = bind(tape, model, true);
    const ad::Var input = tape.constant(Matrix(data.train[idx].cloud.points()));
    const ad::Var recon = decode_on_tape(tape, bound, encode_on_tape(tape, bound, input));
    const ad::Var loss = tape.chamfer(recon, input);
    tape.backward(loss);
    out.clear();
    for (const auto* layers : {&bound.encoder, &bound.decoder}) {
      for (const auto& l : *layers) {
        out.push_back(tape.grad(l.weight));
        out.push_back(tape.grad(l.bias));
      }
    }
    return tape.scalar(loss);
  };

  for (Index epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    Index batches = 0;
    try {
      for_each_batch(static_cast<Index>(data.train.size()), config.batch_size, rng, [&](std::vector<Index> batch) {
        epoch_loss += batch_gradient(batch, config.threads, params.size(), sample_grad, grad);
        ++batches;
        adam.step(params, grad);
      });
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("train_ae diverged at epoch ") + std::to_string(epoch) + ": " + e.what(),
                             report.validation_cd);
    }
    epoch_loss /= static_cast<double>(batches);
    const double val = mean_reconstruction_error(model, data.validation);
    if (!std::isfinite(epoch_loss) || !std::isfinite(val)) {
      throw TrainingDiverged("train_ae diverged at epoch " + std::to_string(epoch), report.validation_cd);
    }
    report.train_loss.push_back(epoch_loss);
    report.validation_cd.push_back(val);
    if (on_epoch) on_epoch(epoch, epoch_loss, val);
  }
  model.freeze();
  return report;
}

ClassifierTrainReport train_classifier(Classifier& classifier, const Dataset& data, const TrainConfig& config,
                                       const EpochCallback& on_epoch) {
  check_config(config);
  if (data.train.empty()) throw ConfigError("train_classifier: empty training split");
  if (data.test.empty()) throw ConfigError("train_classifier: empty test split; held-out accuracy is undefined");

  ClassifierTrainReport report;
  std::set<int> labels;
  for (const auto& inst : data.train) {
    if (inst.label() < 0 || inst.label() >= classifier.num_classes()) {
      throw InvalidInput("train_classifier: label " + std::to_string(inst.label()) + " outside [0, " +
                         std::to_string(classifier.num_classes()) + ")");
    }
    labels.insert(inst.label());
  }
  if (labels.size() == 1) {
    report.warnings.push_back("training data holds a single class; accuracy is trivially 100%");
  }

  std::vector<Matrix*> params = classifier.mutable_parameters();
  AdamState adam({config.lr, 0.9, 0.999, 1e-8});
  std::mt19937_64 rng(config.seed);
  std::vector<Matrix> grad;

  auto sample_grad = [&](Index idx, std::vector<Matrix>& out) {
    ad::Tape tape;
    const BoundClassifier bound = bind(tape, classifier, true);
    const ad::Var input = tape.constant(Matrix(data.train[idx].cloud.points()));
    const ad::Var loss = tape.softmax_cross_entropy(logits_on_tape(tape, bound, input), data.train[idx].label());
    tape.backward(loss);
    out.clear();
    for (const auto* layers : {&bound.point_layers, &bound.head}) {
      for (const auto& l : *layers) {
        out.push_back(tape.grad(l.weight));
        out.push_back(tape.grad(l.bias));
      }
    }
    return tape.scalar(loss);
  };

  for (Index epoch = 1; epoch <= config.epochs; ++epoch) {
    double epoch_loss = 0.0;
    Index batches = 0;
    try {
      for_each_batch(static_cast<Index>(data.train.size()), config.batch_size, rng, [&](std::vector<Index> batch) {
        epoch_loss += batch_gradient(batch, config.threads, params.size(), sample_grad, grad);
        ++batches;
        adam.step(params, grad);
      });
    } catch (const NumericError& e) {
      throw TrainingDiverged(std::string("train_classifier diverged at epoch ") + std::to_string(epoch) + ": " +
                                 e.what(),
                             report.train_loss);
    }
    epoch_loss /= static_cast<double>(batches);
    if (!std::isfinite(epoch_loss)) {
      throw TrainingDiverged("train_classifier diverged at epoch " + std::to_string(epoch), report.train_loss);
    }
    report.train_loss.push_back(epoch_loss);
    const double val = data.validation.empty() ? accuracy(classifier, data.train) : accuracy(classifier, data.validation);
    report.validation_accuracy.push_back(val);
    if (on_epoch) on_epoch(epoch, epoch_loss, val);
  }
  report.test_accuracy = accuracy(classifier, data.test);
  return report;
}

TransferTraining train_transfer_ae(const AEConfig& victim, Seed transfer_seed, const Dataset& data,
                                   const TrainConfig& config, const EpochCallback& on_epoch) {
  AEConfig cfg = victim;
  cfg.seed = transfer_seed;
  AEModel model(cfg);
  AETrainReport report = train_ae(model, data, config, on_epoch);
  if (transfer_seed == victim.seed) {
    report.warnings.push_back("transfer AE uses the victim's initialization seed; the two models are identical");
  }
  return {std::move(model), std::move(report)};
}

}  // namespace pcadv
