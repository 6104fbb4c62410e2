#include "pcadv/defense.hpp"

#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>

#include "pcadv/error.hpp"
#include "pcadv/metrics.hpp"
#include "pcadv/neighbor_index.hpp"
#include "pcadv/parallel.hpp"

namespace pcadv {

const char* to_string(DefenseKind kind) { return kind == DefenseKind::surface ? "surface" : "critical"; }

DefenseKind parse_defense_kind(const std::string& name) {
  if (name == "surface" || name == "off-surface") return DefenseKind::surface;
  if (name == "critical") return DefenseKind::critical;
  throw ConfigError("unknown defense kind '" + name + "' (expected surface|critical)");
}

double default_delta(Index n) {
  if (n < 1) throw InvalidInput("default_delta: point count must be positive");
  return kDeltaMargin * kReferenceDelta * std::sqrt(kReferenceDensity / static_cast<double>(n));
}

void DefenseConfig::validate() const {
  if (k < 1) throw ConfigError("defense: k must be >= 1");
  if (delta && !(*delta > 0.0)) throw ConfigError("defense: delta must be positive");
}

namespace {

DefenseResult keep_complement(const Points& cloud, std::vector<char> removed_mask, double delta) {
  DefenseResult res;
  res.delta = delta;
  for (Index i = 0; i < cloud.rows(); ++i) (removed_mask[i] ? res.removed : res.kept).push_back(i);
  res.defended.resize(static_cast<Index>(res.kept.size()), 3);
  for (std::size_t j = 0; j < res.kept.size(); ++j) res.defended.row(static_cast<Index>(j)) = cloud.row(res.kept[j]);
  return res;
}

double mean_of(const std::vector<DefenseRecord>& records, double DefenseRecord::*field) {
  double sum = 0.0;
  for (const auto& r : records) sum += r.*field;
  return records.empty() ? 0.0 : sum / static_cast<double>(records.size());
}

}  // namespace

std::vector<double> mean_knn_distance(const Points& cloud, Index k) {
  if (k < 1 || cloud.rows() <= k) {
    throw InvalidInput("surface defense needs more than k = " + std::to_string(k) + " points, got " +
                       std::to_string(cloud.rows()));
  }
  const NeighborIndex index(cloud);
  std::vector<double> out(static_cast<std::size_t>(cloud.rows()));
  for (Index i = 0; i < cloud.rows(); ++i) {
    double sum = 0.0;
    for (const auto& nb : index.knn(cloud.row(i), k, i)) sum += nb.distance;
    out[i] = sum / static_cast<double>(k);
  }
  return out;
}

DefenseResult surface_defense(const Points& cloud, Index k, double delta) {
  if (std::isnan(delta)) throw InvalidInput("surface defense: delta is NaN");
  const auto dbar = mean_knn_distance(cloud, k);
  std::vector<char> mask(dbar.size());
  for (std::size_t i = 0; i < dbar.size(); ++i) mask[i] = !(dbar[i] <= delta);
  DefenseResult res = keep_complement(cloud, std::move(mask), delta);
  if (res.kept.empty()) throw InvalidInput("surface defense removed every point (delta too small)");
  return res;
}

DefenseResult surface_defense(const Points& cloud, const DefenseConfig& config) {
  config.validate();
  return surface_defense(cloud, config.k, config.effective_delta(cloud.rows()));
}

DefenseResult critical_defense(const Points& cloud, const AEModel& model) {
  const auto ids = unique_critical_ids(encode(model, cloud));
  if (static_cast<Index>(ids.size()) >= cloud.rows()) {
    throw InvalidInput("critical defense: every point is critical, complement is empty");
  }
  std::vector<char> mask(static_cast<std::size_t>(cloud.rows()), 0);
  for (Index id : ids) mask[id] = 1;
  return keep_complement(cloud, std::move(mask), 0.0);
}

DefenseResult apply_defense(const Points& cloud, const AEModel& model, const DefenseConfig& config) {
  return config.kind == DefenseKind::surface ? surface_defense(cloud, config) : critical_defense(cloud, model);
}

std::vector<DefenseInput> defense_inputs(const std::vector<AttackResult>& attacks) {
  std::vector<DefenseInput> out;
  out.reserve(attacks.size());
  for (const auto& a : attacks) out.push_back({a.source, a.adversarial, a.source_class, a.source_self_error});
  return out;
}

std::vector<DefenseInput> clean_inputs(const std::vector<PoolEntry>& sources) {
  std::vector<DefenseInput> out;
  out.reserve(sources.size());
  for (const auto& s : sources) out.push_back({s.points, s.points, s.label, s.self_error});
  return out;
}

DefenseSummary evaluate_defense(const AEModel& model, const std::vector<DefenseInput>& inputs,
                                const DefenseConfig& config, const Classifier* classifier, unsigned threads) {
  config.validate();
  DefenseSummary sum;
  sum.records.resize(inputs.size());
  parallel_for(static_cast<Index>(inputs.size()), threads, [&](Index i) {
    const DefenseInput& in = inputs[i];
    DefenseRecord& rec = sum.records[i];
    const DefenseResult def = apply_defense(in.input, model, config);
    const Points before = reconstruct(model, in.input);
    rec.source_label = in.source_label;
    rec.removed = static_cast<Index>(def.removed.size());
    rec.reconstruction_after = reconstruct(model, def.defended);
    rec.s_re_before = chamfer(before, in.source);
    rec.s_re_after = chamfer(rec.reconstruction_after, in.source);
    rec.s_nre_before = s_nre_with(rec.s_re_before, in.source_self_error);
    rec.s_nre_after = s_nre_with(rec.s_re_after, in.source_self_error);
    if (classifier) {
      rec.predicted_before = predict(*classifier, before);
      rec.predicted_after = predict(*classifier, rec.reconstruction_after);
    }
    rec.defended = def.defended;
  });

  sum.s_re_before = mean_of(sum.records, &DefenseRecord::s_re_before);
  sum.s_re_after = mean_of(sum.records, &DefenseRecord::s_re_after);
  sum.s_nre_before = mean_of(sum.records, &DefenseRecord::s_nre_before);
  sum.s_nre_after = mean_of(sum.records, &DefenseRecord::s_nre_after);
  if (classifier && !sum.records.empty()) {
    Index before = 0, after = 0;
    for (const auto& r : sum.records) {
      before += r.predicted_before == r.source_label;
      after += r.predicted_after == r.source_label;
    }
    const auto count = static_cast<double>(sum.records.size());
    sum.s_rca_before = static_cast<double>(before) / count;
    sum.s_rca_after = static_cast<double>(after) / count;
  } else {
    sum.s_rca_before = sum.s_rca_after = std::numeric_limits<double>::quiet_NaN();
  }
  return sum;
}

DetectionResult detect_attack(const std::vector<Points>& clean, const std::vector<Points>& adversarial,
                              const ClassifierConfig& detector_config, const TrainConfig& train,
                              const DetectionSplit& split) {
  if (clean.empty() || adversarial.empty()) {
    throw InvalidInput("detect_attack: both clean and adversarial populations must be non-empty");
  }
  if (detector_config.num_classes != 2) throw ConfigError("detect_attack: the detector must have 2 classes");
  if (std::abs(split.train + split.validation + split.test - 1.0) > 1e-9 || split.train <= 0.0 || split.test <= 0.0 ||
      split.validation < 0.0) {
    throw ConfigError("detect_attack: split fractions must be non-negative and sum to 1");
  }

  if (split.repeats < 1) throw ConfigError("detect_attack: repeats must be >= 1");

  std::optional<DetectionResult> out;
  double test_sum = 0.0, val_sum = 0.0;
  for (Index rep = 0; rep < split.repeats; ++rep) {
    Dataset data;
    data.num_classes = 2;
    std::mt19937_64 rng(train.seed ^ 0xd37ec7ULL ^ (static_cast<std::uint64_t>(rep) * 0x9e3779b97f4a7c15ULL));
    Index next_id = 0;
    auto distribute = [&](const std::vector<Points>& clouds, int label) {
      std::vector<std::size_t> order(clouds.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), rng);
      const double total = static_cast<double>(clouds.size());
      const auto n_test = static_cast<std::size_t>(std::lround(total * split.test));
      const auto n_val = static_cast<std::size_t>(std::lround(total * split.validation));
      if (n_test == 0 || n_test + n_val >= clouds.size()) {
        throw InvalidInput("detect_attack: population of " + std::to_string(clouds.size()) +
                           " clouds is too small to split");
      }
      for (std::size_t j = 0; j < order.size(); ++j) {
        Instance inst{next_id++, PointCloud(clouds[order[j]], label)};
        auto& part = j < n_test ? data.test : (j < n_test + n_val ? data.validation : data.train);
        part.push_back(std::move(inst));
      }
    };
    distribute(clean, 0);
    distribute(adversarial, 1);

    ClassifierConfig cfg = detector_config;
    cfg.seed = detector_config.seed + static_cast<Seed>(rep);
    Classifier detector(cfg);
    TrainConfig tc = train;
    tc.seed = train.seed + static_cast<Seed>(rep);
    const ClassifierTrainReport report = train_classifier(detector, data, tc);
    const double val = report.validation_accuracy.empty() ? 0.0 : report.validation_accuracy.back();
    test_sum += report.test_accuracy;
    val_sum += val;
    if (!out) {
      out = DetectionResult{0.0, 0.0, {}, static_cast<Index>(data.train.size()), static_cast<Index>(data.test.size()),
                            std::move(detector)};
    }
    out->repeat_accuracy.push_back(report.test_accuracy);
  }
  out->test_accuracy = test_sum / static_cast<double>(split.repeats);
  out->validation_accuracy = val_sum / static_cast<double>(split.repeats);
  return std::move(*out);
}

CalibrationGrid calibrate_surface_defense(const AEModel& model, const std::vector<DefenseInput>& inputs,
                                          const std::vector<Index>& ks, const std::vector<double>& deltas,
                                          unsigned threads) {
  if (ks.empty() || deltas.empty()) throw ConfigError("calibration grid needs at least one k and one delta");
  if (inputs.empty()) throw InvalidInput("calibration needs at least one input");

  CalibrationGrid grid;
  for (Index k : ks) {
    for (double delta : deltas) {
      if (k < 1 || !(delta > 0.0)) throw ConfigError("calibration grid: k >= 1 and delta > 0 required");
      grid.cells.push_back({k, delta, 0.0, 0, 0.0});
    }
  }

  const auto count = static_cast<Index>(inputs.size());
  std::vector<double> nre(grid.cells.size() * inputs.size());
  std::vector<double> removed(nre.size());
  parallel_for(count, threads, [&](Index i) {
    for (std::size_t c = 0; c < grid.cells.size(); ++c) {
      const std::size_t slot = c * inputs.size() + static_cast<std::size_t>(i);
      try {
        const DefenseResult def = surface_defense(inputs[i].input, grid.cells[c].k, grid.cells[c].delta);
        nre[slot] = s_nre_with(chamfer(reconstruct(model, def.defended), inputs[i].source), inputs[i].source_self_error);
        removed[slot] = static_cast<double>(def.removed.size());
      } catch (const InvalidInput&) {
        nre[slot] = std::numeric_limits<double>::quiet_NaN();
        removed[slot] = static_cast<double>(inputs[i].input.rows());
      }
    }
  });

  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < grid.cells.size(); ++c) {
    CalibrationCell& cell = grid.cells[c];
    double sum = 0.0, rem = 0.0;
    for (Index i = 0; i < count; ++i) {
      const double v = nre[c * inputs.size() + static_cast<std::size_t>(i)];
      if (std::isnan(v)) ++cell.failures;
      sum += v;
      rem += removed[c * inputs.size() + static_cast<std::size_t>(i)];
    }
    cell.s_nre_after = cell.failures > 0 ? std::numeric_limits<double>::quiet_NaN() : sum / static_cast<double>(count);
    cell.mean_removed = rem / static_cast<double>(count);
    if (cell.failures == 0 && cell.s_nre_after < best) {
      best = cell.s_nre_after;
      grid.best = static_cast<Index>(c);
    }
  }
  return grid;
}

}  // namespace pcadv
