#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcadv/attack.hpp"
#include "pcadv/models.hpp"
#include "pcadv/training.hpp"

namespace pcadv {

enum class DefenseKind { surface, critical };

const char* to_string(DefenseKind kind);
DefenseKind parse_defense_kind(const std::string& name);

/// Threshold of the published calibration and the point count it was tuned at.
inline constexpr double kReferenceDelta = 0.04;
inline constexpr double kReferenceDensity = 2048.0;
/// Safety margin over the density-scaled threshold, measured on generated
/// clean clouds so the surface defense is a no-op on them.
inline constexpr double kDeltaMargin = 1.5;

/// Threshold used when none is configured: the reference threshold rescaled to
/// the sampling density of an n-point cloud (spacing shrinks as 1/sqrt(n)).
double default_delta(Index n);

struct DefenseConfig {
  DefenseKind kind = DefenseKind::surface;
  Index k = 2;
  std::optional<double> delta;

  double effective_delta(Index n) const { return delta.value_or(default_delta(n)); }
  void validate() const;
};

struct DefenseResult {
  Points defended;
  std::vector<Index> kept;     // ascending indices into the input
  std::vector<Index> removed;  // ascending
  double delta = 0.0;          // threshold applied (surface defense only)
};

/// Mean Euclidean distance from each point to its k nearest other points.
std::vector<double> mean_knn_distance(const Points& cloud, Index k);

/// Keeps points whose mean k-NN distance is at most delta.
DefenseResult surface_defense(const Points& cloud, Index k, double delta);
DefenseResult surface_defense(const Points& cloud, const DefenseConfig& config);

/// Removes the unique critical points of the model's encoder.
DefenseResult critical_defense(const Points& cloud, const AEModel& model);

DefenseResult apply_defense(const Points& cloud, const AEModel& model, const DefenseConfig& config);

/// One input to defend: an adversarial example or a clean source.
struct DefenseInput {
  Points source;
  Points input;
  int source_label = -1;
  double source_self_error = 0.0;  // CD(f_AE(S), S)
};

std::vector<DefenseInput> defense_inputs(const std::vector<AttackResult>& attacks);
std::vector<DefenseInput> clean_inputs(const std::vector<PoolEntry>& sources);

struct DefenseRecord {
  int source_label = -1;
  Index removed = 0;
  double s_re_before = 0.0;
  double s_re_after = 0.0;
  double s_nre_before = 0.0;
  double s_nre_after = 0.0;
  int predicted_before = -1;  // classifier label of the reconstruction, -1 without classifier
  int predicted_after = -1;
  Points defended;
  Points reconstruction_after;
};

struct DefenseSummary {
  std::vector<DefenseRecord> records;
  double s_re_before = 0.0;
  double s_re_after = 0.0;
  double s_nre_before = 0.0;
  double s_nre_after = 0.0;
  /// Source-label accuracy of the reconstructions; NaN without a classifier.
  double s_rca_before = 0.0;
  double s_rca_after = 0.0;
};

DefenseSummary evaluate_defense(const AEModel& model, const std::vector<DefenseInput>& inputs,
                                const DefenseConfig& config, const Classifier* classifier = nullptr,
                                unsigned threads = 1);

struct DetectionResult {
  double test_accuracy = 0.0;  // mean over repeats
  double validation_accuracy = 0.0;
  std::vector<double> repeat_accuracy;
  Index train_size = 0;
  Index test_size = 0;
  Classifier detector;  // trained on the first split
};

struct DetectionSplit {
  double train = 0.76;
  double validation = 0.08;
  double test = 0.16;
  /// Independent re-splits; accuracies are averaged.
  Index repeats = 1;
};

/// Trains a two-class detector on reconstructions (label 0 clean, 1
/// adversarial), splitting each population separately. Each repeat draws a
/// fresh split and a fresh detector initialization.
DetectionResult detect_attack(const std::vector<Points>& clean, const std::vector<Points>& adversarial,
                              const ClassifierConfig& detector_config, const TrainConfig& train,
                              const DetectionSplit& split = {});

struct CalibrationCell {
  Index k = 0;
  double delta = 0.0;
  double s_nre_after = 0.0;  // NaN when some input was removed entirely
  Index failures = 0;
  double mean_removed = 0.0;
};

struct CalibrationGrid {
  std::vector<CalibrationCell> cells;  // row-major over ks then deltas
  Index best = -1;                     // lowest finite S-NRE after
};

CalibrationGrid calibrate_surface_defense(const AEModel& model, const std::vector<DefenseInput>& inputs,
                                          const std::vector<Index>& ks, const std::vector<double>& deltas,
                                          unsigned threads = 1);

}  // namespace pcadv
