#pragma once

#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pcadv/attack.hpp"
#include "pcadv/cloud_io.hpp"
#include "pcadv/defense.hpp"
#include "pcadv/models.hpp"
#include "pcadv/training.hpp"

namespace pcadv {

inline constexpr const char* kVersion = "0.1.0";

struct ExperimentConfig {
  DatasetSpec dataset;

  AEConfig ae;
  TrainConfig ae_training;
  Seed transfer_seed = 2;  // initialization of the transfer autoencoder

  ClassifierConfig classifier;
  TrainConfig classifier_training;

  AttackConfig attack;
  Index sources_per_class = 2;
  std::vector<int> source_classes;  // empty: every class
  std::vector<int> target_classes;  // empty: every class
  std::vector<double> lambda_sweep{0.5, 1.0, 2.0, 4.0};

  DefenseConfig defense;
  std::vector<Index> calibration_k{1, 2, 4, 8};
  /// Empty: the reference grid {0.03, 0.04, 0.05, 0.06} rescaled like the
  /// default threshold.
  std::vector<double> calibration_delta;
  TrainConfig detection_training;
  Index detection_repeats = 5;

  std::filesystem::path output_directory = "runs";
  CloudFormat format = CloudFormat::xyz;
  unsigned threads = 1;
};

/// Parses a JSON config. Unknown keys and out-of-range values raise
/// ConfigError naming the offending key.
ExperimentConfig parse_config(const std::string& text, const std::string& origin = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical JSON rendering; parse_config(to_json_text(c)) == c.
std::string to_json_text(const ExperimentConfig& config);
/// 16 hex digits over everything except the outputs section.
std::string config_hash(const ExperimentConfig& config);

std::vector<double> calibration_deltas(const ExperimentConfig& config);

/// One content-addressed experiment directory.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config, std::ostream* log = nullptr);

  const ExperimentConfig& config() const noexcept { return config_; }
  const std::string& hash() const noexcept { return hash_; }
  const std::filesystem::path& dir() const noexcept { return dir_; }
  std::filesystem::path path(const std::filesystem::path& relative) const { return dir_ / relative; }

  /// Throws DependencyError naming `relative` and the producing subcommand.
  std::filesystem::path require(const std::filesystem::path& relative, const std::string& producer) const;

  void note(const std::string& message) const;

 private:
  ExperimentConfig config_;
  std::string hash_;
  std::filesystem::path dir_;
  std::ostream* log_;
};

// Pipeline stages. Each reads its prerequisites from the experiment
// directory and writes its artifacts back into it.

Dataset run_gen_data(const Experiment& exp);
Dataset load_experiment_data(const Experiment& exp);

AETrainReport run_train_ae(const Experiment& exp);
AEModel load_victim(const Experiment& exp);

ClassifierTrainReport run_train_classifier(const Experiment& exp);
std::optional<Classifier> load_experiment_classifier(const Experiment& exp);

struct AttackStageOptions {
  std::vector<AttackMode> modes{AttackMode::latent, AttackMode::output};
  bool untargeted = false;
  bool lambda_sweep = false;
  std::vector<double> lambdas;  // overrides the configured sweep values when non-empty
  std::optional<TargetSelection> selection;
};

struct AttackStageResult {
  std::map<AttackMode, std::vector<AttackResult>> targeted;    // best candidate per pair
  std::map<AttackMode, std::vector<AttackResult>> untargeted;  // best class per source
  /// Output of the lambda sweep: per value, one attack per pair against the
  /// geometrically nearest target.
  std::map<double, std::vector<AttackResult>> tradeoff;
  AttackMode tradeoff_mode = AttackMode::output;
};

AttackStageResult run_attack_stage(const Experiment& exp, const AttackStageOptions& options = {});

/// Attack-set names under attacks/: "<mode>", "<mode>-untargeted", "<mode>-lambda-<value>".
std::string attack_set_name(AttackMode mode, bool untargeted = false, std::optional<double> lambda = std::nullopt);
void save_attack_set(const std::filesystem::path& dir, const std::vector<AttackResult>& results, CloudFormat format);
std::vector<AttackResult> load_attack_set(const std::filesystem::path& dir);

struct DefenseRow {
  std::string attack_mode;  // latent, output or clean
  DefenseKind kind = DefenseKind::surface;
  DefenseSummary summary;
};

struct DetectionRow {
  AttackMode attack_mode = AttackMode::output;
  DefenseKind kind = DefenseKind::surface;
  DetectionResult result;
};

struct DefendStageResult {
  std::vector<DefenseRow> rows;
  std::vector<DetectionRow> detection;
};

DefendStageResult run_defend_stage(const Experiment& exp,
                                   const std::vector<DefenseKind>& kinds = {DefenseKind::surface,
                                                                            DefenseKind::critical},
                                   bool detect = true);

struct TransferRecord {
  AttackMode mode = AttackMode::output;
  int source_class = -1;
  int target_class = -1;
  double t_re_victim = 0.0;
  double t_re_transfer = 0.0;
  double t_nre_victim = 0.0;
  double t_nre_transfer = 0.0;
};

std::vector<TransferRecord> run_transfer_stage(const Experiment& exp);

CalibrationGrid run_calibration_stage(const Experiment& exp, const std::vector<Index>& ks,
                                      const std::vector<double>& deltas, AttackMode mode = AttackMode::output);

std::vector<EvolutionFrame> run_interpolate_stage(const Experiment& exp, AttackMode mode, Index pair,
                                                  const std::vector<double>& alphas);

struct ReportSummary {
  std::vector<std::string> written;  // paths relative to the experiment directory
  std::vector<std::string> deviations;
  std::vector<std::string> missing;  // stages whose outputs were absent
};

ReportSummary run_report_stage(const Experiment& exp);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace pcadv
