#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcadv/metrics.hpp"
#include "pcadv/models.hpp"
#include "pcadv/training.hpp"

namespace pcadv {

enum class AttackMode { latent, output };
enum class DistanceLoss { chamfer, perturbation_l2 };
enum class TargetSelection { geometric, geometric_classifier, random, latent_space };

const char* to_string(AttackMode mode);
const char* to_string(DistanceLoss loss);
const char* to_string(TargetSelection selection);
AttackMode parse_attack_mode(const std::string& name);
DistanceLoss parse_distance_loss(const std::string& name);
TargetSelection parse_target_selection(const std::string& name);

/// Published regularization weights: 150 / 1 with the Chamfer distance loss,
/// 0.15 / 0.002 with the perturbation-norm loss (latent / output).
double default_lambda(AttackMode mode, DistanceLoss loss);

struct AttackConfig {
  AttackMode mode = AttackMode::output;
  std::optional<double> lambda;  // default_lambda(mode, distance) when unset
  Index steps = 500;
  double lr = 0.01;
  Index keep_best_from = 400;
  Index candidates = 5;  // K
  DistanceLoss distance = DistanceLoss::chamfer;
  double beta = 0.0;  // off-surface penalty weight
  TargetSelection selection = TargetSelection::geometric;
  /// Rescale lambda when the adversarial term is 100x away from the weighted
  /// distance scale at initialization.
  bool rebalance = true;
  double gamma = kOffSurfaceGamma;
  Seed seed = 1;  // random target selection

  double effective_lambda() const { return lambda.value_or(default_lambda(mode, distance)); }
  /// Throws ConfigError on out-of-range fields.
  void validate() const;
};

/// A labelled instance with its cached inherent reconstruction error
/// CD(f_AE(X), X), the denominator of T-NRE and S-NRE.
struct PoolEntry {
  Index id = 0;
  int label = -1;
  Points points;
  double self_error = 0.0;
};

std::vector<PoolEntry> make_pool(const AEModel& model, const std::vector<Instance>& instances);

struct LossTrace {
  std::vector<double> total;
  std::vector<double> adversarial;
  std::vector<double> distance;  // unweighted distance term (including the beta term)
};

struct AttackResult {
  Index source_id = -1;
  Index target_id = -1;
  int source_class = -1;
  int target_class = -1;
  AttackMode mode = AttackMode::output;

  Points source;          // S
  Points target;          // T
  Points perturbation;    // P
  Points adversarial;     // Q = S + P
  Points reconstruction;  // f_AE(Q)

  LossTrace trace;  // entry i is evaluated after i optimizer steps
  Index best_iteration = -1;
  double best_adversarial_loss = 0.0;
  double lambda = 0.0;
  double rebalance_factor = 1.0;
  double target_self_error = 0.0;
  double source_self_error = 0.0;
  Index candidate_rank = 0;

  MetricRecord metrics;
  bool aborted = false;
  std::string abort_reason;
};

/// Minimizes ||f_Enc(S+P) - f_Enc(T)||_2 + lambda * L_dist(S+P, S).
AttackResult latent_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                           const AttackConfig& config);
/// Minimizes CD(f_AE(S+P), T) + lambda * L_dist(S+P, S).
AttackResult output_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                           const AttackConfig& config);
/// Dispatches on config.mode.
AttackResult run_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                        const AttackConfig& config);

/// Distance-loss term alone, as used inside the attack objective.
double distance_loss(const Points& q, const Points& s, DistanceLoss loss, double beta);

/// Recomputes OS, S-CD, T-RE, T-NRE and r from the stored clouds.
MetricRecord recompute_metrics(const AttackResult& result, double gamma = kOffSurfaceGamma);

struct SelectionContext {
  const AEModel* model = nullptr;            // latent-space selection
  const Classifier* classifier = nullptr;    // geometric+classifier selection
  Seed seed = 1;                             // random selection
};

/// K candidate targets of `target_class` for `source`, best first.
std::vector<const PoolEntry*> select_targets(const PoolEntry& source, int target_class,
                                             const std::vector<PoolEntry>& pool, Index k,
                                             TargetSelection selection, const SelectionContext& context = {});

struct SweepOptions {
  const Classifier* classifier = nullptr;
  unsigned threads = 1;
};

struct SweepResult {
  /// Minimum-score result per (source, target class), ordered by source
  /// position then target class.
  std::vector<AttackResult> best;
  /// Every candidate attack that was run, in the same order with candidates
  /// ranked best-first by selection.
  std::vector<AttackResult> all;
};

/// Attacks every source toward every other class in `classes`, K candidates
/// each, keeping the candidate with the lowest r = CD(Q,S) + CD(Q_hat,T).
SweepResult targeted_sweep(const AEModel& model, const std::vector<PoolEntry>& sources,
                           const std::vector<PoolEntry>& pool, const std::vector<int>& classes,
                           const AttackConfig& config, const SweepOptions& options = {});

/// Lowest-score result over all target classes for one source.
AttackResult untargeted(const AEModel& model, const PoolEntry& source, const std::vector<PoolEntry>& pool,
                        const std::vector<int>& classes, const AttackConfig& config,
                        const SweepOptions& options = {});

/// Per source, the lowest-score entry of an existing targeted sweep.
std::vector<AttackResult> untargeted_from(const std::vector<AttackResult>& targeted);

struct EvolutionFrame {
  double alpha = 0.0;
  Points blended;        // U = (1 - alpha) S + alpha Q
  Points reconstruction;  // f_AE(U)
};

std::vector<EvolutionFrame> interpolate_evolution(const Points& source, const Points& adversarial,
                                                  const AEModel& model, const std::vector<double>& alphas);

}  // namespace pcadv
