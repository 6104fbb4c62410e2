#include "pcadv/attack.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "pcadv/error.hpp"
#include "pcadv/parallel.hpp"

namespace pcadv {

const char* to_string(AttackMode mode) { return mode == AttackMode::latent ? "latent" : "output"; }

const char* to_string(DistanceLoss loss) {
  return loss == DistanceLoss::chamfer ? "chamfer" : "perturbation-l2";
}

const char* to_string(TargetSelection selection) {
  switch (selection) {
    case TargetSelection::geometric: return "geometric";
    case TargetSelection::geometric_classifier: return "geometric+classifier";
    case TargetSelection::random: return "random";
    case TargetSelection::latent_space: return "latent-space";
  }
  return "?";
}

AttackMode parse_attack_mode(const std::string& name) {
  if (name == "latent") return AttackMode::latent;
  if (name == "output") return AttackMode::output;
  throw ConfigError("unknown attack mode '" + name + "' (expected latent|output)");
}

DistanceLoss parse_distance_loss(const std::string& name) {
  if (name == "chamfer") return DistanceLoss::chamfer;
  if (name == "perturbation-l2") return DistanceLoss::perturbation_l2;
  throw ConfigError("unknown distance loss '" + name + "' (expected chamfer|perturbation-l2)");
}

TargetSelection parse_target_selection(const std::string& name) {
  for (auto s : {TargetSelection::geometric, TargetSelection::geometric_classifier, TargetSelection::random,
                 TargetSelection::latent_space}) {
    if (name == to_string(s)) return s;
  }
  throw ConfigError("unknown target selection '" + name + "'");
}

double default_lambda(AttackMode mode, DistanceLoss loss) {
  if (loss == DistanceLoss::chamfer) return mode == AttackMode::latent ? 150.0 : 1.0;
  return mode == AttackMode::latent ? 0.15 : 0.002;
}

void AttackConfig::validate() const {
  if (lambda && !(*lambda >= 0.0)) throw ConfigError("attack: lambda must be >= 0");
  if (steps < 1) throw ConfigError("attack: steps must be positive");
  if (!(lr > 0.0)) throw ConfigError("attack: learning rate must be positive");
  if (keep_best_from < 1 || keep_best_from > steps) throw ConfigError("attack: need 0 < keep_best_from <= steps");
  if (candidates < 1) throw ConfigError("attack: candidates (K) must be >= 1");
  if (!(beta >= 0.0)) throw ConfigError("attack: beta must be >= 0");
  if (!(gamma > 0.0)) throw ConfigError("attack: gamma must be positive");
}

std::vector<PoolEntry> make_pool(const AEModel& model, const std::vector<Instance>& instances) {
  std::vector<PoolEntry> pool;
  pool.reserve(instances.size());
  for (const auto& inst : instances) {
    pool.push_back({inst.id, inst.label(), inst.cloud.points(), reconstruction_error(model, inst.cloud.points())});
  }
  return pool;
}

double distance_loss(const Points& q, const Points& s, DistanceLoss loss, double beta) {
  double d = loss == DistanceLoss::chamfer ? chamfer(q, s) : (q - s).norm();
  if (beta > 0.0) {
    const auto nn = nearest_squared(q, s);
    d += beta * *std::max_element(nn.begin(), nn.end());
  }
  return d;
}

MetricRecord recompute_metrics(const AttackResult& r, double gamma) {
  MetricRecord m;
  m.os = os_count(r.adversarial, r.source, gamma).count;
  m.s_cd = chamfer(r.adversarial, r.source);
  m.t_re = chamfer(r.reconstruction, r.target);
  m.t_nre = t_nre_with(m.t_re, r.target_self_error);
  m.r = m.s_cd + m.t_re;
  return m;
}

namespace {

struct Evaluation {
  double total, adversarial, distance;
  Matrix grad;
};

class Objective {
 public:
  Objective(const AEModel& model, const Points& source, const Points& target, const AttackConfig& config)
      : model_(model), source_(source), target_(target), config_(config) {
    if (config.mode == AttackMode::latent) target_latent_ = encode(model, target).latent.transpose();
  }

  Evaluation evaluate(const Matrix& perturbation, double lambda) const {
    ad::Tape tape;
    const BoundAE ae = bind(tape, model_, false);
    const ad::Var s = tape.constant(Matrix(source_));
    const ad::Var p = tape.variable(perturbation);
    const ad::Var q = tape.add(s, p);

    ad::Var adv;
    const ad::Var z = encode_on_tape(tape, ae, q);
    if (config_.mode == AttackMode::latent) {
      adv = tape.l2_norm(tape.sub(z, tape.constant(target_latent_)));
    } else {
      adv = tape.chamfer(decode_on_tape(tape, ae, z), tape.constant(Matrix(target_)));
    }

    ad::Var dist = config_.distance == DistanceLoss::chamfer ? tape.chamfer(q, s) : tape.l2_norm(p);
    if (config_.beta > 0.0) dist = tape.add(dist, tape.scale(tape.max_nearest_squared(q, s), config_.beta));

    const ad::Var total = tape.add(adv, tape.scale(dist, lambda));
    tape.backward(total);
    return {tape.scalar(total), tape.scalar(adv), tape.scalar(dist), tape.grad(p)};
  }

 private:
  const AEModel& model_;
  const Points& source_;
  const Points& target_;
  const AttackConfig& config_;
  Matrix target_latent_;
};

/// Weighted distance scale used by the rebalance rule: the distance loss of a
/// perturbation displacing every point by gamma.
double reference_distance(const AttackConfig& config, Index n) {
  if (config.distance == DistanceLoss::chamfer) return 2.0 * config.gamma * config.gamma;
  return config.gamma * std::sqrt(static_cast<double>(n));
}

}  // namespace

AttackResult run_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                        const AttackConfig& config) {
  config.validate();
  if (!model.frozen()) throw InvalidInput("attack: the victim model must be frozen");

  AttackResult res;
  res.source_id = source.id;
  res.target_id = target.id;
  res.source_class = source.label;
  res.target_class = target.label;
  res.mode = config.mode;
  res.source = source.points;
  res.target = target.points;
  res.target_self_error = target.self_error;
  res.source_self_error = source.self_error;

  const Objective objective(model, res.source, res.target, config);
  Matrix perturbation = Matrix::Zero(res.source.rows(), 3);
  Matrix best = perturbation;
  double lambda = config.effective_lambda();
  res.best_adversarial_loss = std::numeric_limits<double>::infinity();

  AdamState adam({config.lr, 0.9, 0.999, 1e-8});
  Matrix* params[] = {&perturbation};
  try {
    for (Index it = 0; it <= config.steps; ++it) {
      Evaluation e = objective.evaluate(perturbation, lambda);
      if (it == 0 && config.rebalance && !config.lambda && lambda > 0.0) {
        const double ratio = e.adversarial / (lambda * reference_distance(config, res.source.rows()));
        if (ratio > 100.0 || (ratio > 0.0 && ratio < 0.01)) {
          res.rebalance_factor = ratio > 100.0 ? ratio / 100.0 : ratio * 100.0;
          lambda *= res.rebalance_factor;
          e = objective.evaluate(perturbation, lambda);
        }
      }
      if (!std::isfinite(e.total)) throw NumericError("non-finite attack loss");
      res.trace.total.push_back(e.total);
      res.trace.adversarial.push_back(e.adversarial);
      res.trace.distance.push_back(e.distance);
      if (it >= config.keep_best_from && e.adversarial < res.best_adversarial_loss) {
        res.best_adversarial_loss = e.adversarial;
        res.best_iteration = it;
        best = perturbation;
      }
      if (it == config.steps) break;
      const Matrix grads[] = {std::move(e.grad)};
      adam.step(params, grads);
    }
  } catch (const NumericError& err) {
    res.aborted = true;
    res.abort_reason = err.what();
    if (res.best_iteration < 0) best = Matrix::Zero(res.source.rows(), 3);
  }
  res.lambda = lambda;

  res.perturbation = Points(best);
  res.adversarial = res.source + res.perturbation;
  res.reconstruction = reconstruct(model, res.adversarial);
  res.metrics = recompute_metrics(res, config.gamma);
  return res;
}

AttackResult latent_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                           const AttackConfig& config) {
  AttackConfig c = config;
  c.mode = AttackMode::latent;
  return run_attack(model, source, target, c);
}

AttackResult output_attack(const AEModel& model, const PoolEntry& source, const PoolEntry& target,
                           const AttackConfig& config) {
  AttackConfig c = config;
  c.mode = AttackMode::output;
  return run_attack(model, source, target, c);
}

std::vector<const PoolEntry*> select_targets(const PoolEntry& source, int target_class,
                                             const std::vector<PoolEntry>& pool, Index k,
                                             TargetSelection selection, const SelectionContext& context) {
  if (target_class == source.label) {
    throw InvalidInput("select_targets: target class must differ from the source class");
  }
  if (k < 1) throw InvalidInput("select_targets: K must be >= 1");

  std::vector<const PoolEntry*> eligible;
  for (const auto& e : pool) {
    if (e.label != target_class) continue;
    if (selection == TargetSelection::geometric_classifier) {
      if (!context.classifier) throw InvalidInput("select_targets: classifier selection needs a classifier");
      if (predict(*context.classifier, e.points) != e.label) continue;
    }
    eligible.push_back(&e);
  }
  if (static_cast<Index>(eligible.size()) < k) {
    throw InvalidInput("select_targets: pool holds " + std::to_string(eligible.size()) +
                       " eligible instances of class " + std::to_string(target_class) + ", need " +
                       std::to_string(k));
  }

  if (selection == TargetSelection::random) {
    std::mt19937_64 rng(context.seed ^ (static_cast<std::uint64_t>(source.id) * 0x9e3779b97f4a7c15ULL) ^
                        static_cast<std::uint64_t>(target_class));
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(static_cast<std::size_t>(k));
    return eligible;
  }

  std::vector<std::pair<double, const PoolEntry*>> ranked;
  ranked.reserve(eligible.size());
  if (selection == TargetSelection::latent_space) {
    if (!context.model) throw InvalidInput("select_targets: latent-space selection needs the model");
    const Vector zs = encode(*context.model, source.points).latent;
    for (const PoolEntry* e : eligible) ranked.emplace_back((encode(*context.model, e->points).latent - zs).norm(), e);
  } else {
    for (const PoolEntry* e : eligible) ranked.emplace_back(chamfer(source.points, e->points), e);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.first < b.first || (a.first == b.first && a.second->id < b.second->id);
  });
  std::vector<const PoolEntry*> out;
  for (Index i = 0; i < k; ++i) out.push_back(ranked[i].second);
  return out;
}

SweepResult targeted_sweep(const AEModel& model, const std::vector<PoolEntry>& sources,
                           const std::vector<PoolEntry>& pool, const std::vector<int>& classes,
                           const AttackConfig& config, const SweepOptions& options) {
  config.validate();
  if (classes.size() < 2) throw ConfigError("targeted_sweep: need at least two classes");

  struct Job {
    std::size_t source;
    int target_class;
    const PoolEntry* target;
    Index rank;
  };
  std::vector<Job> jobs;
  const SelectionContext ctx{&model, options.classifier, config.seed};
  for (std::size_t s = 0; s < sources.size(); ++s) {
    for (int c : classes) {
      if (c == sources[s].label) continue;
      const auto candidates = select_targets(sources[s], c, pool, config.candidates, config.selection, ctx);
      for (std::size_t r = 0; r < candidates.size(); ++r) {
        jobs.push_back({s, c, candidates[r], static_cast<Index>(r)});
      }
    }
  }

  SweepResult out;
  out.all.resize(jobs.size());
  parallel_for(static_cast<Index>(jobs.size()), options.threads, [&](Index j) {
    out.all[j] = run_attack(model, sources[jobs[j].source], *jobs[j].target, config);
    out.all[j].candidate_rank = jobs[j].rank;
  });

  // Jobs are grouped by (source, class) with candidates contiguous.
  for (std::size_t j = 0; j < jobs.size();) {
    std::size_t end = j;
    std::size_t best = j;
    while (end < jobs.size() && jobs[end].source == jobs[j].source && jobs[end].target_class == jobs[j].target_class) {
      const auto& r = out.all[end];
      const auto& b = out.all[best];
      if (!r.aborted && (b.aborted || r.metrics.r < b.metrics.r)) best = end;
      ++end;
    }
    out.best.push_back(out.all[best]);
    j = end;
  }
  return out;
}

std::vector<AttackResult> untargeted_from(const std::vector<AttackResult>& targeted) {
  std::vector<AttackResult> out;
  std::map<Index, std::size_t> slot;
  for (const auto& r : targeted) {
    auto it = slot.find(r.source_id);
    if (it == slot.end()) {
      slot.emplace(r.source_id, out.size());
      out.push_back(r);
    } else if (!r.aborted && (out[it->second].aborted || r.metrics.r < out[it->second].metrics.r)) {
      out[it->second] = r;
    }
  }
  return out;
}

AttackResult untargeted(const AEModel& model, const PoolEntry& source, const std::vector<PoolEntry>& pool,
                        const std::vector<int>& classes, const AttackConfig& config, const SweepOptions& options) {
  std::vector<int> with_source = classes;
  if (std::find(with_source.begin(), with_source.end(), source.label) == with_source.end()) {
    with_source.push_back(source.label);
  }
  if (with_source.size() < 2) throw ConfigError("untargeted: need at least one target class");
  const SweepResult sweep = targeted_sweep(model, {source}, pool, with_source, config, options);
  return untargeted_from(sweep.best).front();
}

std::vector<EvolutionFrame> interpolate_evolution(const Points& source, const Points& adversarial,
                                                  const AEModel& model, const std::vector<double>& alphas) {
  if (source.rows() != adversarial.rows()) throw ShapeMismatch("interpolate_evolution: S and Q differ in size");
  std::vector<EvolutionFrame> frames;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    const double a = alphas[i];
    if (!(a >= 0.0 && a <= 1.0)) throw InvalidInput("interpolate_evolution: alpha outside [0, 1]");
    if (i > 0 && a < alphas[i - 1]) throw InvalidInput("interpolate_evolution: alphas must be sorted");
    EvolutionFrame f;
    f.alpha = a;
    f.blended = (1.0 - a) * source + a * adversarial;
    f.reconstruction = reconstruct(model, f.blended);
    frames.push_back(std::move(f));
  }
  return frames;
}

}  // namespace pcadv
