// End-to-end acceptance run: trains the desk-scale experiment from scratch,
// evaluates each criterion and prints one PASS/FAIL line per criterion.

#include <chrono>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "pcadv/experiment.hpp"

using namespace pcadv;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* format, ...) {
  char buf[512];
  va_list args;
  va_start(args, format);
  std::vsnprintf(buf, sizeof buf, format, args);
  va_end(args);
  return buf;
}

struct Verdict {
  int id;
  std::string name;
  bool pass;
  std::string detail;
  double seconds;
};

std::vector<Verdict> verdicts;

void report(int id, const std::string& name, bool pass, const std::string& detail, double seconds) {
  verdicts.push_back({id, name, pass, detail, seconds});
  std::printf("%s  %2d  %-28s %s [%.1f s]\n", pass ? "PASS" : "FAIL", id, name.c_str(), detail.c_str(), seconds);
  std::fflush(stdout);
}

template <class F>
double mean_of(const std::vector<AttackResult>& rs, F field) {
  double s = 0.0;
  for (const auto& r : rs) s += field(r);
  return rs.empty() ? 0.0 : s / static_cast<double>(rs.size());
}

// ------------------------------------------------------------------ 1
void gradient_correctness(const AEModel& model, const std::vector<PoolEntry>& pool) {
  const auto start = Clock::now();
  constexpr int kSeeds = 100;
  constexpr Index kCoords = 24;
  constexpr double kH = 1e-6;
  double worst_chamfer = 0, worst_latent = 0, worst_latent_obj = 0, worst_output_obj = 0;
  Index checked = 0, skipped = 0;

  for (int seed = 0; seed < kSeeds; ++seed) {
    std::mt19937_64 rng(static_cast<std::uint64_t>(seed) + 1);
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const PoolEntry& s = pool[pick(rng)];
    const PoolEntry* t = &pool[pick(rng)];
    while (t->label == s.label) t = &pool[pick(rng)];
    const Matrix src(s.points), tgt(t->points);
    const Matrix zt = encode(model, t->points).latent.transpose();
    const Matrix p0 = 0.01 * Matrix(oracle::random_points(src.rows(), rng));

    std::vector<Index> coords(static_cast<std::size_t>(kCoords));
    std::uniform_int_distribution<Index> coord(0, p0.size() - 1);
    for (auto& c : coords) c = coord(rng);

    auto objective = [&](bool output_space, bool with_distance) -> test::Builder {
      return [&, output_space, with_distance](ad::Tape& tape, ad::Var p) {
        const BoundAE ae = bind(tape, model, false);
        const ad::Var sv = tape.constant(src);
        const ad::Var q = tape.add(sv, p);
        const ad::Var z = encode_on_tape(tape, ae, q);
        const ad::Var adv = output_space ? tape.chamfer(decode_on_tape(tape, ae, z), tape.constant(tgt))
                                         : tape.l2_norm(tape.sub(z, tape.constant(zt)));
        if (!with_distance) return adv;
        const double lambda = default_lambda(output_space ? AttackMode::output : AttackMode::latent,
                                             DistanceLoss::chamfer);
        return tape.add(adv, tape.scale(tape.chamfer(q, sv), lambda));
      };
    };
    const test::Builder chamfer_only = [&](ad::Tape& tape, ad::Var p) {
      return tape.chamfer(tape.add(tape.constant(src), p), tape.constant(tgt));
    };

    const auto run = [&](const test::Builder& b, double& worst) {
      const auto r = test::sampled_gradcheck(b, p0, coords, kH);
      worst = std::max(worst, r.max_relative_error);
      checked += r.checked;
      skipped += r.skipped;
    };
    run(chamfer_only, worst_chamfer);
    run(objective(false, false), worst_latent);
    run(objective(false, true), worst_latent_obj);
    run(objective(true, true), worst_output_obj);
  }
  const double secs = seconds_since(start);
  const bool pass = worst_chamfer <= 1e-4 && worst_latent <= 1e-4 && worst_latent_obj <= 1e-4 &&
                    worst_output_obj <= 1e-3 && checked > 0 && secs < 60.0;
  report(1, "gradient correctness", pass,
         fmt("max rel err chamfer %.2e latent %.2e latent-obj %.2e output-obj %.2e; %lld checked, %lld skipped",
             worst_chamfer, worst_latent, worst_latent_obj, worst_output_obj, static_cast<long long>(checked),
             static_cast<long long>(skipped)),
         secs);
}

// ------------------------------------------------------------------ 2
void oracle_equivalence() {
  const auto start = Clock::now();
  double chamfer_err = 0.0, knn_err = 0.0;
  Index knn_id_mismatch = 0, os_mismatch = 0;
  for (int seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(1000 + static_cast<std::uint64_t>(seed));
    std::uniform_int_distribution<Index> size(2, 64);
    const Points x = oracle::random_points(size(rng), rng);
    Points y = oracle::random_points(size(rng), rng);
    if (seed % 4 == 0) y = x + 0.03 * oracle::random_points(x.rows(), rng);  // close clouds exercise OS at gamma

    chamfer_err = std::max(chamfer_err, std::abs(chamfer(x, y) - oracle::chamfer(x, y)));
    os_mismatch += os_count(x, y).count != oracle::os_count(x, y, kOffSurfaceGamma);

    const NeighborIndex index(y);
    std::uniform_int_distribution<Index> kdist(1, y.rows());
    for (Index i = 0; i < x.rows(); ++i) {
      const Index k = kdist(rng);
      const auto got = index.knn(x.row(i), k);
      const auto want = oracle::knn(y, x.row(i), k);
      for (std::size_t j = 0; j < want.size(); ++j) {
        knn_id_mismatch += got[j].id != want[j].id;
        knn_err = std::max(knn_err, std::abs(got[j].distance - want[j].distance));
      }
    }
  }
  const double secs = seconds_since(start);
  const bool pass = chamfer_err <= 1e-12 && knn_err <= 1e-12 && knn_id_mismatch == 0 && os_mismatch == 0 && secs < 30;
  report(2, "oracle equivalence", pass,
         fmt("chamfer max diff %.1e, knn max diff %.1e, knn id mismatches %lld, os mismatches %lld", chamfer_err,
             knn_err, static_cast<long long>(knn_id_mismatch), static_cast<long long>(os_mismatch)),
         secs);
}

// ------------------------------------------------------------------ 3
void critical_set(const AEModel& model, int classes) {
  const auto start = Clock::now();
  int exact = 0;
  for (int i = 0; i < 100; ++i) {
    std::mt19937_64 rng(5000 + static_cast<std::uint64_t>(i));
    Points cloud = i % 2 == 0 ? generate_shape(i % classes, model.num_points(), 70000 + static_cast<Seed>(i)).points()
                              : oracle::random_points(model.num_points(), rng);
    const Encoding e = encode(model, cloud);
    const auto ids = unique_critical_ids(e);
    Points crit(static_cast<Index>(ids.size()), 3);
    for (std::size_t j = 0; j < ids.size(); ++j) crit.row(static_cast<Index>(j)) = cloud.row(ids[j]);
    exact += encode(model, crit).latent == e.latent;
  }
  const double secs = seconds_since(start);
  report(3, "critical-set property", exact == 100 && secs < 30, fmt("%d/100 exact", exact), secs);
}

// ------------------------------------------------------------------ 4, 5, 9
void attack_criteria(const AEModel& model, const AttackStageResult& res, double secs, bool timed) {
  const auto& latent = res.targeted.at(AttackMode::latent);
  const auto& output = res.targeted.at(AttackMode::output);

  std::map<Index, std::set<int>> targets_per_source;
  for (const auto& r : output) targets_per_source[r.source_id].insert(r.target_class);
  std::size_t min_targets = SIZE_MAX;
  for (const auto& [id, t] : targets_per_source) min_targets = std::min(min_targets, t.size());

  const double tnre_latent = mean_of(latent, [](const auto& r) { return r.metrics.t_nre; });
  const double tnre_output = mean_of(output, [](const auto& r) { return r.metrics.t_nre; });
  const double baseline = mean_of(output, [&](const AttackResult& r) {
    return t_nre_with(chamfer(reconstruct(model, r.source), r.target), r.target_self_error);
  });
  Index aborted = 0;
  for (const auto* set : {&latent, &output}) {
    for (const auto& r : *set) aborted += r.aborted;
  }
  const bool shape_ok = targets_per_source.size() >= 10 && min_targets >= 3;
  report(4, "attack efficacy",
         shape_ok && tnre_output < tnre_latent && tnre_output < baseline && (!timed || secs < 900),
         fmt("%zu sources x >=%zu classes; mean T-NRE output %.3f, latent %.3f, no-attack %.3f; %lld aborted%s",
             targets_per_source.size(), min_targets, tnre_output, tnre_latent, baseline,
             static_cast<long long>(aborted), timed ? "" : "; runtime not measured (reused)"),
         secs);

  // Trade-off: pool (lambda, metric) over all pairs.
  std::vector<double> lam, scd, tre;
  std::size_t monotone = 0, pairs = 0;
  std::vector<std::vector<AttackResult>> by_lambda;
  for (const auto& [l, rs] : res.tradeoff) {
    by_lambda.push_back(rs);
    for (const auto& r : rs) {
      lam.push_back(l);
      scd.push_back(r.metrics.s_cd);
      tre.push_back(r.metrics.t_re);
    }
  }
  if (!by_lambda.empty()) {
    pairs = by_lambda.front().size();
    for (std::size_t p = 0; p < pairs; ++p) {
      bool ok = true;
      for (std::size_t k = 1; k < by_lambda.size(); ++k) ok &= by_lambda[k][p].metrics.s_cd <= by_lambda[k - 1][p].metrics.s_cd;
      monotone += ok;
    }
  }
  const double rho_scd = spearman(lam, scd), rho_tre = spearman(lam, tre);
  report(5, "trade-off", rho_scd < 0 && rho_tre > 0,
         fmt("Spearman(lambda, S-CD) %.3f, Spearman(lambda, T-RE) %.3f over %zu lambdas x %zu pairs; "
             "S-CD non-increasing on %zu/%zu pairs",
             rho_scd, rho_tre, by_lambda.size(), pairs, monotone, pairs),
         0.0);

  bool dominance = true;
  std::string detail;
  for (AttackMode mode : {AttackMode::latent, AttackMode::output}) {
    const auto& t = res.targeted.at(mode);
    const auto& u = res.untargeted.at(mode);
    const double t_scd = mean_of(t, [](const auto& r) { return r.metrics.s_cd; });
    const double u_scd = mean_of(u, [](const auto& r) { return r.metrics.s_cd; });
    const double t_nre = mean_of(t, [](const auto& r) { return r.metrics.t_nre; });
    const double u_nre = mean_of(u, [](const auto& r) { return r.metrics.t_nre; });
    dominance &= u_scd <= t_scd && u_nre <= t_nre;
    detail += fmt("%s: S-CD %.2e vs %.2e, T-NRE %.3f vs %.3f; ", to_string(mode), u_scd, t_scd, u_nre, t_nre);
  }
  report(9, "untargeted dominance", dominance, detail + "(untargeted vs targeted)", 0.0);
}

// ------------------------------------------------------------------ 6, 7, 12
void defense_criteria(const DefendStageResult& res, const Dataset& data, const ExperimentConfig& c, double secs,
                      bool timed) {
  std::map<std::pair<std::string, DefenseKind>, const DefenseSummary*> rows;
  for (const auto& r : res.rows) rows[{r.attack_mode, r.kind}] = &r.summary;

  bool reduced = true;
  std::string detail;
  for (const char* mode : {"latent", "output"}) {
    for (DefenseKind kind : {DefenseKind::surface, DefenseKind::critical}) {
      const DefenseSummary& s = *rows.at({mode, kind});
      reduced &= s.s_nre_after < s.s_nre_before;
      detail += fmt("%s/%s %.2f->%.2f; ", mode, to_string(kind), s.s_nre_before, s.s_nre_after);
    }
  }

  // Fresh clean clouds, disjoint seeds from the dataset.
  Index untouched = 0, total = 0;
  DefenseConfig surface = c.defense;
  surface.kind = DefenseKind::surface;
  for (int cls = 0; cls < data.num_classes; ++cls) {
    for (Seed seed = 0; seed < 40; ++seed) {
      const Points clean = generate_shape(cls, c.dataset.points, 900000 + seed).points();
      untouched += surface_defense(clean, surface).removed.empty();
      ++total;
    }
  }
  const double untouched_frac = static_cast<double>(untouched) / static_cast<double>(total);
  const DefenseSummary& clean_surface = *rows.at({"clean", DefenseKind::surface});
  const DefenseSummary& clean_critical = *rows.at({"clean", DefenseKind::critical});
  const bool clean_ok = untouched_frac >= 0.95 && clean_surface.s_nre_after >= 1.0 &&
                        clean_surface.s_nre_after <= 1.05 && clean_critical.s_nre_after <= 1.25;
  report(6, "defense efficacy", reduced && clean_ok && (!timed || secs < 300),
         detail + fmt("clean surface no-op on %lld/%lld clouds, clean S-NRE surface %.3f critical %.3f%s",
                      static_cast<long long>(untouched), static_cast<long long>(total), clean_surface.s_nre_after,
                      clean_critical.s_nre_after, timed ? "" : "; runtime not measured (reused)"),
         secs);

  const double band = std::max(1.05, clean_critical.s_nre_after);
  double lowest = std::numeric_limits<double>::infinity();
  for (const char* mode : {"latent", "output"}) {
    for (DefenseKind kind : {DefenseKind::surface, DefenseKind::critical}) {
      lowest = std::min(lowest, rows.at({mode, kind})->s_nre_after);
    }
  }
  report(7, "residual attack effect", lowest > 1.3 && lowest > band,
         fmt("lowest defended S-NRE on attacked inputs %.3f (threshold 1.3, clean band up to %.3f)", lowest, band),
         0.0);

  bool detected = true;
  std::string det;
  for (const auto& d : res.detection) {
    if (d.attack_mode != AttackMode::output) continue;
    detected &= d.result.test_accuracy > 0.55;
    const auto& acc = d.result.repeat_accuracy;
    det += fmt("%s %.3f (min %.3f over %zu splits, %lld test clouds each); ", to_string(d.kind),
               d.result.test_accuracy, *std::min_element(acc.begin(), acc.end()), acc.size(),
               static_cast<long long>(d.result.test_size));
  }
  int kinds_seen = 0;
  for (const auto& d : res.detection) kinds_seen += d.attack_mode == AttackMode::output;
  report(12, "decoder-side detection", detected && kinds_seen == 2, det + "output attack", 0.0);
}

// ------------------------------------------------------------------ 8
void transfer_criterion(const std::vector<TransferRecord>& records, double secs) {
  std::map<AttackMode, std::pair<int, int>> counts;
  for (const auto& r : records) {
    auto& [higher, n] = counts[r.mode];
    higher += r.t_re_transfer > r.t_re_victim;
    ++n;
  }
  bool pass = counts.size() == 2;
  std::string detail;
  for (const auto& [mode, hn] : counts) {
    pass &= hn.first >= 0.8 * hn.second;
    detail += fmt("%s %d/%d pairs; ", to_string(mode), hn.first, hn.second);
  }
  report(8, "transfer degradation", pass, detail + "transfer T-RE above victim T-RE", secs);
}

// ------------------------------------------------------------------ 10
void semantic_criterion(const Classifier& cls, const Dataset& data, const AttackStageResult& res) {
  const double clean_acc = accuracy(cls, data.test);
  std::map<AttackMode, SemanticReport> sem;
  for (AttackMode mode : {AttackMode::latent, AttackMode::output}) {
    std::vector<Points> recon;
    std::vector<int> src, tgt;
    for (const auto& r : res.targeted.at(mode)) {
      recon.push_back(r.reconstruction);
      src.push_back(r.source_class);
      tgt.push_back(r.target_class);
    }
    sem[mode] = semantic_eval(cls, recon, src, tgt);
  }
  const auto& out = sem.at(AttackMode::output);
  const auto& lat = sem.at(AttackMode::latent);
  report(10, "semantic side-effect",
         clean_acc >= 0.9 && out.hit_target > lat.hit_target && out.avoid_source > 0.6,
         fmt("clean accuracy %.3f; hit-target output %.3f vs latent %.3f; avoid-source output %.3f", clean_acc,
             out.hit_target, lat.hit_target, out.avoid_source),
         0.0);
}

// ------------------------------------------------------------------ 11
std::map<std::string, std::string> report_files(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    std::ifstream f(e.path(), std::ios::binary);
    out[fs::relative(e.path(), dir).string()] = {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
  }
  return out;
}

void full_pipeline(const Experiment& exp) {
  run_gen_data(exp);
  run_train_ae(exp);
  run_train_classifier(exp);
  AttackStageOptions opt;
  opt.untargeted = true;
  opt.lambda_sweep = true;
  run_attack_stage(exp, opt);
  run_defend_stage(exp);
  run_transfer_stage(exp);
  run_calibration_stage(exp, exp.config().calibration_k, calibration_deltas(exp.config()));
  run_interpolate_stage(exp, AttackMode::output, 0, {0.0, 0.5, 1.0});
  run_report_stage(exp);
}

void determinism(const fs::path& smoke_config, const fs::path& work) {
  const auto start = Clock::now();
  std::map<std::string, std::string> files[2];
  std::string hash;
  for (int run = 0; run < 2; ++run) {
    ExperimentConfig c = load_config(smoke_config);
    c.output_directory = work / ("determinism-" + std::to_string(run));
    c.threads = run == 0 ? 1 : 2;  // thread count must not change results
    fs::remove_all(c.output_directory);
    const Experiment exp(c);
    full_pipeline(exp);
    files[run] = report_files(exp.path("report"));
    hash = exp.hash();
  }
  std::size_t differing = 0;
  for (const auto& [name, bytes] : files[0]) {
    const auto it = files[1].find(name);
    differing += it == files[1].end() || it->second != bytes;
  }
  differing += files[1].size() - std::min(files[1].size(), files[0].size());
  std::size_t csv = 0;
  for (const auto& [name, bytes] : files[0]) csv += name.ends_with(".csv");
  report(11, "determinism", differing == 0 && csv > 0,
         fmt("%zu report files (%zu CSV) compared across 1- and 2-thread runs of exp-%s, %zu differ", files[0].size(),
             csv, hash.c_str(), differing),
         seconds_since(start));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  std::string config = std::string(PCADV_SOURCE_DIR) + "/configs/desk.json";
  std::string smoke = std::string(PCADV_SOURCE_DIR) + "/configs/smoke.json";
  std::string work = "acceptance-run";
  bool reuse = false;
  unsigned threads = 0;
  app.add_option("--config", config, "Desk experiment config")->capture_default_str();
  app.add_option("--smoke-config", smoke, "Config for the determinism runs")->capture_default_str();
  app.add_option("--work-dir", work, "Where experiment directories are created")->capture_default_str();
  app.add_option("-j,--threads", threads, "Worker threads (default: config value)");
  app.add_flag("--reuse", reuse, "Reuse artifacts of a previous run in the work directory");
  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig c = load_config(config);
    c.output_directory = fs::path(work) / "desk";
    if (threads > 0) c.threads = threads;
    const Experiment exp(c, &std::cerr);
    const bool have = reuse && fs::exists(exp.path("attacks/output-lambda-" + fs::path(fmt("%g", c.lambda_sweep.back())).string() + "/pairs.json"));
    if (!reuse) fs::remove_all(exp.dir());
    std::printf("experiment %s (%s)\n", exp.dir().c_str(), have ? "reusing artifacts" : "fresh run");

    auto t0 = Clock::now();
    if (!have) {
      run_gen_data(exp);
      run_train_ae(exp);
      run_train_classifier(exp);
    }
    std::printf("data and models ready [%.1f s]\n", seconds_since(t0));
    const Dataset data = load_experiment_data(exp);
    const AEModel model = load_victim(exp);
    const std::vector<PoolEntry> pool = make_pool(model, data.test);
    const std::uint64_t frozen_hash = parameter_hash(model);

    gradient_correctness(model, pool);
    oracle_equivalence();
    critical_set(model, data.num_classes);

    t0 = Clock::now();
    AttackStageResult attacks;
    if (have) {
      for (AttackMode mode : {AttackMode::latent, AttackMode::output}) {
        attacks.targeted[mode] = load_attack_set(exp.path("attacks") / attack_set_name(mode));
        attacks.untargeted[mode] = load_attack_set(exp.path("attacks") / attack_set_name(mode, true));
      }
      for (double l : c.lambda_sweep) {
        attacks.tradeoff[l] = load_attack_set(exp.path("attacks") / attack_set_name(AttackMode::output, false, l));
      }
    } else {
      AttackStageOptions opt;
      opt.untargeted = true;
      opt.lambda_sweep = true;
      attacks = run_attack_stage(exp, opt);
    }
    attack_criteria(model, attacks, seconds_since(t0), !have);

    t0 = Clock::now();
    const DefendStageResult defended = run_defend_stage(exp);
    defense_criteria(defended, data, c, seconds_since(t0), true);

    t0 = Clock::now();
    const auto transfer = run_transfer_stage(exp);
    transfer_criterion(transfer, seconds_since(t0));

    const auto classifier = load_experiment_classifier(exp);
    if (classifier) {
      semantic_criterion(*classifier, data, attacks);
    } else {
      report(10, "semantic side-effect", false, "classifier checkpoint missing", 0.0);
    }

    determinism(smoke, fs::path(work));

    if (parameter_hash(load_victim(exp)) != frozen_hash) {
      std::printf("note: victim parameters changed during the run\n");
    }
    run_report_stage(exp);
  } catch (const std::exception& e) {
    std::printf("FAIL  acceptance aborted: %s\n", e.what());
    return 2;
  }

  std::sort(verdicts.begin(), verdicts.end(), [](const Verdict& a, const Verdict& b) { return a.id < b.id; });
  int failed = 0;
  std::printf("\nsummary\n");
  for (const auto& v : verdicts) {
    std::printf("%s  %2d  %s\n", v.pass ? "PASS" : "FAIL", v.id, v.name.c_str());
    failed += !v.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(verdicts.size()) - failed, verdicts.size());
  return failed == 0 && verdicts.size() == 12 ? 0 : 1;
}
