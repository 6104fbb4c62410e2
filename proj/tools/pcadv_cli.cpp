#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pcadv/error.hpp"
#include "pcadv/experiment.hpp"

using namespace pcadv;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDependency = 3;

template <class T>
std::vector<T> parse_list(const std::string& text, const char* flag) {
  std::vector<T> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream cell(item);
    T value{};
    if (!(cell >> value) || !(cell >> std::ws).eof()) {
      throw ConfigError(std::string(flag) + ": cannot parse '" + item + "'");
    }
    out.push_back(value);
  }
  if (out.empty()) throw ConfigError(std::string(flag) + ": empty list");
  return out;
}

std::vector<AttackMode> parse_modes(const std::string& text) {
  if (text == "both") return {AttackMode::latent, AttackMode::output};
  return {parse_attack_mode(text)};
}

struct Common {
  std::string config;
  std::string output_dir;
  unsigned threads = 0;
  std::string format;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Experiment config (JSON)")->required();
  cmd->add_option("-o,--output-dir", c.output_dir, "Override outputs.directory");
  cmd->add_option("-j,--threads", c.threads, "Worker threads (overrides outputs.threads)");
  cmd->add_option("--format", c.format, "Cloud file format: xyz or ply");
}

Experiment open_experiment(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (!c.output_dir.empty()) cfg.output_directory = c.output_dir;
  if (c.threads > 0) cfg.threads = c.threads;
  if (!c.format.empty()) cfg.format = parse_cloud_format(c.format);
  return Experiment(std::move(cfg), &std::cerr);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Geometric adversarial attacks and defenses on point-cloud autoencoders"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic shape dataset");
  auto* train_ae_cmd = app.add_subcommand("train-ae", "Train the victim autoencoder");
  auto* train_cls = app.add_subcommand("train-classifier", "Train the shape classifier");
  auto* attack = app.add_subcommand("attack", "Run the targeted attack sweep");
  auto* defend = app.add_subcommand("defend", "Apply defenses to stored attacks and clean sources");
  auto* transfer = app.add_subcommand("transfer-eval", "Score adversarial examples on a differently seeded AE");
  auto* calibrate = app.add_subcommand("calibrate-defense", "Grid search over surface-defense k and delta");
  auto* interp = app.add_subcommand("interpolate", "Export the source-to-adversarial evolution");
  auto* report = app.add_subcommand("report", "Collect all report tables");
  for (auto* cmd : {gen, train_ae_cmd, train_cls, attack, defend, transfer, calibrate, interp, report}) {
    add_common(cmd, common);
  }

  std::string mode = "both";
  bool untargeted = false;
  std::string lambda_sweep;
  std::string selection;
  attack->add_option("--mode", mode, "latent, output or both")->capture_default_str();
  attack->add_flag("--untargeted", untargeted, "Also keep the best class per source");
  attack->add_option("--lambda-sweep", lambda_sweep, "Comma-separated lambdas for the trade-off sweep");
  attack->add_option("--selection", selection, "geometric, geometric+classifier, random or latent-space");

  std::string kinds = "both";
  bool no_detect = false;
  defend->add_option("--kind", kinds, "surface, critical or both")->capture_default_str();
  defend->add_flag("--no-detect", no_detect, "Skip the decoder-side detection experiment");

  std::string ks, deltas, calib_mode = "output";
  calibrate->add_option("--k", ks, "Comma-separated neighbor counts");
  calibrate->add_option("--delta", deltas, "Comma-separated thresholds");
  calibrate->add_option("--mode", calib_mode, "Attack set to calibrate on")->capture_default_str();

  std::string interp_mode = "output", alphas = "0,0.25,0.5,0.75,1";
  Index pair = 0;
  interp->add_option("--mode", interp_mode, "Attack set")->capture_default_str();
  interp->add_option("--pair", pair, "Pair index within the attack set")->capture_default_str();
  interp->add_option("--alphas", alphas, "Comma-separated blend weights")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    const Experiment exp = open_experiment(common);
    if (gen->parsed()) {
      run_gen_data(exp);
    } else if (train_ae_cmd->parsed()) {
      const auto rep = run_train_ae(exp);
      std::cout << "validation CD " << rep.validation_cd.front() << " -> " << rep.validation_cd.back() << "\n";
    } else if (train_cls->parsed()) {
      std::cout << "test accuracy " << run_train_classifier(exp).test_accuracy << "\n";
    } else if (attack->parsed()) {
      AttackStageOptions opt;
      opt.modes = parse_modes(mode);
      opt.untargeted = untargeted;
      if (!lambda_sweep.empty()) {
        opt.lambda_sweep = true;
        opt.lambdas = parse_list<double>(lambda_sweep, "--lambda-sweep");
      }
      if (!selection.empty()) opt.selection = parse_target_selection(selection);
      run_attack_stage(exp, opt);
    } else if (defend->parsed()) {
      std::vector<DefenseKind> list;
      if (kinds == "both") {
        list = {DefenseKind::surface, DefenseKind::critical};
      } else {
        list = {parse_defense_kind(kinds)};
      }
      run_defend_stage(exp, list, !no_detect);
    } else if (transfer->parsed()) {
      run_transfer_stage(exp);
    } else if (calibrate->parsed()) {
      const auto k_list = ks.empty() ? exp.config().calibration_k : parse_list<Index>(ks, "--k");
      const auto d_list = deltas.empty() ? calibration_deltas(exp.config()) : parse_list<double>(deltas, "--delta");
      const auto grid = run_calibration_stage(exp, k_list, d_list, parse_attack_mode(calib_mode));
      if (grid.best >= 0) {
        std::cout << "best k=" << grid.cells[grid.best].k << " delta=" << grid.cells[grid.best].delta
                  << " S-NRE after=" << grid.cells[grid.best].s_nre_after << "\n";
      } else {
        std::cout << "no grid cell kept every input non-empty\n";
      }
    } else if (interp->parsed()) {
      run_interpolate_stage(exp, parse_attack_mode(interp_mode), pair, parse_list<double>(alphas, "--alphas"));
    } else if (report->parsed()) {
      const auto rep = run_report_stage(exp);
      for (const auto& f : rep.written) std::cout << (exp.dir() / f).string() << "\n";
      for (const auto& m : rep.missing) std::cerr << "note: " << m << "\n";
    }
    std::cout << exp.dir().string() << "\n";
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DependencyError& e) {
    std::cerr << "dependency error: " << e.what() << "\n";
    return kExitDependency;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return 0;
}
