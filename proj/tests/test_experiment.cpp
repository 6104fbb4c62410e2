#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "pcadv/experiment.hpp"

using namespace pcadv;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "pcadv_experiment" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string("\"") + PCADV_CLI + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(Config, EmptyObjectGivesDefaults) {
  const ExperimentConfig c = parse_config("{}");
  EXPECT_EQ(c.attack.steps, 500);
  EXPECT_EQ(c.attack.keep_best_from, 400);
  EXPECT_EQ(c.defense.k, 2);
  EXPECT_EQ(c.dataset.train_fraction, 0.85);
  EXPECT_EQ(c.ae.points, c.dataset.points);
}

TEST(Config, ErrorsNameTheOffendingKey) {
  EXPECT_NE(config_error(R"({"attack": {"stepz": 3}})").find("stepz"), std::string::npos);
  EXPECT_NE(config_error(R"({"atack": {}})").find("atack"), std::string::npos);
  EXPECT_NE(config_error(R"({"attack": {"steps": 2.5}})").find("steps"), std::string::npos);
  EXPECT_NE(config_error(R"({"attack": {"mode": "sideways"}})").find("sideways"), std::string::npos);
  EXPECT_NE(config_error(R"({"attack": {"keep_best_from": 600}})").find("keep_best_from"), std::string::npos);
  EXPECT_NE(config_error(R"({"dataset": {"classes": 9}})").find("classes"), std::string::npos);
  EXPECT_FALSE(config_error(R"({"dataset": {"train_fraction": 0.5}})").empty());
  EXPECT_FALSE(config_error("{not json").empty());
  EXPECT_THROW(load_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, CanonicalRoundTrip) {
  const std::string text = slurp(fs::path(PCADV_SOURCE_DIR) / "configs" / "desk.json");
  const ExperimentConfig c = parse_config(text);
  const std::string canon = to_json_text(c);
  EXPECT_EQ(to_json_text(parse_config(canon)), canon);
  EXPECT_EQ(config_hash(parse_config(canon)), config_hash(c));
}

TEST(Config, HashIgnoresOutputsOnly) {
  ExperimentConfig a = parse_config("{}");
  ExperimentConfig b = a;
  b.output_directory = "elsewhere";
  b.threads = 4;
  b.format = CloudFormat::ply_ascii;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.attack.seed = 99;
  EXPECT_NE(config_hash(a), config_hash(b));
  const Experiment exp(a);
  EXPECT_EQ(exp.dir(), fs::path("runs") / ("exp-" + config_hash(a)));
}

TEST(Config, CalibrationDeltasFollowDensity) {
  ExperimentConfig c = parse_config(R"({"dataset": {"points": 2048}})");
  const auto d = calibration_deltas(c);
  ASSERT_EQ(d.size(), 4u);
  EXPECT_NEAR(d[1], default_delta(2048), 1e-15);
  c.calibration_delta = {0.1, 0.2};
  EXPECT_EQ(calibration_deltas(c), (std::vector<double>{0.1, 0.2}));
}

TEST(Experiment, MissingArtifactNamesProducer) {
  ExperimentConfig c = parse_config("{}");
  c.output_directory = scratch_dir("deps");
  const Experiment exp(c);
  try {
    exp.require("models/ae.ckpt", "train-ae");
    FAIL() << "expected DependencyError";
  } catch (const DependencyError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("models/ae.ckpt"), std::string::npos);
    EXPECT_NE(what.find("train-ae"), std::string::npos);
  }
  EXPECT_THROW(load_victim(exp), DependencyError);
  EXPECT_THROW(run_attack_stage(exp), DependencyError);
  EXPECT_FALSE(load_experiment_classifier(exp).has_value());
}

TEST(Experiment, AttackSetNames) {
  EXPECT_EQ(attack_set_name(AttackMode::output), "output");
  EXPECT_EQ(attack_set_name(AttackMode::latent, true), "latent-untargeted");
  EXPECT_EQ(attack_set_name(AttackMode::output, false, 0.5), "output-lambda-0.5");
}

TEST(Experiment, StagesPersistAndReload) {
  ExperimentConfig c = parse_config(slurp(fs::path(PCADV_SOURCE_DIR) / "configs" / "smoke.json"));
  c.output_directory = scratch_dir("stages");
  c.attack.steps = 10;
  c.attack.keep_best_from = 5;
  const Experiment exp(c);

  const Dataset d = run_gen_data(exp);
  const Dataset again = load_experiment_data(exp);
  ASSERT_EQ(again.test.size(), d.test.size());
  for (std::size_t i = 0; i < d.test.size(); ++i) {
    EXPECT_EQ(again.test[i].id, d.test[i].id);
    EXPECT_EQ(again.test[i].label(), d.test[i].label());
    EXPECT_TRUE(again.test[i].cloud.points() == d.test[i].cloud.points());
  }

  run_train_ae(exp);
  const AEModel victim = load_victim(exp);
  EXPECT_TRUE(victim.frozen());

  AttackStageOptions opt;
  opt.modes = {AttackMode::output};
  const auto res = run_attack_stage(exp, opt);
  const auto& stored = res.targeted.at(AttackMode::output);
  ASSERT_EQ(stored.size(), 4u);  // 2 sources x 2 target classes

  const auto loaded = load_attack_set(exp.path("attacks/output"));
  ASSERT_EQ(loaded.size(), stored.size());
  for (std::size_t i = 0; i < stored.size(); ++i) {
    EXPECT_TRUE(loaded[i].adversarial == stored[i].adversarial);
    EXPECT_TRUE(loaded[i].perturbation == stored[i].perturbation);
    EXPECT_EQ(loaded[i].trace.total, stored[i].trace.total);
    const MetricRecord m = recompute_metrics(loaded[i]);
    EXPECT_NEAR(m.r, stored[i].metrics.r, 1e-9);
    EXPECT_NEAR(m.t_nre, stored[i].metrics.t_nre, 1e-9);
    EXPECT_EQ(m.os, stored[i].metrics.os);
  }

  const auto frames = run_interpolate_stage(exp, AttackMode::output, 1, {0.0, 1.0});
  EXPECT_TRUE(frames.back().blended == stored[1].adversarial);
  EXPECT_THROW(run_interpolate_stage(exp, AttackMode::output, 9, {0.0}), InvalidInput);
  EXPECT_THROW(run_interpolate_stage(exp, AttackMode::latent, 0, {0.0}), DependencyError);
}

TEST(Cli, SmokePipeline) {
  const fs::path dir = scratch_dir("cli");
  const fs::path cfg = dir / "config.json";
  std::ofstream(cfg) << slurp(fs::path(PCADV_SOURCE_DIR) / "configs" / "smoke.json");
  const std::string common = "-c \"" + cfg.string() + "\" -o \"" + (dir / "runs").string() + "\"";
  const fs::path log = dir / "log.txt";

  EXPECT_EQ(run_cli("attack " + common, log), 3) << slurp(log);
  EXPECT_NE(slurp(log).find("train-ae"), std::string::npos) << slurp(log);

  for (const std::string step : {"gen-data", "train-ae", "train-classifier", "attack --untargeted",
                                 "attack --mode output --lambda-sweep 0.5,2", "defend", "transfer-eval",
                                 "calibrate-defense", "interpolate --pair 0", "report"}) {
    ASSERT_EQ(run_cli(step + " " + common, log), 0) << step << "\n" << slurp(log);
  }

  const ExperimentConfig c = load_config(cfg);
  const fs::path exp = dir / "runs" / ("exp-" + config_hash(c));
  for (const char* f : {"config.json", "models/ae.ckpt", "models/classifier.ckpt", "attacks/output/pairs.json",
                        "attacks/latent-untargeted/pairs.json", "attacks/output-lambda-2/pairs.json",
                        "report/summary.csv", "report/defense.csv", "report/transfer.csv", "report/calibration.csv",
                        "report/header.json", "report/semantic.csv", "reports/tradeoff_output.csv"}) {
    EXPECT_TRUE(fs::exists(exp / f)) << f;
  }
  const std::string header = slurp(exp / "report/header.json");
  EXPECT_NE(header.find(config_hash(c)), std::string::npos);
  EXPECT_NE(header.find("deviations"), std::string::npos);

  std::ofstream(dir / "bad.json") << R"({"attack": {"bogus": 1}})";
  EXPECT_EQ(run_cli("gen-data -c \"" + (dir / "bad.json").string() + "\"", log), 2);
  EXPECT_NE(slurp(log).find("bogus"), std::string::npos);
}
