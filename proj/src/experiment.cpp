#include "pcadv/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "pcadv/checkpoint.hpp"
#include "pcadv/error.hpp"
#include "pcadv/metrics.hpp"

namespace pcadv {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------- config IO

class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      if constexpr (std::is_same_v<T, std::optional<double>>) {
        out = it->is_null() ? std::nullopt : std::optional<double>(it->template get<double>());
      } else if constexpr (std::is_same_v<T, fs::path>) {
        out = it->template get<std::string>();
      } else {
        if constexpr (std::is_integral_v<T> && !std::is_same_v<T, bool>) {
          if (!it->is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
        }
        out = it->template get<T>();
      }
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  template <class T, class Parse>
  void get_enum(const char* key, T& out, Parse parse) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return;
    if (!it->is_string()) throw ConfigError(where(key) + ": expected a string");
    try {
      out = parse(it->template get<std::string>());
    } catch (const ConfigError& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return std::nullopt;
    return Section(*it, where(key));
  }

  void finish() const {
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError(where(it.key()) + ": unknown key");
    }
  }

  std::string where(const std::string& key) const { return path_ + "." + key; }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_training(Section s, TrainConfig& t) {
  s.get("epochs", t.epochs);
  s.get("batch_size", t.batch_size);
  s.get("lr", t.lr);
  s.get("seed", t.seed);
  s.finish();
  if (t.epochs < 1) throw ConfigError(s.where("epochs") + ": must be >= 1");
  if (t.batch_size < 1) throw ConfigError(s.where("batch_size") + ": must be >= 1");
  if (!(t.lr > 0.0)) throw ConfigError(s.where("lr") + ": must be positive");
}

json training_json(const TrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch_size", t.batch_size}, {"lr", t.lr}, {"seed", t.seed}};
}

json optional_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json to_json(const ExperimentConfig& c, bool with_outputs) {
  json j;
  j["dataset"] = {{"classes", c.dataset.num_classes},
                  {"per_class", c.dataset.per_class},
                  {"points", c.dataset.points},
                  {"seed", c.dataset.seed},
                  {"train_fraction", c.dataset.train_fraction},
                  {"validation_fraction", c.dataset.validation_fraction},
                  {"test_fraction", c.dataset.test_fraction}};
  j["ae"] = {{"width_factor", c.ae.width_factor},
             {"latent", c.ae.latent},
             {"seed", c.ae.seed},
             {"transfer_seed", c.transfer_seed},
             {"training", training_json(c.ae_training)}};
  j["classifier"] = {{"point_widths", c.classifier.point_widths},
                     {"head_widths", c.classifier.head_widths},
                     {"seed", c.classifier.seed},
                     {"training", training_json(c.classifier_training)}};
  const AttackConfig& a = c.attack;
  j["attack"] = {{"mode", to_string(a.mode)},
                 {"lambda", optional_json(a.lambda)},
                 {"steps", a.steps},
                 {"lr", a.lr},
                 {"keep_best_from", a.keep_best_from},
                 {"candidates", a.candidates},
                 {"distance", to_string(a.distance)},
                 {"beta", a.beta},
                 {"selection", to_string(a.selection)},
                 {"rebalance", a.rebalance},
                 {"gamma", a.gamma},
                 {"seed", a.seed},
                 {"sources_per_class", c.sources_per_class},
                 {"source_classes", c.source_classes},
                 {"target_classes", c.target_classes},
                 {"lambda_sweep", c.lambda_sweep}};
  j["defense"] = {{"kind", to_string(c.defense.kind)},
                  {"k", c.defense.k},
                  {"delta", optional_json(c.defense.delta)},
                  {"calibration_k", c.calibration_k},
                  {"calibration_delta", c.calibration_delta},
                  {"detection_training", training_json(c.detection_training)},
                  {"detection_repeats", c.detection_repeats}};
  if (with_outputs) {
    j["outputs"] = {{"directory", c.output_directory.string()},
                    {"format", c.format == CloudFormat::ply_ascii ? "ply" : "xyz"},
                    {"threads", c.threads}};
  }
  return j;
}

void check_classes(const std::vector<int>& classes, int count, const std::string& where) {
  for (int c : classes) {
    if (c < 0 || c >= count) throw ConfigError(where + ": class " + std::to_string(c) + " outside the dataset");
  }
}

std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------- file helpers

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

// Round-trip exact; used where a stored value is read back.
std::string exact(double v) {
  if (std::isnan(v)) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string label_of(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InvalidInput("cannot write " + path.string());
  out << text;
  if (!out) throw InvalidInput("write failed for " + path.string());
}

const fs::path& prepared(const fs::path& path) {
  fs::create_directories(path.parent_path());
  return path;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidInput("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw ParseError(path.string(), 0, e.what());
  }
}

class Csv {
 public:
  explicit Csv(std::initializer_list<std::string> header) {
    row_of(std::vector<std::string>(header));
  }
  Csv& row(std::vector<std::string> cells) {
    row_of(cells);
    return *this;
  }
  const std::string& text() const noexcept { return text_; }
  void save(const fs::path& path) const { write_text(path, text_); }

 private:
  void row_of(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) text_ += (i ? "," : "") + cells[i];
    text_ += '\n';
  }
  std::string text_;
};

std::string pair_dir(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "pair_%03zu", i);
  return buf;
}

void save_points(const Points& p, const fs::path& base, CloudFormat format) {
  fs::create_directories(base.parent_path());
  save_cloud(PointCloud(p), base.string() + extension(format), format);
}

std::vector<int> all_classes(int count) {
  std::vector<int> out(static_cast<std::size_t>(count));
  std::iota(out.begin(), out.end(), 0);
  return out;
}

Csv attack_csv(const std::vector<AttackResult>& results) {
  Csv csv{"source_class", "target_class", "OS", "S_CD", "T_RE", "T_NRE", "r"};
  for (const auto& r : results) {
    const MetricRecord& m = r.metrics;
    csv.row({std::to_string(r.source_class), std::to_string(r.target_class), std::to_string(m.os), num(m.s_cd),
             num(m.t_re), num(m.t_nre), num(m.r)});
  }
  return csv;
}

TrainConfig with_threads(TrainConfig t, unsigned threads) {
  t.threads = threads;
  return t;
}

std::vector<PoolEntry> select_sources(const ExperimentConfig& c, const std::vector<PoolEntry>& pool) {
  const std::vector<int> classes = c.source_classes.empty() ? all_classes(c.dataset.num_classes) : c.source_classes;
  std::vector<PoolEntry> out;
  for (int cls : classes) {
    Index taken = 0;
    for (const auto& e : pool) {
      if (e.label == cls && taken < c.sources_per_class) {
        out.push_back(e);
        ++taken;
      }
    }
    if (taken < c.sources_per_class) {
      throw ConfigError("attack.sources_per_class: class " + std::to_string(cls) + " has only " +
                        std::to_string(taken) + " test instances");
    }
  }
  return out;
}

const std::vector<AttackMode> kModes{AttackMode::latent, AttackMode::output};

}  // namespace

// ---------------------------------------------------------------- config

ExperimentConfig parse_config(const std::string& text, const std::string& origin) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(origin + ": invalid JSON: " + e.what());
  }
  ExperimentConfig c;
  Section top(root, origin);

  if (auto s = top.sub("dataset")) {
    s->get("classes", c.dataset.num_classes);
    s->get("per_class", c.dataset.per_class);
    s->get("points", c.dataset.points);
    s->get("seed", c.dataset.seed);
    s->get("train_fraction", c.dataset.train_fraction);
    s->get("validation_fraction", c.dataset.validation_fraction);
    s->get("test_fraction", c.dataset.test_fraction);
    s->finish();
  }
  if (auto s = top.sub("ae")) {
    s->get("width_factor", c.ae.width_factor);
    s->get("latent", c.ae.latent);
    s->get("seed", c.ae.seed);
    s->get("transfer_seed", c.transfer_seed);
    if (auto t = s->sub("training")) read_training(*t, c.ae_training);
    s->finish();
  }
  if (auto s = top.sub("classifier")) {
    s->get("point_widths", c.classifier.point_widths);
    s->get("head_widths", c.classifier.head_widths);
    s->get("seed", c.classifier.seed);
    if (auto t = s->sub("training")) read_training(*t, c.classifier_training);
    s->finish();
  }
  if (auto s = top.sub("attack")) {
    AttackConfig& a = c.attack;
    s->get_enum("mode", a.mode, parse_attack_mode);
    s->get("lambda", a.lambda);
    s->get("steps", a.steps);
    s->get("lr", a.lr);
    s->get("keep_best_from", a.keep_best_from);
    s->get("candidates", a.candidates);
    s->get_enum("distance", a.distance, parse_distance_loss);
    s->get("beta", a.beta);
    s->get_enum("selection", a.selection, parse_target_selection);
    s->get("rebalance", a.rebalance);
    s->get("gamma", a.gamma);
    s->get("seed", a.seed);
    s->get("sources_per_class", c.sources_per_class);
    s->get("source_classes", c.source_classes);
    s->get("target_classes", c.target_classes);
    s->get("lambda_sweep", c.lambda_sweep);
    s->finish();
  }
  if (auto s = top.sub("defense")) {
    s->get_enum("kind", c.defense.kind, parse_defense_kind);
    s->get("k", c.defense.k);
    s->get("delta", c.defense.delta);
    s->get("calibration_k", c.calibration_k);
    s->get("calibration_delta", c.calibration_delta);
    if (auto t = s->sub("detection_training")) read_training(*t, c.detection_training);
    s->get("detection_repeats", c.detection_repeats);
    s->finish();
  }
  if (auto s = top.sub("outputs")) {
    s->get("directory", c.output_directory);
    s->get_enum("format", c.format, [](const std::string& name) {
      try {
        return parse_cloud_format(name);
      } catch (const InvalidInput& e) {
        throw ConfigError(e.what());
      }
    });
    s->get("threads", c.threads);
    s->finish();
  }
  top.finish();

  // Cross-field checks.
  if (c.dataset.num_classes < 2 || c.dataset.num_classes > static_cast<int>(shape_classes().size())) {
    throw ConfigError(origin + ".dataset.classes: must lie in [2, " + std::to_string(shape_classes().size()) + "]");
  }
  if (c.dataset.per_class < 1) throw ConfigError(origin + ".dataset.per_class: must be >= 1");
  if (c.dataset.points < 8) throw ConfigError(origin + ".dataset.points: must be >= 8");
  if (c.detection_repeats < 1) throw ConfigError(origin + ".defense.detection_repeats: must be >= 1");
  {
    const auto& d = c.dataset;
    if (d.train_fraction <= 0.0 || d.validation_fraction < 0.0 || d.test_fraction <= 0.0 ||
        std::abs(d.train_fraction + d.validation_fraction + d.test_fraction - 1.0) > 1e-9) {
      throw ConfigError(origin + ".dataset.train_fraction: split fractions must be non-negative and sum to 1");
    }
  }
  if (!(c.ae.width_factor > 0.0)) throw ConfigError(origin + ".ae.width_factor: must be positive");
  if (c.ae.latent < 1) throw ConfigError(origin + ".ae.latent: must be >= 1");
  if (c.classifier.point_widths.empty()) throw ConfigError(origin + ".classifier.point_widths: must be non-empty");
  c.ae.points = c.dataset.points;
  c.classifier.num_classes = c.dataset.num_classes;
  try {
    c.attack.validate();
    c.defense.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  if (c.sources_per_class < 1) throw ConfigError(origin + ".attack.sources_per_class: must be >= 1");
  check_classes(c.source_classes, c.dataset.num_classes, origin + ".attack.source_classes");
  check_classes(c.target_classes, c.dataset.num_classes, origin + ".attack.target_classes");
  for (double l : c.lambda_sweep) {
    if (!(l >= 0.0)) throw ConfigError(origin + ".attack.lambda_sweep: values must be >= 0");
  }
  for (Index k : c.calibration_k) {
    if (k < 1) throw ConfigError(origin + ".defense.calibration_k: values must be >= 1");
  }
  for (double d : c.calibration_delta) {
    if (!(d > 0.0)) throw ConfigError(origin + ".defense.calibration_delta: values must be positive");
  }
  if (c.threads < 1) throw ConfigError(origin + ".outputs.threads: must be >= 1");
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return parse_config(read_text(path), path.string());
}

std::string to_json_text(const ExperimentConfig& config) { return to_json(config, true).dump(2) + "\n"; }

std::string config_hash(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(to_json(config, false).dump())));
  return buf;
}

std::vector<double> calibration_deltas(const ExperimentConfig& config) {
  if (!config.calibration_delta.empty()) return config.calibration_delta;
  const double scale = default_delta(config.dataset.points) / kReferenceDelta;
  return {0.03 * scale, 0.04 * scale, 0.05 * scale, 0.06 * scale};
}

// ---------------------------------------------------------------- experiment

Experiment::Experiment(ExperimentConfig config, std::ostream* log)
    : config_(std::move(config)), hash_(config_hash(config_)), dir_(config_.output_directory / ("exp-" + hash_)),
      log_(log) {
  fs::create_directories(dir_);
  write_text(dir_ / "config.json", to_json_text(config_));
}

fs::path Experiment::require(const fs::path& relative, const std::string& producer) const {
  const fs::path p = dir_ / relative;
  if (!fs::exists(p)) {
    throw DependencyError("missing artifact " + p.string() + "; run '" + producer + "' first");
  }
  return p;
}

void Experiment::note(const std::string& message) const {
  if (log_) *log_ << "[" << hash_.substr(0, 8) << "] " << message << std::endl;
}

// ---------------------------------------------------------------- data

Dataset run_gen_data(const Experiment& exp) {
  const ExperimentConfig& c = exp.config();
  Dataset data = make_dataset(c.dataset);
  json manifest;
  manifest["num_classes"] = data.num_classes;
  manifest["points"] = c.dataset.points;
  const std::pair<const char*, const std::vector<Instance>*> splits[] = {
      {"train", &data.train}, {"validation", &data.validation}, {"test", &data.test}};
  for (const auto& [name, instances] : splits) {
    fs::create_directories(exp.path("data") / name);
    json list = json::array();
    for (const auto& inst : *instances) {
      const std::string file = std::string(name) + "/" + std::to_string(inst.id) + extension(c.format);
      save_cloud(inst.cloud, exp.path("data") / file, c.format);
      list.push_back({{"id", inst.id}, {"label", inst.label()}, {"file", file}});
    }
    manifest["splits"][name] = std::move(list);
  }
  write_text(exp.path("data/manifest.json"), manifest.dump(2) + "\n");
  exp.note("generated " + std::to_string(data.train.size() + data.validation.size() + data.test.size()) +
           " clouds in " + exp.path("data").string());
  return data;
}

Dataset load_experiment_data(const Experiment& exp) {
  const json manifest = read_json(exp.require("data/manifest.json", "gen-data"));
  Dataset data;
  data.num_classes = manifest.at("num_classes").get<int>();
  for (auto [name, target] : {std::pair{"train", &data.train}, std::pair{"validation", &data.validation},
                              std::pair{"test", &data.test}}) {
    for (const auto& item : manifest.at("splits").at(name)) {
      const fs::path file = exp.require(fs::path("data") / item.at("file").get<std::string>(), "gen-data");
      PointCloud cloud = load_cloud(file, format_from_extension(file));
      cloud.set_label(item.at("label").get<int>());
      target->push_back({item.at("id").get<Index>(), std::move(cloud)});
    }
  }
  return data;
}

// ---------------------------------------------------------------- training

AETrainReport run_train_ae(const Experiment& exp) {
  const ExperimentConfig& c = exp.config();
  const Dataset data = load_experiment_data(exp);
  AEModel model(c.ae);
  Csv log{"epoch", "train_loss", "validation_cd"};
  const AETrainReport rep =
      train_ae(model, data, with_threads(c.ae_training, c.threads), [&](Index e, double loss, double val) {
        log.row({std::to_string(e), num(loss), num(val)});
        if (e % 10 == 0 || e == c.ae_training.epochs) {
          exp.note("ae epoch " + std::to_string(e) + " loss " + num(loss) + " validation CD " + num(val));
        }
      });
  log.save(exp.path("logs/ae_epochs.csv"));
  save_checkpoint(model, prepared(exp.path("models/ae.ckpt")));
  json summary{{"validation_cd_initial", rep.validation_cd.front()},
               {"validation_cd_final", rep.validation_cd.back()},
               {"warnings", rep.warnings}};
  write_text(exp.path("logs/ae_training.json"), summary.dump(2) + "\n");
  return rep;
}

AEModel load_victim(const Experiment& exp) {
  return load_checkpoint(exp.require("models/ae.ckpt", "train-ae"), exp.config().dataset.points);
}

ClassifierTrainReport run_train_classifier(const Experiment& exp) {
  const ExperimentConfig& c = exp.config();
  const Dataset data = load_experiment_data(exp);
  Classifier classifier(c.classifier);
  Csv log{"epoch", "train_loss", "validation_accuracy"};
  const ClassifierTrainReport rep = train_classifier(
      classifier, data, with_threads(c.classifier_training, c.threads), [&](Index e, double loss, double val) {
        log.row({std::to_string(e), num(loss), num(val)});
      });
  log.save(exp.path("logs/classifier_epochs.csv"));
  save_classifier(classifier, prepared(exp.path("models/classifier.ckpt")));
  json summary{{"test_accuracy", rep.test_accuracy}, {"warnings", rep.warnings}};
  write_text(exp.path("logs/classifier_training.json"), summary.dump(2) + "\n");
  exp.note("classifier test accuracy " + num(rep.test_accuracy));
  return rep;
}

std::optional<Classifier> load_experiment_classifier(const Experiment& exp) {
  const fs::path p = exp.path("models/classifier.ckpt");
  if (!fs::exists(p)) return std::nullopt;
  return load_classifier(p);
}

// ---------------------------------------------------------------- attack sets

std::string attack_set_name(AttackMode mode, bool untargeted, std::optional<double> lambda) {
  std::string name = to_string(mode);
  if (untargeted) name += "-untargeted";
  if (lambda) name += "-lambda-" + label_of(*lambda);
  return name;
}

void save_attack_set(const fs::path& dir, const std::vector<AttackResult>& results, CloudFormat format) {
  fs::create_directories(dir);
  json pairs = json::array();
  for (std::size_t i = 0; i < results.size(); ++i) {
    const AttackResult& r = results[i];
    const fs::path base = dir / pair_dir(i);
    save_points(r.source, base / "source", format);
    save_points(r.target, base / "target", format);
    save_points(r.perturbation, base / "perturbation", format);
    save_points(r.adversarial, base / "adversarial", format);
    save_points(r.reconstruction, base / "reconstruction", format);
    Csv trace{"iteration", "total", "adversarial", "distance"};
    for (std::size_t it = 0; it < r.trace.total.size(); ++it) {
      trace.row({std::to_string(it), exact(r.trace.total[it]), exact(r.trace.adversarial[it]),
                 exact(r.trace.distance[it])});
    }
    trace.save(base / "trace.csv");
    pairs.push_back({{"dir", pair_dir(i)},
                     {"format", format == CloudFormat::ply_ascii ? "ply" : "xyz"},
                     {"source_id", r.source_id},
                     {"target_id", r.target_id},
                     {"source_class", r.source_class},
                     {"target_class", r.target_class},
                     {"mode", to_string(r.mode)},
                     {"lambda", r.lambda},
                     {"rebalance_factor", r.rebalance_factor},
                     {"best_iteration", r.best_iteration},
                     {"best_adversarial_loss", r.best_adversarial_loss},
                     {"source_self_error", r.source_self_error},
                     {"target_self_error", r.target_self_error},
                     {"candidate_rank", r.candidate_rank},
                     {"aborted", r.aborted},
                     {"abort_reason", r.abort_reason}});
  }
  write_text(dir / "pairs.json", json{{"pairs", pairs}}.dump(2) + "\n");
}

LossTrace read_trace(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DependencyError("missing artifact " + path.string() + "; run 'attack' first");
  LossTrace t;
  std::string line;
  std::size_t number = 1;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    ++number;
    if (line.empty()) continue;
    std::stringstream row(line);
    std::string cell;
    double v[4];
    for (double& x : v) {
      if (!std::getline(row, cell, ',')) throw ParseError(path.string(), number, "short trace row");
      x = std::strtod(cell.c_str(), nullptr);
    }
    t.total.push_back(v[1]);
    t.adversarial.push_back(v[2]);
    t.distance.push_back(v[3]);
  }
  return t;
}

std::vector<AttackResult> load_attack_set(const fs::path& dir) {
  const fs::path index = dir / "pairs.json";
  if (!fs::exists(index)) throw DependencyError("missing artifact " + index.string() + "; run 'attack' first");
  const json root = read_json(index);
  std::vector<AttackResult> out;
  for (const auto& p : root.at("pairs")) {
    AttackResult r;
    const CloudFormat format = parse_cloud_format(p.at("format").get<std::string>());
    const fs::path base = dir / p.at("dir").get<std::string>();
    auto cloud = [&](const char* name) {
      return load_cloud(base / (std::string(name) + extension(format)), format).points();
    };
    r.source = cloud("source");
    r.target = cloud("target");
    r.perturbation = cloud("perturbation");
    r.adversarial = cloud("adversarial");
    r.reconstruction = cloud("reconstruction");
    r.source_id = p.at("source_id").get<Index>();
    r.target_id = p.at("target_id").get<Index>();
    r.source_class = p.at("source_class").get<int>();
    r.target_class = p.at("target_class").get<int>();
    r.mode = parse_attack_mode(p.at("mode").get<std::string>());
    r.lambda = p.at("lambda").get<double>();
    r.rebalance_factor = p.at("rebalance_factor").get<double>();
    r.best_iteration = p.at("best_iteration").get<Index>();
    r.best_adversarial_loss = p.at("best_adversarial_loss").get<double>();
    r.source_self_error = p.at("source_self_error").get<double>();
    r.target_self_error = p.at("target_self_error").get<double>();
    r.candidate_rank = p.at("candidate_rank").get<Index>();
    r.aborted = p.at("aborted").get<bool>();
    r.abort_reason = p.at("abort_reason").get<std::string>();
    r.trace = read_trace(base / "trace.csv");
    r.metrics = recompute_metrics(r);
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------- attack stage

AttackStageResult run_attack_stage(const Experiment& exp, const AttackStageOptions& options) {
  const ExperimentConfig& c = exp.config();
  const AEModel model = load_victim(exp);
  const Dataset data = load_experiment_data(exp);
  const std::optional<Classifier> classifier = load_experiment_classifier(exp);
  const TargetSelection selection = options.selection.value_or(c.attack.selection);
  if (selection == TargetSelection::geometric_classifier && !classifier) {
    exp.require("models/classifier.ckpt", "train-classifier");
  }

  const std::vector<PoolEntry> pool = make_pool(model, data.test);
  const std::vector<PoolEntry> sources = select_sources(c, pool);
  const std::vector<int> classes = c.target_classes.empty() ? all_classes(data.num_classes) : c.target_classes;
  const SweepOptions sweep_options{classifier ? &*classifier : nullptr, c.threads};

  AttackStageResult out;
  for (AttackMode mode : options.modes) {
    AttackConfig ac = c.attack;
    ac.mode = mode;
    ac.selection = selection;
    exp.note(std::string("attack ") + to_string(mode) + ": " + std::to_string(sources.size()) + " sources, K=" +
             std::to_string(ac.candidates));
    SweepResult sweep = targeted_sweep(model, sources, pool, classes, ac, sweep_options);
    save_attack_set(exp.path("attacks") / attack_set_name(mode), sweep.best, c.format);
    attack_csv(sweep.best).save(exp.path("reports") / ("attack_" + std::string(to_string(mode)) + ".csv"));
    if (options.untargeted) {
      std::vector<AttackResult> u = untargeted_from(sweep.best);
      save_attack_set(exp.path("attacks") / attack_set_name(mode, true), u, c.format);
      attack_csv(u).save(exp.path("reports") / ("attack_" + attack_set_name(mode, true) + ".csv"));
      out.untargeted[mode] = std::move(u);
    }
    out.targeted[mode] = std::move(sweep.best);
  }

  if (options.lambda_sweep) {
    out.tradeoff_mode = c.attack.mode;
    Csv csv{"lambda", "source_class", "target_class", "OS", "S_CD", "T_RE", "T_NRE"};
    std::vector<double> lambdas, s_cd, t_re;
    for (double lambda : options.lambdas.empty() ? c.lambda_sweep : options.lambdas) {
      if (!(lambda >= 0.0)) throw ConfigError("lambda sweep values must be >= 0");
      AttackConfig ac = c.attack;
      ac.lambda = lambda;
      ac.candidates = 1;
      ac.selection = TargetSelection::geometric;
      exp.note("lambda sweep " + label_of(lambda));
      SweepResult sweep = targeted_sweep(model, sources, pool, classes, ac, sweep_options);
      save_attack_set(exp.path("attacks") / attack_set_name(ac.mode, false, lambda), sweep.best, c.format);
      for (const auto& r : sweep.best) {
        csv.row({num(lambda), std::to_string(r.source_class), std::to_string(r.target_class),
                 std::to_string(r.metrics.os), num(r.metrics.s_cd), num(r.metrics.t_re), num(r.metrics.t_nre)});
        lambdas.push_back(lambda);
        s_cd.push_back(r.metrics.s_cd);
        t_re.push_back(r.metrics.t_re);
      }
      out.tradeoff[lambda] = std::move(sweep.best);
    }
    csv.save(exp.path("reports") / ("tradeoff_" + std::string(to_string(out.tradeoff_mode)) + ".csv"));
    Csv summary{"statistic", "value"};
    summary.row({"spearman_lambda_S_CD", num(spearman(lambdas, s_cd))});
    summary.row({"spearman_lambda_T_RE", num(spearman(lambdas, t_re))});
    summary.save(exp.path("reports") / ("tradeoff_" + std::string(to_string(out.tradeoff_mode)) + "_summary.csv"));
  }
  return out;
}

// ---------------------------------------------------------------- defense stage

DefendStageResult run_defend_stage(const Experiment& exp, const std::vector<DefenseKind>& kinds, bool detect) {
  const ExperimentConfig& c = exp.config();
  const AEModel model = load_victim(exp);
  const std::optional<Classifier> classifier = load_experiment_classifier(exp);
  const Classifier* cls = classifier ? &*classifier : nullptr;

  std::map<AttackMode, std::vector<AttackResult>> sets;
  for (AttackMode mode : kModes) {
    const fs::path dir = exp.path("attacks") / attack_set_name(mode);
    if (fs::exists(dir / "pairs.json")) sets[mode] = load_attack_set(dir);
  }
  if (sets.empty()) exp.require(fs::path("attacks") / attack_set_name(c.attack.mode) / "pairs.json", "attack");

  // Clean inputs: every distinct source that was attacked.
  std::vector<DefenseInput> clean;
  std::map<Index, std::size_t> clean_slot;
  for (const auto& [mode, results] : sets) {
    for (const auto& r : results) {
      if (clean_slot.emplace(r.source_id, clean.size()).second) {
        clean.push_back({r.source, r.source, r.source_class, r.source_self_error});
      }
    }
  }

  DefendStageResult out;
  Csv csv{"attack_mode", "defense_kind", "S_RE_before", "S_RE_after", "S_NRE_before", "S_NRE_after",
          "S_RCA_before", "S_RCA_after"};
  Csv pairs{"attack_mode", "defense_kind", "source_class", "removed", "S_RE_before", "S_RE_after", "S_NRE_before",
            "S_NRE_after"};
  auto record = [&](const std::string& mode_name, DefenseKind kind, DefenseSummary summary) {
    csv.row({mode_name, to_string(kind), num(summary.s_re_before), num(summary.s_re_after), num(summary.s_nre_before),
             num(summary.s_nre_after), num(summary.s_rca_before), num(summary.s_rca_after)});
    for (std::size_t i = 0; i < summary.records.size(); ++i) {
      const DefenseRecord& r = summary.records[i];
      pairs.row({mode_name, to_string(kind), std::to_string(r.source_label), std::to_string(r.removed),
                 num(r.s_re_before), num(r.s_re_after), num(r.s_nre_before), num(r.s_nre_after)});
      const fs::path base = exp.path("defense") / (mode_name + "-" + to_string(kind)) / pair_dir(i);
      save_points(r.defended, base / "defended", c.format);
      save_points(r.reconstruction_after, base / "reconstruction", c.format);
    }
    out.rows.push_back({mode_name, kind, std::move(summary)});
  };

  // Detection contrasts adversarial reconstructions with those of distinct
  // clean clouds: the whole test split.
  std::vector<DefenseInput> clean_pool;
  if (detect) clean_pool = clean_inputs(make_pool(model, load_experiment_data(exp).test));

  for (DefenseKind kind : kinds) {
    DefenseConfig dc = c.defense;
    dc.kind = kind;
    exp.note(std::string("defense ") + to_string(kind));
    record("clean", kind, evaluate_defense(model, clean, dc, cls, c.threads));
    std::vector<Points> clean_recon;
    if (detect) {
      for (auto& r : evaluate_defense(model, clean_pool, dc, nullptr, c.threads).records) {
        clean_recon.push_back(std::move(r.reconstruction_after));
      }
    }
    for (const auto& [mode, results] : sets) {
      record(to_string(mode), kind, evaluate_defense(model, defense_inputs(results), dc, cls, c.threads));
      if (!detect) continue;
      std::vector<Points> adv_recon;
      for (const auto& r : out.rows.back().summary.records) adv_recon.push_back(r.reconstruction_after);
      ClassifierConfig detector = c.classifier;
      detector.num_classes = 2;
      DetectionSplit split;
      split.repeats = c.detection_repeats;
      try {
        out.detection.push_back(
            {mode, kind,
             detect_attack(clean_recon, adv_recon, detector, with_threads(c.detection_training, c.threads), split)});
      } catch (const InvalidInput& e) {
        exp.note(std::string("detection skipped: ") + e.what());
      }
    }
  }
  csv.save(exp.path("reports/defense.csv"));
  pairs.save(exp.path("reports/defense_pairs.csv"));
  if (detect) {
    Csv det{"attack_mode", "defense_kind", "test_accuracy", "min_test_accuracy", "validation_accuracy",
            "repeats",     "train_size",   "test_size"};
    for (const auto& d : out.detection) {
      const auto& acc = d.result.repeat_accuracy;
      det.row({to_string(d.attack_mode), to_string(d.kind), num(d.result.test_accuracy),
               num(*std::min_element(acc.begin(), acc.end())), num(d.result.validation_accuracy),
               std::to_string(acc.size()), std::to_string(d.result.train_size), std::to_string(d.result.test_size)});
    }
    det.save(exp.path("reports/detection.csv"));
  }
  return out;
}

// ---------------------------------------------------------------- transfer

std::vector<TransferRecord> run_transfer_stage(const Experiment& exp) {
  const ExperimentConfig& c = exp.config();
  const AEModel victim = load_victim(exp);
  std::map<AttackMode, std::vector<AttackResult>> sets;
  for (AttackMode mode : kModes) {
    const fs::path dir = exp.path("attacks") / attack_set_name(mode);
    if (fs::exists(dir / "pairs.json")) sets[mode] = load_attack_set(dir);
  }
  if (sets.empty()) exp.require(fs::path("attacks") / attack_set_name(c.attack.mode) / "pairs.json", "attack");

  const fs::path ckpt = exp.path("models/ae_transfer.ckpt");
  std::optional<AEModel> transfer;
  if (fs::exists(ckpt)) {
    transfer = load_checkpoint(ckpt, c.dataset.points);
    exp.note("reusing " + ckpt.string());
  } else {
    const Dataset data = load_experiment_data(exp);
    Csv log{"epoch", "train_loss", "validation_cd"};
    TransferTraining t = train_transfer_ae(c.ae, c.transfer_seed, data, with_threads(c.ae_training, c.threads),
                                           [&](Index e, double loss, double val) {
                                             log.row({std::to_string(e), num(loss), num(val)});
                                           });
    for (const auto& w : t.report.warnings) exp.note(w);
    log.save(exp.path("logs/ae_transfer_epochs.csv"));
    save_checkpoint(t.model, prepared(ckpt));
    transfer = std::move(t.model);
  }

  std::vector<TransferRecord> out;
  Csv csv{"attack_mode", "source_class", "target_class", "T_RE_victim", "T_RE_transfer", "T_NRE_victim",
          "T_NRE_transfer"};
  for (const auto& [mode, results] : sets) {
    for (const auto& r : results) {
      TransferRecord rec{mode, r.source_class, r.target_class, r.metrics.t_re, 0.0, r.metrics.t_nre, 0.0};
      rec.t_re_transfer = chamfer(reconstruct(*transfer, r.adversarial), r.target);
      rec.t_nre_transfer = t_nre_with(rec.t_re_transfer, reconstruction_error(*transfer, r.target));
      csv.row({to_string(mode), std::to_string(rec.source_class), std::to_string(rec.target_class),
               num(rec.t_re_victim), num(rec.t_re_transfer), num(rec.t_nre_victim), num(rec.t_nre_transfer)});
      out.push_back(rec);
    }
  }
  csv.save(exp.path("reports/transfer.csv"));
  return out;
}

// ---------------------------------------------------------------- calibration

CalibrationGrid run_calibration_stage(const Experiment& exp, const std::vector<Index>& ks,
                                      const std::vector<double>& deltas, AttackMode mode) {
  const AEModel model = load_victim(exp);
  const auto results = load_attack_set(exp.path("attacks") / attack_set_name(mode));
  const CalibrationGrid grid = calibrate_surface_defense(model, defense_inputs(results), ks, deltas, exp.config().threads);
  Csv csv{"k", "delta", "S_NRE_after", "failures", "mean_removed", "best"};
  for (std::size_t i = 0; i < grid.cells.size(); ++i) {
    const CalibrationCell& cell = grid.cells[i];
    csv.row({std::to_string(cell.k), num(cell.delta), num(cell.s_nre_after), std::to_string(cell.failures),
             num(cell.mean_removed), static_cast<Index>(i) == grid.best ? "1" : "0"});
  }
  csv.save(exp.path("reports/calibration.csv"));
  json best = nullptr;
  if (grid.best >= 0) {
    const CalibrationCell& cell = grid.cells[grid.best];
    best = {{"k", cell.k}, {"delta", cell.delta}, {"S_NRE_after", cell.s_nre_after}};
  }
  write_text(exp.path("reports/calibration_best.json"),
             json{{"attack_mode", to_string(mode)}, {"best", best}}.dump(2) + "\n");
  return grid;
}

// ---------------------------------------------------------------- interpolation

std::vector<EvolutionFrame> run_interpolate_stage(const Experiment& exp, AttackMode mode, Index pair,
                                                  const std::vector<double>& alphas) {
  const AEModel model = load_victim(exp);
  const auto results = load_attack_set(exp.path("attacks") / attack_set_name(mode));
  if (pair < 0 || pair >= static_cast<Index>(results.size())) {
    throw InvalidInput("interpolate: pair " + std::to_string(pair) + " outside [0, " + std::to_string(results.size()) +
                       ")");
  }
  const AttackResult& r = results[pair];
  auto frames = interpolate_evolution(r.source, r.adversarial, model, alphas);
  const fs::path base = exp.path("interpolation") / (attack_set_name(mode) + "-" + pair_dir(pair));
  Csv csv{"alpha", "CD_input_source", "CD_reconstruction_source", "CD_reconstruction_target"};
  for (const auto& f : frames) {
    save_points(f.blended, base / ("alpha_" + label_of(f.alpha) + "_input"), exp.config().format);
    save_points(f.reconstruction, base / ("alpha_" + label_of(f.alpha) + "_reconstruction"), exp.config().format);
    csv.row({num(f.alpha), num(chamfer(f.blended, r.source)), num(chamfer(f.reconstruction, r.source)),
             num(chamfer(f.reconstruction, r.target))});
  }
  csv.save(base / "evolution.csv");
  return frames;
}

// ---------------------------------------------------------------- report

ReportSummary run_report_stage(const Experiment& exp) {
  const ExperimentConfig& c = exp.config();
  ReportSummary rep;
  std::map<std::string, std::vector<AttackResult>> sets;
  for (AttackMode mode : kModes) {
    for (bool untargeted : {false, true}) {
      const std::string name = attack_set_name(mode, untargeted);
      if (fs::exists(exp.path("attacks") / name / "pairs.json")) {
        sets[name] = load_attack_set(exp.path("attacks") / name);
      }
    }
  }
  if (sets.empty()) exp.require(fs::path("attacks") / attack_set_name(c.attack.mode) / "pairs.json", "attack");

  const fs::path out = exp.path("report");
  auto emit = [&](const std::string& name, const Csv& csv) {
    csv.save(out / name);
    rep.written.push_back("report/" + name);
  };

  Csv summary{"attack_set", "pairs", "aborted", "OS", "S_CD_x1e3", "T_RE_x1e3", "T_NRE", "rebalanced"};
  std::size_t rebalanced_total = 0;
  for (const auto& [name, results] : sets) {
    emit("attack_" + name + ".csv", attack_csv(results));
    double os = 0, scd = 0, tre = 0, tnre = 0;
    std::size_t aborted = 0, rebalanced = 0;
    for (const auto& r : results) {
      os += static_cast<double>(r.metrics.os);
      scd += r.metrics.s_cd;
      tre += r.metrics.t_re;
      tnre += r.metrics.t_nre;
      aborted += r.aborted;
      rebalanced += r.rebalance_factor != 1.0;
    }
    const double n = std::max<double>(1.0, static_cast<double>(results.size()));
    summary.row({name, std::to_string(results.size()), std::to_string(aborted), num(os / n), num(1e3 * scd / n),
                 num(1e3 * tre / n), num(tnre / n), std::to_string(rebalanced)});
    rebalanced_total += rebalanced;
  }
  emit("summary.csv", summary);

  Csv semantic{"attack_mode", "hit_target", "avoid_source", "count"};
  if (const auto classifier = load_experiment_classifier(exp)) {
    for (AttackMode mode : kModes) {
      const auto it = sets.find(attack_set_name(mode));
      if (it == sets.end()) continue;
      std::vector<Points> recon;
      std::vector<int> src, tgt;
      for (const auto& r : it->second) {
        recon.push_back(r.reconstruction);
        src.push_back(r.source_class);
        tgt.push_back(r.target_class);
      }
      const SemanticReport s = semantic_eval(*classifier, recon, src, tgt);
      semantic.row({to_string(mode), num(s.hit_target), num(s.avoid_source), std::to_string(s.count)});
      std::string header = "target_class";
      for (Index col = 0; col < s.confusion.cols(); ++col) header += ",predicted_" + std::to_string(col);
      std::string text = header + "\n";
      for (Index row = 0; row < s.confusion.rows(); ++row) {
        text += std::to_string(row);
        for (Index col = 0; col < s.confusion.cols(); ++col) text += "," + num(s.confusion(row, col));
        text += "\n";
      }
      write_text(out / ("semantic_confusion_" + std::string(to_string(mode)) + ".csv"), text);
      rep.written.push_back("report/semantic_confusion_" + std::string(to_string(mode)) + ".csv");
    }
  } else {
    rep.missing.push_back("semantic: models/classifier.ckpt absent (run train-classifier)");
  }
  emit("semantic.csv", semantic);

  auto carry = [&](const std::string& name, const Csv& empty, const std::string& producer) {
    const fs::path src = exp.path("reports") / name;
    if (fs::exists(src)) {
      write_text(out / name, read_text(src));
      rep.written.push_back("report/" + name);
    } else {
      emit(name, empty);
      rep.missing.push_back(name + ": not produced yet (run " + producer + ")");
    }
  };
  carry("transfer.csv",
        Csv{"attack_mode", "source_class", "target_class", "T_RE_victim", "T_RE_transfer", "T_NRE_victim",
            "T_NRE_transfer"},
        "transfer-eval");
  carry("defense.csv",
        Csv{"attack_mode", "defense_kind", "S_RE_before", "S_RE_after", "S_NRE_before", "S_NRE_after",
            "S_RCA_before", "S_RCA_after"},
        "defend");
  carry("calibration.csv", Csv{"k", "delta", "S_NRE_after", "failures", "mean_removed", "best"},
        "calibrate-defense");
  carry("detection.csv",
        Csv{"attack_mode", "defense_kind", "test_accuracy", "min_test_accuracy", "validation_accuracy", "repeats",
            "train_size", "test_size"},
        "defend");
  for (AttackMode mode : kModes) {
    for (const std::string name : {"tradeoff_" + std::string(to_string(mode)) + ".csv",
                                   "tradeoff_" + std::string(to_string(mode)) + "_summary.csv"}) {
      if (fs::exists(exp.path("reports") / name)) {
        write_text(out / name, read_text(exp.path("reports") / name));
        rep.written.push_back("report/" + name);
      }
    }
  }

  rep.deviations = {
      "batch normalization omitted from encoder, decoder and classifier",
      "procedural synthetic shapes replace ShapeNet classes",
      "desk-scale sizes: n=" + std::to_string(c.dataset.points) + ", classes=" + std::to_string(c.dataset.num_classes) +
          ", latent m=" + std::to_string(c.ae.latent) + ", width factor " + num(c.ae.width_factor),
      "transfer model is the same architecture with a different initialization",
      "Adam beta2 = 0.999 and eps = 1e-8 (only the learning rate and momentum 0.9 are published)",
      "latent attack keeps the iterate with the lowest latent loss; adversarial points are not clamped",
      "surface defense threshold " +
          (c.defense.delta ? num(*c.defense.delta) : "scaled to point density: " + num(default_delta(c.dataset.points))),
      "lambda rebalance events: " + std::to_string(rebalanced_total),
  };
  json header{{"config_hash", exp.hash()},
              {"version", kVersion},
              {"seeds",
               {{"dataset", c.dataset.seed},
                {"ae", c.ae.seed},
                {"transfer", c.transfer_seed},
                {"classifier", c.classifier.seed},
                {"attack", c.attack.seed}}},
              {"deviations", rep.deviations},
              {"missing", rep.missing},
              {"files", rep.written}};
  write_text(out / "header.json", header.dump(2) + "\n");
  exp.note("report written to " + out.string());
  return rep;
}

// ---------------------------------------------------------------- statistics

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeMismatch("spearman: samples differ in length");
  const std::size_t n = x.size();
  if (n < 2) return std::numeric_limits<double>::quiet_NaN();
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace pcadv
