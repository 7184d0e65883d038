// SPDX-License-Identifier: Apache-2.0
#pragma once

// Config-driven experiment runs: JSON config parsing, the run directory
// layout, the run/probe/analyze/pretrain pipelines, and report aggregation.

#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "ilab/engine.hpp"
#include "ilab/errors.hpp"
#include "ilab/geometry.hpp"
#include "ilab/parallel.hpp"
#include "ilab/probe.hpp"
#include "ilab/stream.hpp"
#include "ilab/transformer.hpp"

namespace ilab {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr int kCsvFormatVersion = 1;
inline constexpr int kConfigFormatVersion = 1;

// ---- config -----------------------------------------------------------------

struct StreamSource {
  bool synthetic = true;
  SyntheticSpec spec;
  std::string train_path;
  std::string test_path;
  TaskAssignment assignment;
  IngestOptions ingest;
};

struct PretrainSettings {
  bool enabled = false;
  std::size_t total_steps = 2048;
  std::vector<std::size_t> schedule;  // empty: {0, 16, 128, 1024, total}
  PretrainConfig optimizer;
  std::size_t corpus_sequences = 1024;
  std::size_t corpus_words = 14;
  std::size_t branching = 4;

  std::vector<std::size_t> resolved_schedule() const {
    if (!schedule.empty()) return schedule;
    std::vector<std::size_t> s;
    for (std::size_t k : {0, 16, 128, 1024})
      if (k < total_steps) s.push_back(k);
    s.push_back(total_steps);
    return s;
  }
};

struct AnalysisSettings {
  bool probing = true;
  bool geometry = true;
  bool histograms = true;
  bool cosine_matrices = false;
  std::size_t pair_cap = kDefaultPairCap;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;  // seed sweep; empty means {seed}
  std::string output_dir;
  Scenario scenario = Scenario::CIL;
  StreamSource stream;
  BackboneConfig backbone;
  bool backbone_vocab_set = false;
  bool backbone_length_set = false;
  PretrainSettings pretrain;
  std::vector<std::string> presets = {"SEQ(Lin)"};
  json strategy_overrides = json::object();
  ProbeConfig probe;
  std::vector<HeadKind> probe_kinds = {kAllHeadKinds.begin(), kAllHeadKinds.end()};
  AnalysisSettings analysis;
  std::string raw;  // the exact bytes parsed

  std::vector<std::uint64_t> resolved_seeds() const { return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds; }
};

namespace detail {

/// Strict object reader: every key must be consumed before finish().
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ValidationError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!j_.contains(key)) return fallback;
    used_.insert(key);
    try {
      return j_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ValidationError(field(key) + ": wrong type");
    }
  }

  template <class T>
  T require(const std::string& key) {
    if (!j_.contains(key)) throw ValidationError(field(key) + ": missing");
    return get<T>(key, T{});
  }

  const json* child(const std::string& key) {
    if (!j_.contains(key)) return nullptr;
    used_.insert(key);
    return &j_.at(key);
  }

  std::string field(const std::string& key) const { return path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ValidationError(field(it.key()) + ": unknown key");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

inline std::size_t positive(std::size_t v, const std::string& field) {
  if (v == 0) throw ValidationError(field + ": must be positive");
  return v;
}

inline void parse_stream(const json& j, RunConfig& c) {
  ObjectReader r(j, "stream");
  const json* syn = r.child("synthetic");
  const json* files = r.child("files");
  r.finish();
  if (!!syn == !!files) throw ValidationError("stream: exactly one of 'synthetic' or 'files' is required");
  if (syn) {
    ObjectReader s(*syn, "stream.synthetic");
    auto& p = c.stream.spec;
    p.n_tasks = positive(s.get<std::size_t>("n_tasks", p.n_tasks), s.field("n_tasks"));
    p.classes_per_task = positive(s.get<std::size_t>("classes_per_task", p.classes_per_task), s.field("classes_per_task"));
    p.train_per_class = positive(s.get<std::size_t>("train_per_class", p.train_per_class), s.field("train_per_class"));
    p.test_per_class = positive(s.get<std::size_t>("test_per_class", p.test_per_class), s.field("test_per_class"));
    p.vocab_size = positive(s.get<std::size_t>("vocab_size", p.vocab_size), s.field("vocab_size"));
    p.separation = s.get<double>("separation", p.separation);
    if (!(p.separation > 0.0 && p.separation <= 1.0)) throw ValidationError(s.field("separation") + ": must lie in (0, 1]");
    p.signature_tokens = positive(s.get<std::size_t>("signature_tokens", p.signature_tokens), s.field("signature_tokens"));
    p.min_words = positive(s.get<std::size_t>("min_words", p.min_words), s.field("min_words"));
    p.max_words = s.get<std::size_t>("max_words", p.max_words);
    if (p.max_words < p.min_words) throw ValidationError(s.field("max_words") + ": below min_words");
    s.finish();
    c.stream.synthetic = true;
  } else {
    ObjectReader f(*files, "stream.files");
    c.stream.synthetic = false;
    c.stream.train_path = f.require<std::string>("train");
    c.stream.test_path = f.require<std::string>("test");
    try {
      c.stream.ingest.format = parse_text_format(f.get<std::string>("format", "tsv"));
    } catch (const Error& e) {
      throw ValidationError(f.field("format") + ": " + e.what());
    }
    c.stream.ingest.max_words = positive(f.get<std::size_t>("max_words", c.stream.ingest.max_words), f.field("max_words"));
    c.stream.ingest.max_vocab = f.get<std::size_t>("max_vocab", 0);
    c.stream.assignment.classes_per_task = f.get<std::size_t>("classes_per_task", 0);
    if (const json* tasks = f.child("tasks")) {
      try {
        const auto lists = tasks->get<std::vector<std::vector<std::string>>>();
        for (std::size_t t = 0; t < lists.size(); ++t)
          for (const auto& label : lists[t]) c.stream.assignment.explicit_tasks[label] = t;
      } catch (const json::exception&) {
        throw ValidationError(f.field("tasks") + ": expected a list of label lists");
      }
    }
    if (c.stream.assignment.explicit_tasks.empty() && c.stream.assignment.classes_per_task == 0)
      throw ValidationError("stream.files: one of 'tasks' or 'classes_per_task' is required");
    f.finish();
  }
}

inline void parse_backbone(const json& j, RunConfig& c) {
  ObjectReader r(j, "backbone");
  auto& b = c.backbone;
  b.n_layers = positive(r.get<std::size_t>("n_layers", b.n_layers), r.field("n_layers"));
  b.d_model = positive(r.get<std::size_t>("d_model", b.d_model), r.field("d_model"));
  b.n_heads = positive(r.get<std::size_t>("n_heads", b.n_heads), r.field("n_heads"));
  b.d_ff = positive(r.get<std::size_t>("d_ff", b.d_ff), r.field("d_ff"));
  c.backbone_vocab_set = r.has("vocab_size");
  b.vocab_size = positive(r.get<std::size_t>("vocab_size", b.vocab_size), r.field("vocab_size"));
  c.backbone_length_set = r.has("max_seq_len");
  b.max_seq_len = positive(r.get<std::size_t>("max_seq_len", b.max_seq_len), r.field("max_seq_len"));
  const auto attention = r.get<std::string>("attention", "causal");
  if (attention == "causal") b.attention_mode = AttentionMode::Causal;
  else if (attention == "bidirectional") b.attention_mode = AttentionMode::Bidirectional;
  else throw ValidationError(r.field("attention") + ": unsupported value '" + attention + "'");
  const auto feature = r.get<std::string>("feature", b.attention_mode == AttentionMode::Causal ? "last_token" : "first_token");
  if (feature == "last_token") b.feature_mode = FeatureMode::LastToken;
  else if (feature == "first_token") b.feature_mode = FeatureMode::FirstToken;
  else throw ValidationError(r.field("feature") + ": unsupported value '" + feature + "'");
  r.finish();
}

inline void parse_pretrain(const json& j, RunConfig& c) {
  ObjectReader r(j, "pretrain");
  auto& p = c.pretrain;
  p.enabled = r.get<bool>("enabled", true);
  p.total_steps = r.get<std::size_t>("steps", p.total_steps);
  p.schedule = r.get<std::vector<std::size_t>>("checkpoints", {});
  p.optimizer.learning_rate = r.get<double>("learning_rate", p.optimizer.learning_rate);
  p.optimizer.weight_decay = r.get<double>("weight_decay", p.optimizer.weight_decay);
  p.optimizer.batch_size = positive(r.get<std::size_t>("batch_size", p.optimizer.batch_size), r.field("batch_size"));
  p.corpus_sequences = positive(r.get<std::size_t>("corpus_sequences", p.corpus_sequences), r.field("corpus_sequences"));
  p.corpus_words = positive(r.get<std::size_t>("corpus_words", p.corpus_words), r.field("corpus_words"));
  p.branching = positive(r.get<std::size_t>("branching", p.branching), r.field("branching"));
  r.finish();
}

inline const std::set<std::string>& strategy_override_keys() {
  static const std::set<std::string> keys = {"epochs_per_task", "backbone_lr",      "head_lr",
                                             "weight_decay",    "batch_size",       "warmup_epochs",
                                             "replay_per_class", "cosine_scale",    "euclidean_prototypes",
                                             "current_task_loss_only"};
  return keys;
}

inline void parse_strategy(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("strategy: expected an object");
  json overrides = json::object();
  bool have_preset = false;
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() == "preset") {
      if (!it->is_string()) throw ValidationError("strategy.preset: expected a string");
      c.presets = {it->get<std::string>()};
      have_preset = true;
    } else if (it.key() == "presets") {
      if (it->is_string() && it->get<std::string>() == "all") {
        c.presets = preset_names();
      } else {
        try {
          c.presets = it->get<std::vector<std::string>>();
        } catch (const json::exception&) {
          throw ValidationError("strategy.presets: expected a list of preset names or \"all\"");
        }
      }
      if (have_preset) throw ValidationError("strategy: give either 'preset' or 'presets'");
      have_preset = true;
    } else if (strategy_override_keys().count(it.key())) {
      overrides[it.key()] = *it;
    } else {
      throw ValidationError("strategy." + it.key() + ": unknown key");
    }
  }
  if (c.presets.empty()) throw ValidationError("strategy.presets: empty");
  for (const auto& p : c.presets) {
    try {
      preset(p);
    } catch (const ValidationError& e) {
      throw ValidationError(std::string("strategy.preset: ") + e.what());
    }
  }
  c.strategy_overrides = overrides;
}

inline void parse_probe(const json& j, RunConfig& c) {
  ObjectReader r(j, "probe");
  auto& p = c.probe;
  p.epochs = r.get<std::size_t>("epochs", p.epochs);
  p.learning_rate = r.get<double>("learning_rate", p.learning_rate);
  p.batch_size = positive(r.get<std::size_t>("batch_size", p.batch_size), r.field("batch_size"));
  p.cosine_scale = r.get<double>("cosine_scale", p.cosine_scale);
  p.euclidean_prototypes = r.get<bool>("euclidean_prototypes", p.euclidean_prototypes);
  if (r.has("metrics")) {
    c.probe_kinds.clear();
    for (const auto& name : r.get<std::vector<std::string>>("metrics", {})) {
      try {
        c.probe_kinds.push_back(parse_head_kind(name));
      } catch (const ValidationError&) {
        throw ValidationError(r.field("metrics") + ": unsupported metric '" + name + "'");
      }
    }
    if (c.probe_kinds.empty()) throw ValidationError(r.field("metrics") + ": empty");
  }
  r.finish();
}

inline void parse_analysis(const json& j, RunConfig& c) {
  ObjectReader r(j, "analysis");
  auto& a = c.analysis;
  a.probing = r.get<bool>("probing", a.probing);
  a.geometry = r.get<bool>("geometry", a.geometry);
  a.histograms = r.get<bool>("histograms", a.histograms);
  a.cosine_matrices = r.get<bool>("cosine_matrices", a.cosine_matrices);
  a.pair_cap = positive(r.get<std::size_t>("pair_cap", a.pair_cap), r.field("pair_cap"));
  r.finish();
}

}  // namespace detail

inline RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ValidationError(std::string("config: not valid JSON: ") + e.what());
  }
  RunConfig c;
  c.raw = text;
  detail::ObjectReader r(j, "config");
  const int version = r.get<int>("format_version", kConfigFormatVersion);
  if (version != kConfigFormatVersion) throw ValidationError("config.format_version: unsupported value " + std::to_string(version));
  c.seed = r.get<std::uint64_t>("seed", 0);
  c.seeds = r.get<std::vector<std::uint64_t>>("seeds", {});
  c.output_dir = r.get<std::string>("output_dir", "");
  try {
    c.scenario = parse_scenario(r.get<std::string>("scenario", "CIL"));
  } catch (const ValidationError& e) {
    throw ValidationError(std::string("config.scenario: ") + e.what());
  }
  if (const json* s = r.child("stream")) detail::parse_stream(*s, c);
  if (const json* b = r.child("backbone")) detail::parse_backbone(*b, c);
  if (const json* p = r.child("pretrain")) detail::parse_pretrain(*p, c);
  if (const json* s = r.child("strategy")) detail::parse_strategy(*s, c);
  if (const json* p = r.child("probe")) detail::parse_probe(*p, c);
  if (const json* a = r.child("analysis")) detail::parse_analysis(*a, c);
  r.finish();
  c.stream.spec.scenario = c.scenario;
  c.stream.ingest.scenario = c.scenario;
  if (c.pretrain.enabled && c.backbone.attention_mode != AttentionMode::Causal)
    throw ValidationError("pretrain: causal-LM pre-training needs a causal backbone");
  return c;
}

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline RunConfig load_run_config(const std::string& path) { return parse_run_config(read_file(path)); }

/// Preset plus config overrides for a given backbone.
inline StrategyConfig resolve_strategy(const RunConfig& c, const std::string& name) {
  StrategyConfig s = preset(name, c.backbone.attention_mode);
  s.scenario = c.scenario;
  const json& o = c.strategy_overrides;
  auto take = [&](const char* key, auto& field) {
    if (!o.contains(key)) return;
    try {
      field = o.at(key).get<std::decay_t<decltype(field)>>();
    } catch (const json::exception&) {
      throw ValidationError(std::string("strategy.") + key + ": wrong type");
    }
  };
  take("epochs_per_task", s.epochs_per_task);
  take("backbone_lr", s.backbone_lr);
  take("head_lr", s.head_lr);
  take("weight_decay", s.weight_decay);
  take("batch_size", s.batch_size);
  if (s.warmup_epochs > 0) take("warmup_epochs", s.warmup_epochs);
  take("replay_per_class", s.replay_per_class);
  take("cosine_scale", s.cosine_scale);
  take("euclidean_prototypes", s.euclidean_prototypes);
  take("current_task_loss_only", s.current_task_loss_only);
  if (s.batch_size == 0) throw ValidationError("strategy.batch_size: must be positive");
  return s;
}

/// The task stream for a master seed (seeded components derive from it).
inline TaskStream build_stream(const RunConfig& c, std::uint64_t seed) {
  if (c.stream.synthetic) {
    SyntheticSpec spec = c.stream.spec;
    spec.seed = derive_seed(seed, "stream");
    return build_synthetic_stream(spec);
  }
  IngestOptions opts = c.stream.ingest;
  opts.ordering_seed = derive_seed(seed, "class-order");
  return load_stream(c.stream.train_path, c.stream.test_path, c.stream.assignment, opts);
}

/// Backbone config with vocabulary and length filled from the stream when
/// the config leaves them out.
inline BackboneConfig resolve_backbone(const RunConfig& c, const TaskStream& stream, std::uint64_t seed) {
  BackboneConfig b = c.backbone;
  if (!c.backbone_vocab_set) b.vocab_size = std::max(stream.vocab_size, kFirstWordToken + 1);
  if (!c.backbone_length_set) b.max_seq_len = std::max<std::size_t>(stream.max_length, 2);
  b.init_seed = derive_seed(seed, "backbone");
  validate(b);
  return b;
}

// ---- output layout ----------------------------------------------------------

struct OutputLayout {
  fs::path root;

  fs::path config() const { return root / "config.json"; }
  fs::path run_info() const { return root / "run.json"; }
  fs::path log() const { return root / "log.txt"; }
  fs::path results() const { return root / "results.csv"; }
  fs::path probing() const { return root / "probing.csv"; }
  fs::path pretrain_probing() const { return root / "pretrain_probing.csv"; }
  fs::path moving_distance() const { return root / "moving_distance.csv"; }
  fs::path norms() const { return root / "norms.csv"; }
  fs::path class_norms() const { return root / "class_norms.csv"; }
  fs::path histograms() const { return root / "histograms.csv"; }
  fs::path cosine_dir() const { return root / "cosine"; }
  fs::path snapshots() const { return root / "snapshots"; }
  fs::path backbone_at(std::size_t t) const { return snapshots() / ("backbone_t" + std::to_string(t) + ".ckpt"); }
  fs::path heads_at(std::size_t t) const { return snapshots() / ("heads_t" + std::to_string(t) + ".csv"); }
  fs::path features_at(std::size_t t, const char* split) const {
    return snapshots() / ("features_t" + std::to_string(t) + "_" + split + ".bin");
  }
  fs::path pretrain_checkpoint(std::size_t step) const {
    return snapshots() / ("pretrain_step" + std::to_string(step) + ".ckpt");
  }
  fs::path complete_marker() const { return root / "COMPLETE"; }
};

/// Run metadata stored next to the results of one (preset, seed) run.
struct RunInfo {
  std::string preset;
  std::uint64_t seed = 0;
};

inline void write_run_info(const OutputLayout& out, const RunInfo& info) {
  json j = {{"format_version", kCsvFormatVersion}, {"preset", info.preset}, {"seed", info.seed}};
  write_file(out.run_info(), j.dump(2) + "\n");
}

inline RunInfo read_run_info(const OutputLayout& out) {
  const json j = json::parse(read_file(out.run_info().string()));
  return {j.at("preset").get<std::string>(), j.at("seed").get<std::uint64_t>()};
}

/// Prepares a fresh run directory; a completed one needs `force`.
inline OutputLayout prepare_output(const fs::path& dir, bool force) {
  OutputLayout out{dir};
  if (fs::exists(out.complete_marker()) && !force)
    throw IoError("'" + dir.string() + "' already holds a completed run (use --force to overwrite)");
  std::error_code ec;
  fs::create_directories(out.snapshots(), ec);
  if (ec) throw IoError("cannot create '" + out.snapshots().string() + "': " + ec.message());
  fs::remove(out.complete_marker(), ec);
  return out;
}

// ---- logging ------------------------------------------------------------------

/// Appends timestamped lines to a run log and, optionally, to stderr.
class RunLog {
 public:
  RunLog(const fs::path& path, bool echo, bool append = false)
      : out_(path, append ? std::ios::app : std::ios::trunc), echo_(echo), start_(std::chrono::steady_clock::now()) {
    if (!out_) throw IoError("cannot write '" + path.string() + "'");
  }

  void operator()(const std::string& line) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    std::ostringstream os;
    os << "[" << std::fixed << std::setprecision(2) << t << "s] " << line;
    out_ << os.str() << '\n' << std::flush;
    if (echo_) {
      static std::mutex m;
      std::lock_guard<std::mutex> lock(m);
      std::cerr << os.str() << '\n';
    }
  }

  Logger logger() {
    return [this](const std::string& s) { (*this)(s); };
  }

 private:
  std::ofstream out_;
  bool echo_;
  std::chrono::steady_clock::time_point start_;
};

// ---- CSV writers --------------------------------------------------------------

namespace detail {

inline std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(12) << v;
  return os.str();
}

/// Quotes a field when it holds a delimiter or quote.
inline std::string field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) {
    if (ch == '"') q += '"';
    q += ch;
  }
  return q + "\"";
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline std::string results_csv(const ExperimentRecord& rec, Scenario scenario) {
  std::ostringstream os;
  os << "format_version,preset,seed,scenario,t,i,accuracy,A_t,A_bar\n";
  for (std::size_t t = 1; t <= rec.accuracy.tasks(); ++t)
    for (std::size_t i = 1; i <= t; ++i)
      os << kCsvFormatVersion << ',' << detail::field(rec.preset) << ',' << rec.seed << ',' << scenario_name(scenario)
         << ',' << t << ',' << i << ',' << detail::num(rec.accuracy.at(t, i)) << ','
         << detail::num(rec.average_accuracy[t - 1]) << ',' << detail::num(rec.avg_incremental_accuracy) << '\n';
  return os.str();
}

inline std::string probing_csv_header() { return "format_version,preset,seed,checkpoint,metric,task,a_prob,A_prob\n"; }

inline std::string probing_csv_rows(const std::vector<ProbeReport>& reps, const std::string& preset, std::uint64_t seed) {
  std::ostringstream os;
  for (const auto& r : reps)
    for (std::size_t i = 0; i < r.task_accuracy.size(); ++i)
      os << kCsvFormatVersion << ',' << detail::field(preset) << ',' << seed << ',' << r.tag << ','
         << head_kind_name(r.kind) << ',' << i + 1 << ',' << detail::num(r.task_accuracy[i]) << ','
         << detail::num(r.average) << '\n';
  return os.str();
}

/// Heads of a bank from its exported CSV.
inline ClassifierBank load_bank_csv(const std::string& path, Scenario scenario, std::size_t d_model, HeadKind kind,
                                    const LogitOptions& options) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line)) throw IoError("'" + path + "' is empty");
  ClassifierBank bank(scenario, d_model, options);
  std::map<std::size_t, std::vector<std::pair<std::size_t, std::vector<double>>>> rows;
  std::vector<std::size_t> order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = detail::split_csv_line(line);
    if (f.size() != 3 + d_model) throw IoError("'" + path + "': row width does not match d_model");
    const std::size_t task = std::stoull(f[1]) - 1;
    std::vector<double> w;
    for (std::size_t k = 0; k < d_model; ++k) w.push_back(std::stod(f[3 + k]));
    if (!rows.count(task)) order.push_back(task);
    rows[task].emplace_back(std::stoull(f[2]), std::move(w));
  }
  for (std::size_t task : order) {
    const auto& r = rows[task];
    TaskHead h;
    h.task_id = task;
    h.kind = kind;
    h.weights = Tensor(Shape{r.size(), d_model});
    for (std::size_t i = 0; i < r.size(); ++i) {
      h.class_ids.push_back(r[i].first);
      std::copy(r[i].second.begin(), r[i].second.end(), h.weights.row(i).begin());
    }
    ClassifierBank::TaskSpec spec{task, h.class_ids};
    bank.allocate({spec}, kind, 0);
    bank.head(task) = std::move(h);
  }
  return bank;
}

// ---- pipelines ----------------------------------------------------------------

inline std::vector<ProbeConfig> probe_configs(const RunConfig& c, std::uint64_t seed) {
  std::vector<ProbeConfig> out;
  for (HeadKind k : c.probe_kinds) {
    ProbeConfig p = c.probe;
    p.kind = k;
    p.seed = derive_seed(seed, "probe");
    out.push_back(p);
  }
  return out;
}

/// Probing over every IL snapshot (0 = before the first task), reusing
/// cached features when present.
inline void run_probing(const RunConfig& c, const TaskStream& stream, const OutputLayout& out, const RunInfo& info,
                        std::size_t n_snapshots, const Logger& log) {
  const auto configs = probe_configs(c, info.seed);
  std::vector<std::string> rows(n_snapshots);
  parallel_for(n_snapshots, [&](std::size_t t) {
    SnapshotFeatures f;
    f.tag = t;
    const auto train_path = out.features_at(t, "train"), test_path = out.features_at(t, "test");
    if (fs::exists(train_path) && fs::exists(test_path)) {
      f.train = load_features(train_path.string());
      f.test = load_features(test_path.string());
    } else {
      const Backbone bb = load_checkpoint(out.backbone_at(t).string()).backbone;
      f = extract_snapshot_features(bb, stream, t);
      save_features(f.train, train_path.string());
      save_features(f.test, test_path.string());
    }
    rows[t] = probing_csv_rows(probe_snapshot(f, stream, configs), info.preset, info.seed);
  });
  std::string text = probing_csv_header();
  for (const auto& r : rows) text += r;
  write_file(out.probing(), text);
  if (log) log("probing: " + std::to_string(n_snapshots) + " snapshots x " + std::to_string(configs.size()) + " metrics");
}

/// Moving distance, norms, histograms (and optional cosine matrices) from
/// the snapshots of a finished run.
inline void run_analysis(const RunConfig& c, const TaskStream& stream, const OutputLayout& out, const RunInfo& info,
                         const Logger& log) {
  const std::size_t T = stream.tasks.size();
  const StrategyConfig strategy = resolve_strategy(c, info.preset);
  const LogitOptions options{strategy.cosine_scale, strategy.euclidean_prototypes};
  std::vector<Backbone> backbones;
  for (std::size_t t = 0; t <= T; ++t) backbones.push_back(load_checkpoint(out.backbone_at(t).string()).backbone);
  const std::size_t d = backbones.front().config().d_model;

  std::vector<Tensor> centers(T + 1);
  std::vector<FeatureSet> train_features(T + 1);
  parallel_for(T + 1, [&](std::size_t t) {
    const auto path = out.features_at(t, "train");
    train_features[t] = fs::exists(path) ? load_features(path.string()) : extract_split(backbones[t], stream, true, t);
    centers[t] = class_centers(train_features[t].features, train_features[t].labels, stream.num_classes());
  });

  std::vector<ClassifierBank> banks;
  for (std::size_t t = 1; t <= T; ++t)
    banks.push_back(load_bank_csv(out.heads_at(t).string(), c.scenario, d, strategy.head_kind, options));

  // classifier sources: the run's own heads, and a linear probe per snapshot
  std::vector<std::vector<TaskHead>> observed, probing;
  std::vector<Tensor> centers_after(centers.begin() + 1, centers.end());
  ProbeConfig linear = c.probe;
  linear.kind = HeadKind::Linear;
  linear.seed = derive_seed(info.seed, "probe");
  for (std::size_t t = 1; t <= T; ++t) {
    observed.push_back(banks[t - 1].heads());
    probing.push_back({train_probe(train_features[t], stream, linear)});
  }
  std::vector<MovingDistanceEntry> md = moving_distance_report(stream, centers_after, observed, "observed");
  const auto md_probe = moving_distance_report(stream, centers_after, probing, "probing");
  md.insert(md.end(), md_probe.begin(), md_probe.end());
  std::ostringstream mds;
  mds << "format_version,preset,seed,source,task,at_task,k,moving_distance\n";
  for (const auto& e : md)
    mds << kCsvFormatVersion << ',' << detail::field(info.preset) << ',' << info.seed << ',' << e.source << ','
        << e.task << ',' << e.at << ',' << e.at - e.task << ',' << detail::num(e.value) << '\n';
  write_file(out.moving_distance(), mds.str());

  std::ostringstream ns, cns;
  ns << "format_version,preset,seed,source,snapshot,task,mean_norm\n";
  cns << "format_version,preset,seed,source,snapshot,task,class_id,norm,sorted_rank\n";
  auto emit_norms = [&](const std::string& source, std::size_t t, const ClassifierBank& bank) {
    const NormReport r = norm_report(bank);
    for (std::size_t k = 0; k < r.task_ids.size(); ++k) {
      if (source == "observed" && r.task_ids[k] > t) continue;  // pre-allocated, not yet learned
      ns << kCsvFormatVersion << ',' << detail::field(info.preset) << ',' << info.seed << ',' << source << ',' << t
         << ',' << r.task_ids[k] << ',' << detail::num(r.mean_norm[k]) << '\n';
      const TaskHead& h = bank.heads()[k];
      std::vector<std::size_t> rank(r.class_norms[k].size());
      std::iota(rank.begin(), rank.end(), 0);
      std::stable_sort(rank.begin(), rank.end(),
                       [&](std::size_t a, std::size_t b) { return r.class_norms[k][a] > r.class_norms[k][b]; });
      std::vector<std::size_t> position(rank.size());
      for (std::size_t p = 0; p < rank.size(); ++p) position[rank[p]] = p + 1;
      for (std::size_t i = 0; i < h.class_ids.size(); ++i)
        cns << kCsvFormatVersion << ',' << detail::field(info.preset) << ',' << info.seed << ',' << source << ',' << t
            << ',' << r.task_ids[k] << ',' << h.class_ids[i] << ',' << detail::num(r.class_norms[k][i]) << ','
            << position[i] << '\n';
    }
  };
  for (std::size_t t = 1; t <= T; ++t) {
    emit_norms("observed", t, banks[t - 1]);
    // the probe head split back into per-task rows
    ClassifierBank pb(Scenario::CIL, d);
    for (const Task& task : stream.tasks) {
      pb.allocate({{task.id, task.classes}}, HeadKind::Linear, 0);
      pb.head(task.id).weights = embedding_rows(probing[t - 1].front(), task.classes);
    }
    emit_norms("probing", t, pb);
  }
  write_file(out.norms(), ns.str());
  write_file(out.class_norms(), cns.str());

  if (c.analysis.histograms) {
    std::ostringstream hs;
    hs << "format_version,preset,seed,snapshot,metric,population_a,population_b,bin,lo,hi,count\n";
    for (std::size_t t : {std::size_t{0}, T}) {
      const Tensor& words = backbones[t].param(names::out_emb);
      Tensor class_emb;
      std::vector<double> rows;
      std::size_t n_rows = 0;
      if (t > 0)
        for (const TaskHead& h : banks[t - 1].heads()) {
          if (h.task_id >= t) continue;  // pre-allocated, not yet learned
          rows.insert(rows.end(), h.weights.values().begin(), h.weights.values().end());
          n_rows += h.weights.rows();
        }
      std::vector<Population> pops = {{"features", &train_features[t].features},
                                      {"word_embeddings", &words},
                                      {"prototypes", &centers[t]}};
      if (n_rows > 0) {
        class_emb = Tensor::matrix(n_rows, d, rows);
        pops.push_back({"class_embeddings", &class_emb});
      }
      const HistogramReport rep = geometry_histograms(pops, c.analysis.pair_cap, derive_seed(info.seed, "histograms", t));
      for (const Histogram& h : rep.histograms)
        for (std::size_t k = 0; k < h.counts.size(); ++k)
          hs << kCsvFormatVersion << ',' << detail::field(info.preset) << ',' << info.seed << ',' << t << ','
             << h.metric << ',' << h.population_a << ',' << h.population_b << ',' << k << ','
             << detail::num(h.edge(k)) << ',' << detail::num(h.edge(k + 1)) << ',' << h.counts[k] << '\n';
    }
    write_file(out.histograms(), hs.str());
  }

  if (c.analysis.cosine_matrices) {
    fs::create_directories(out.cosine_dir());
    for (std::size_t t = 1; t <= T; ++t)
      for (std::size_t s = 0; s < t; ++s) {
        const auto& cls = stream.tasks[s].classes;
        const CosineMatrix m =
            cosine_matrix(embedding_rows(banks[t - 1].head(stream.tasks[s].id), cls), centers[t], s + 1, t, cls);
        std::ostringstream os;
        os << "format_version,center_class";
        for (std::size_t c2 : cls) os << ",class_" << c2;
        os << '\n';
        for (std::size_t r = 0; r < m.values.rows(); ++r) {
          os << kCsvFormatVersion << ',' << r;
          for (double v : m.values.row(r)) os << ',' << detail::num(v);
          os << '\n';
        }
        write_file(out.cosine_dir() / ("C_t" + std::to_string(t) + "_s" + std::to_string(s + 1) + ".csv"), os.str());
      }
  }
  if (log) log("analysis: moving distance, norms" + std::string(c.analysis.histograms ? ", histograms" : ""));
}

inline std::string slug(const std::string& preset) {
  std::string s;
  for (char ch : preset) {
    if (std::isalnum(static_cast<unsigned char>(ch))) s += ch;
    else if (ch == '*') s += "star";
    else if (ch == '+') s += '_';
  }
  return s;
}

/// Causal-LM pre-training from the config's Markov corpus.
inline PretrainResult run_pretraining(const RunConfig& c, const BackboneConfig& bc, std::uint64_t seed) {
  Backbone bb = init_backbone(bc);
  const auto corpus = markov_corpus(bc.vocab_size, c.pretrain.corpus_sequences,
                                    std::min(c.pretrain.corpus_words, bc.max_seq_len - 2), c.pretrain.branching,
                                    derive_seed(seed, "corpus"));
  PretrainConfig opt = c.pretrain.optimizer;
  opt.seed = derive_seed(seed, "pretrain");
  return pretrain_clm(bb, corpus, c.pretrain.total_steps, c.pretrain.resolved_schedule(), opt);
}

/// One (preset, seed) run: optional pre-training, the IL sequence, then
/// probing and analysis. Writes everything under `dir`.
inline ExperimentRecord run_single(const RunConfig& c, const std::string& preset_name, std::uint64_t seed,
                                   const fs::path& dir, bool force, bool echo) {
  OutputLayout out = prepare_output(dir, force);
  write_file(out.config(), c.raw);
  const RunInfo info{preset_name, seed};
  write_run_info(out, info);
  RunLog log(out.log(), echo);
  log("run " + preset_name + " seed " + std::to_string(seed) + " threads " + std::to_string(thread_count()));

  const TaskStream stream = build_stream(c, seed);
  validate_stream(stream);
  const BackboneConfig bc = resolve_backbone(c, stream, seed);
  const StrategyConfig strategy = resolve_strategy(c, preset_name);
  log("stream: " + std::to_string(stream.tasks.size()) + " tasks, " + std::to_string(stream.num_classes()) +
      " classes; backbone parameters " + std::to_string(parameter_count(bc)));

  Backbone initial = init_backbone(bc);
  if (c.pretrain.enabled) {
    const auto t0 = std::chrono::steady_clock::now();
    PretrainResult pr = run_pretraining(c, bc, seed);
    for (const auto& ck : pr.checkpoints) save_checkpoint(ck, out.pretrain_checkpoint(ck.step).string());
    initial = pr.checkpoints.back().backbone;
    std::ostringstream os;
    os << "pretrain: " << c.pretrain.total_steps << " steps, final loss " << pr.losses.back() << ", "
       << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s";
    log(os.str());
  }

  ExperimentRecord rec = run_experiment(stream, initial, strategy, seed, log.logger());
  rec.preset = preset_name;
  for (const auto& w : rec.warnings) log("warning: " + w);
  for (const Snapshot& s : rec.snapshots) {
    save_checkpoint({s.task, s.backbone}, out.backbone_at(s.task).string());
    if (s.task > 0) s.bank.export_csv(out.heads_at(s.task).string());
  }
  write_file(out.results(), results_csv(rec, c.scenario));
  log("results: A_T " + detail::num(rec.final_average_accuracy()) + ", A_bar " + detail::num(rec.avg_incremental_accuracy));

  if (c.analysis.probing) run_probing(c, stream, out, info, rec.snapshots.size(), log.logger());
  if (c.analysis.geometry) run_analysis(c, stream, out, info, log.logger());
  write_file(out.complete_marker(), "");
  return rec;
}

struct RunPlan {
  std::string preset;
  std::uint64_t seed;
  fs::path dir;
};

/// One directory per (preset, seed); a single run uses `root` itself.
inline std::vector<RunPlan> plan_runs(const RunConfig& c, const fs::path& root) {
  const auto seeds = c.resolved_seeds();
  std::vector<RunPlan> plans;
  const bool single = c.presets.size() == 1 && seeds.size() == 1;
  for (const auto& p : c.presets)
    for (std::uint64_t s : seeds)
      plans.push_back({p, s, single ? root : root / (slug(p) + "_seed" + std::to_string(s))});
  return plans;
}

/// Runs every planned experiment, concurrently when several are requested.
inline std::vector<RunPlan> run_config(const RunConfig& c, const fs::path& root, bool force, bool echo = true) {
  const auto plans = plan_runs(c, root);
  if (plans.size() > 1) {
    const OutputLayout top{root};
    if (fs::exists(top.complete_marker()) && !force)
      throw IoError("'" + root.string() + "' already holds a completed sweep (use --force to overwrite)");
    std::error_code ec;
    fs::create_directories(root, ec);
    if (ec) throw IoError("cannot create '" + root.string() + "': " + ec.message());
    write_file(top.config(), c.raw);
  }
  parallel_for(plans.size(), [&](std::size_t k) { run_single(c, plans[k].preset, plans[k].seed, plans[k].dir, force, echo); });
  if (plans.size() > 1) write_file(OutputLayout{root}.complete_marker(), "");
  return plans;
}

/// Config stored in a run directory (or its sweep parent).
inline RunConfig config_of_run(const fs::path& dir) {
  OutputLayout out{dir};
  if (!fs::exists(out.config())) throw IoError("'" + dir.string() + "' has no config.json");
  return load_run_config(out.config().string());
}

inline void reprobe(const fs::path& dir, bool echo) {
  const OutputLayout out{dir};
  const RunConfig c = config_of_run(dir);
  const RunInfo info = read_run_info(out);
  const TaskStream stream = build_stream(c, info.seed);
  RunLog log(out.log(), echo, true);
  run_probing(c, stream, out, info, stream.tasks.size() + 1, log.logger());
}

inline void reanalyze(const fs::path& dir, bool echo) {
  const OutputLayout out{dir};
  const RunConfig c = config_of_run(dir);
  const RunInfo info = read_run_info(out);
  const TaskStream stream = build_stream(c, info.seed);
  RunLog log(out.log(), echo, true);
  run_analysis(c, stream, out, info, log.logger());
}

/// The pre-training study: checkpoints at the schedule, each probed on the
/// stream with every configured metric.
inline void run_pretrain_study(const RunConfig& c, std::uint64_t seed, const fs::path& dir, bool force, bool echo) {
  if (c.backbone.attention_mode != AttentionMode::Causal) throw ValidationError("pretrain: needs a causal backbone");
  OutputLayout out{dir};
  if (fs::exists(out.pretrain_probing()) && !force)
    throw IoError("'" + dir.string() + "' already holds a pre-training study (use --force to overwrite)");
  std::error_code ec;
  fs::create_directories(out.snapshots(), ec);
  if (ec) throw IoError("cannot create '" + out.snapshots().string() + "': " + ec.message());
  write_file(out.config(), c.raw);
  RunLog log(out.root / "pretrain_log.txt", echo);
  const TaskStream stream = build_stream(c, seed);
  const BackboneConfig bc = resolve_backbone(c, stream, seed);
  PretrainResult pr = run_pretraining(c, bc, seed);
  log("pretrain: " + std::to_string(c.pretrain.total_steps) + " steps, final loss " + detail::num(pr.losses.back()));
  const auto configs = probe_configs(c, seed);
  std::vector<std::string> rows(pr.checkpoints.size());
  parallel_for(pr.checkpoints.size(), [&](std::size_t k) {
    const Checkpoint& ck = pr.checkpoints[k];
    save_checkpoint(ck, out.pretrain_checkpoint(ck.step).string());
    rows[k] = probing_csv_rows(probe_snapshot(extract_snapshot_features(ck.backbone, stream, ck.step), stream, configs),
                               "pretrain", seed);
  });
  std::string text = probing_csv_header();
  for (const auto& r : rows) text += r;
  write_file(out.pretrain_probing(), text);
  log("pretrain probing: " + std::to_string(pr.checkpoints.size()) + " checkpoints");
}

// ---- report -------------------------------------------------------------------

struct ReportRow {
  std::string preset;
  std::uint64_t seed = 0;
  double a_final = 0.0;  // A_T
  double a_bar = 0.0;
  std::optional<double> a_prob;  // final-checkpoint linear probing
};

inline std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(read_file(path.string()));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) rows.push_back(detail::split_csv_line(line));
  if (rows.empty()) throw IoError("'" + path.string() + "' has no header");
  return rows;
}

inline std::size_t column(const std::vector<std::string>& header, const std::string& name, const fs::path& path) {
  auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw IoError("'" + path.string() + "' lacks column '" + name + "'");
  return static_cast<std::size_t>(it - header.begin());
}

inline ReportRow read_report_row(const fs::path& dir) {
  const OutputLayout out{dir};
  if (!fs::exists(out.complete_marker())) throw IoError("'" + dir.string() + "' is not a completed run");
  const auto rows = read_csv(out.results());
  const auto& h = rows.front();
  const std::size_t cp = column(h, "preset", out.results()), cs = column(h, "seed", out.results()),
                    ct = column(h, "t", out.results()), ca = column(h, "A_t", out.results()),
                    cb = column(h, "A_bar", out.results());
  if (rows.size() < 2) throw IoError("'" + out.results().string() + "' has no rows");
  ReportRow r;
  std::size_t last_t = 0;
  for (std::size_t k = 1; k < rows.size(); ++k) {
    r.preset = rows[k][cp];
    r.seed = std::stoull(rows[k][cs]);
    r.a_bar = std::stod(rows[k][cb]);
    const std::size_t t = std::stoull(rows[k][ct]);
    if (t >= last_t) {
      last_t = t;
      r.a_final = std::stod(rows[k][ca]);
    }
  }
  if (fs::exists(out.probing())) {
    const auto pr = read_csv(out.probing());
    const std::size_t cc = column(pr.front(), "checkpoint", out.probing()), cm = column(pr.front(), "metric", out.probing()),
                      cap = column(pr.front(), "A_prob", out.probing());
    std::size_t best = 0;
    for (std::size_t k = 1; k < pr.size(); ++k)
      if (pr[k][cm] == "linear" && std::stoull(pr[k][cc]) >= best) {
        best = std::stoull(pr[k][cc]);
        r.a_prob = std::stod(pr[k][cap]);
      }
  }
  return r;
}

/// Run directories under each path: the path itself if it holds results,
/// otherwise its immediate subdirectories that do (sorted).
inline std::vector<fs::path> expand_run_dirs(const std::vector<fs::path>& paths) {
  std::vector<fs::path> out;
  for (const auto& p : paths) {
    if (!fs::is_directory(p)) throw IoError("'" + p.string() + "' is not a directory");
    if (fs::exists(OutputLayout{p}.results())) {
      out.push_back(p);
      continue;
    }
    std::vector<fs::path> sub;
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_directory() && fs::exists(OutputLayout{e.path()}.results())) sub.push_back(e.path());
    if (sub.empty()) throw IoError("'" + p.string() + "' holds no run results");
    std::sort(sub.begin(), sub.end());
    out.insert(out.end(), sub.begin(), sub.end());
  }
  return out;
}

/// Mean and sample standard deviation (0 for a single value).
inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) throw ContractError("mean of nothing");
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

/// One row per run plus a mean/std summary row per preset.
inline std::string emit_report(const std::vector<fs::path>& paths) {
  const auto dirs = expand_run_dirs(paths);
  std::vector<ReportRow> rows;
  for (const auto& d : dirs) rows.push_back(read_report_row(d));
  std::ostringstream os;
  os << "format_version,kind,preset,seed,n,A_T,A_T_std,A_bar,A_bar_std,A_prob,A_prob_std\n";
  std::vector<std::string> presets;
  for (const auto& r : rows) {
    os << kCsvFormatVersion << ",run," << detail::field(r.preset) << ',' << r.seed << ",1," << detail::num(r.a_final)
       << ",," << detail::num(r.a_bar) << ",," << (r.a_prob ? detail::num(*r.a_prob) : "") << ",\n";
    if (std::find(presets.begin(), presets.end(), r.preset) == presets.end()) presets.push_back(r.preset);
  }
  for (const auto& p : presets) {
    std::vector<double> a, b, pr;
    for (const auto& r : rows)
      if (r.preset == p) {
        a.push_back(r.a_final);
        b.push_back(r.a_bar);
        if (r.a_prob) pr.push_back(*r.a_prob);
      }
    const auto [am, as] = mean_std(a);
    const auto [bm, bs] = mean_std(b);
    os << kCsvFormatVersion << ",summary," << detail::field(p) << ",," << a.size() << ',' << detail::num(am) << ','
       << detail::num(as) << ',' << detail::num(bm) << ',' << detail::num(bs) << ',';
    if (pr.size() == a.size()) {
      const auto [pm, ps] = mean_std(pr);
      os << detail::num(pm) << ',' << detail::num(ps);
    } else {
      os << ',';
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ilab
