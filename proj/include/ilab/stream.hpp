// SPDX-License-Identifier: Apache-2.0
#pragma once

// Task streams: synthetic multinomial streams, ingestion of labeled text,
// class ordering, and the per-class replay buffer.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ilab/errors.hpp"
#include "ilab/rng.hpp"

namespace ilab {

enum class Scenario { CIL, TIL };

inline const char* scenario_name(Scenario s) { return s == Scenario::CIL ? "CIL" : "TIL"; }

inline Scenario parse_scenario(const std::string& s) {
  if (s == "CIL") return Scenario::CIL;
  if (s == "TIL") return Scenario::TIL;
  throw ValidationError("scenario: unsupported value '" + s + "' (expected CIL or TIL)");
}

// Reserved token ids shared by every stream and backbone.
inline constexpr std::size_t kPadToken = 0;
inline constexpr std::size_t kUnkToken = 1;
inline constexpr std::size_t kClsToken = 2;  // sequence start
inline constexpr std::size_t kEosToken = 3;  // sequence end
inline constexpr std::size_t kFirstWordToken = 4;

struct LabeledExample {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;  // global label id

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;
};

struct Task {
  std::size_t id = 0;
  std::vector<std::size_t> classes;  // global label ids, in slot order
  std::vector<LabeledExample> train;
  std::vector<LabeledExample> test;
};

struct TaskStream {
  std::vector<Task> tasks;
  Scenario scenario = Scenario::CIL;
  std::vector<std::string> label_names;  // indexed by global label id
  std::uint64_t ordering_seed = 0;
  std::size_t vocab_size = 0;
  std::size_t max_length = 0;  // longest sequence, special tokens included

  // Generating distributions of synthetic streams (one row per label, over
  // the full vocabulary). Empty for ingested streams.
  std::vector<std::vector<double>> class_distributions;
  // Word -> id for ingested streams.
  std::map<std::string, std::size_t> vocabulary;

  std::size_t num_classes() const { return label_names.size(); }

  /// Task owning a global label.
  std::size_t task_of(std::size_t label) const {
    for (const Task& t : tasks)
      if (std::find(t.classes.begin(), t.classes.end(), label) != t.classes.end()) return t.id;
    throw LookupError("label " + std::to_string(label) + " belongs to no task");
  }

  std::vector<std::size_t> classes_up_to(std::size_t task_index) const {
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t <= task_index && t < tasks.size(); ++t)
      out.insert(out.end(), tasks[t].classes.begin(), tasks[t].classes.end());
    return out;
  }
};

/// Throws unless CIL streams have pairwise-disjoint class sets and every
/// example's label belongs to its task.
inline void validate_stream(const TaskStream& s) {
  std::set<std::size_t> seen;
  for (const Task& t : s.tasks) {
    std::set<std::size_t> own(t.classes.begin(), t.classes.end());
    if (own.size() != t.classes.size()) throw DataError("task " + std::to_string(t.id) + " repeats a class");
    for (std::size_t c : t.classes) {
      if (c >= s.num_classes()) throw DataError("unregistered label " + std::to_string(c));
      if (s.scenario == Scenario::CIL && !seen.insert(c).second)
        throw DataError("class " + std::to_string(c) + " appears in more than one CIL task");
    }
    for (const auto* split : {&t.train, &t.test})
      for (const LabeledExample& e : *split) {
        if (!own.count(e.label)) throw DataError("example label outside its task's class set");
        for (std::size_t tok : e.tokens)
          if (tok >= s.vocab_size) throw DataError("token id outside the vocabulary");
      }
  }
}

/// Alphabetical sort followed by a seeded permutation.
inline std::vector<std::string> order_classes(std::vector<std::string> names, std::uint64_t seed) {
  if (names.empty()) throw InputError("order_classes: no class names");
  std::sort(names.begin(), names.end());
  if (std::adjacent_find(names.begin(), names.end()) != names.end())
    throw InputError("order_classes: duplicate class name '" + *std::adjacent_find(names.begin(), names.end()) + "'");
  Rng rng(derive_seed(seed, "class-order"));
  rng.shuffle(names);
  return names;
}

// ---- synthetic streams -----------------------------------------------------

struct SyntheticSpec {
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 4;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  std::size_t vocab_size = 200;
  // Probability mass each class puts on its own signature tokens; the rest
  // is spread uniformly over all word tokens.
  double separation = 0.9;
  std::size_t signature_tokens = 4;
  std::size_t min_words = 6;
  std::size_t max_words = 14;
  Scenario scenario = Scenario::CIL;
  std::uint64_t seed = 0;
};

inline std::vector<std::size_t> sample_words(Rng& rng, const std::vector<double>& cumulative, std::size_t count) {
  std::vector<std::size_t> seq;
  seq.reserve(count + 2);
  seq.push_back(kClsToken);
  for (std::size_t i = 0; i < count; ++i) seq.push_back(rng.categorical(cumulative));
  seq.push_back(kEosToken);
  return seq;
}

/// Every class is a multinomial over the vocabulary with its own disjoint
/// set of signature tokens. Sequences are [CLS] words... [EOS].
inline TaskStream build_synthetic_stream(const SyntheticSpec& spec) {
  if (spec.n_tasks == 0 || spec.classes_per_task == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 ||
      spec.signature_tokens == 0 || spec.min_words == 0 || spec.max_words < spec.min_words)
    throw ConfigError("synthetic stream: all sizes must be positive and min_words <= max_words");
  if (!(spec.separation > 0.0) || spec.separation > 1.0)
    throw ConfigError("synthetic stream: separation must lie in (0, 1]");
  const std::size_t n_classes = spec.n_tasks * spec.classes_per_task;
  if (spec.vocab_size <= kFirstWordToken ||
      n_classes * spec.signature_tokens > spec.vocab_size - kFirstWordToken)
    throw ConfigError("synthetic stream: vocabulary of " + std::to_string(spec.vocab_size) + " is too small for " +
                      std::to_string(n_classes) + " classes x " + std::to_string(spec.signature_tokens) +
                      " signature tokens");

  TaskStream s;
  s.scenario = spec.scenario;
  s.ordering_seed = spec.seed;
  s.vocab_size = spec.vocab_size;
  s.max_length = spec.max_words + 2;

  Rng rng(derive_seed(spec.seed, "synthetic-stream"));
  std::vector<std::size_t> words;
  for (std::size_t w = kFirstWordToken; w < spec.vocab_size; ++w) words.push_back(w);
  rng.shuffle(words);

  const double n_words = static_cast<double>(spec.vocab_size - kFirstWordToken);
  std::vector<std::vector<double>> cumulative(n_classes);
  for (std::size_t c = 0; c < n_classes; ++c) {
    std::vector<double> p(spec.vocab_size, 0.0);
    for (std::size_t w = kFirstWordToken; w < spec.vocab_size; ++w) p[w] = (1.0 - spec.separation) / n_words;
    for (std::size_t k = 0; k < spec.signature_tokens; ++k)
      p[words[c * spec.signature_tokens + k]] += spec.separation / static_cast<double>(spec.signature_tokens);
    cumulative[c].resize(spec.vocab_size);
    double acc = 0.0;
    for (std::size_t w = 0; w < spec.vocab_size; ++w) cumulative[c][w] = (acc += p[w]);
    s.class_distributions.push_back(std::move(p));
    s.label_names.push_back("class_" + std::to_string(c));
  }

  const std::size_t span = spec.max_words - spec.min_words + 1;
  for (std::size_t t = 0; t < spec.n_tasks; ++t) {
    Task task;
    task.id = t;
    for (std::size_t k = 0; k < spec.classes_per_task; ++k) task.classes.push_back(t * spec.classes_per_task + k);
    for (std::size_t c : task.classes) {
      for (std::size_t i = 0; i < spec.train_per_class; ++i)
        task.train.push_back({sample_words(rng, cumulative[c], spec.min_words + rng.index(span)), c});
      for (std::size_t i = 0; i < spec.test_per_class; ++i)
        task.test.push_back({sample_words(rng, cumulative[c], spec.min_words + rng.index(span)), c});
    }
    s.tasks.push_back(std::move(task));
  }
  validate_stream(s);
  return s;
}

// ---- ingestion -------------------------------------------------------------

enum class TextFormat { Delimited, JsonLines };

inline TextFormat parse_text_format(const std::string& s) {
  if (s == "tsv" || s == "delimited") return TextFormat::Delimited;
  if (s == "jsonl" || s == "json-lines") return TextFormat::JsonLines;
  throw ValidationError("format: unsupported value '" + s + "' (expected tsv or jsonl)");
}

/// How ingested classes map onto tasks: an explicit label -> task index map,
/// or consecutive chunks of the ordered class list.
struct TaskAssignment {
  std::map<std::string, std::size_t> explicit_tasks;
  std::size_t classes_per_task = 0;
};

struct IngestOptions {
  TextFormat format = TextFormat::Delimited;
  Scenario scenario = Scenario::CIL;
  std::uint64_t ordering_seed = 0;
  std::size_t max_words = 30;         // longer texts are truncated
  std::size_t max_vocab = 0;          // 0 = unlimited
};

struct TextRow {
  std::string text;
  std::string label;
};

inline std::vector<TextRow> read_rows(const std::string& path, TextFormat format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<TextRow> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    TextRow row;
    if (format == TextFormat::Delimited) {
      const auto tab = line.rfind('\t');
      if (tab == std::string::npos) throw InputError(path + ":" + std::to_string(lineno) + ": expected text<TAB>label");
      row.text = line.substr(0, tab);
      row.label = line.substr(tab + 1);
    } else {
      try {
        const auto j = nlohmann::json::parse(line);
        row.text = j.at("text").get<std::string>();
        row.label = j.at("label").is_string() ? j.at("label").get<std::string>() : j.at("label").dump();
      } catch (const nlohmann::json::exception& e) {
        throw InputError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

inline std::vector<std::string> split_whitespace(const std::string& text) {
  std::istringstream is(text);
  std::vector<std::string> out;
  for (std::string w; is >> w;) out.push_back(w);
  return out;
}

/// Loads train/test files into a stream. The vocabulary is built from the
/// training split only, ranked by frequency (ties alphabetical); unseen
/// words map to the unknown token.
inline TaskStream load_stream(const std::string& train_path, const std::string& test_path,
                              const TaskAssignment& assignment, const IngestOptions& opts) {
  const auto train_rows = read_rows(train_path, opts.format);
  const auto test_rows = read_rows(test_path, opts.format);

  std::set<std::string> train_labels;
  for (const auto& r : train_rows) train_labels.insert(r.label);
  std::vector<std::string> ordered = order_classes({train_labels.begin(), train_labels.end()}, opts.ordering_seed);

  // task index -> labels in class order
  std::vector<std::vector<std::string>> task_labels;
  if (!assignment.explicit_tasks.empty()) {
    std::size_t n_tasks = 0;
    for (const auto& [label, t] : assignment.explicit_tasks) n_tasks = std::max(n_tasks, t + 1);
    task_labels.resize(n_tasks);
    for (const std::string& label : ordered) {
      auto it = assignment.explicit_tasks.find(label);
      if (it == assignment.explicit_tasks.end())
        throw InputError("label '" + label + "' is missing from the task assignment");
      task_labels[it->second].push_back(label);
    }
    for (std::size_t t = 0; t < n_tasks; ++t)
      if (task_labels[t].empty()) throw InputError("task " + std::to_string(t) + " has no classes with training data");
  } else {
    if (assignment.classes_per_task == 0) throw ConfigError("task assignment: classes_per_task must be positive");
    if (ordered.size() % assignment.classes_per_task != 0)
      throw ConfigError("task assignment: " + std::to_string(ordered.size()) + " classes do not split into tasks of " +
                        std::to_string(assignment.classes_per_task));
    for (std::size_t i = 0; i < ordered.size(); i += assignment.classes_per_task)
      task_labels.emplace_back(ordered.begin() + static_cast<std::ptrdiff_t>(i),
                               ordered.begin() + static_cast<std::ptrdiff_t>(i + assignment.classes_per_task));
  }

  TaskStream s;
  s.scenario = opts.scenario;
  s.ordering_seed = opts.ordering_seed;
  std::map<std::string, std::size_t> label_id;
  for (std::size_t t = 0; t < task_labels.size(); ++t) {
    Task task;
    task.id = t;
    for (const std::string& name : task_labels[t]) {
      label_id[name] = s.label_names.size();
      task.classes.push_back(s.label_names.size());
      s.label_names.push_back(name);
    }
    s.tasks.push_back(std::move(task));
  }

  std::map<std::string, std::size_t> freq;
  for (const auto& r : train_rows)
    for (const auto& w : split_whitespace(r.text)) ++freq[w];
  std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
  if (opts.max_vocab && ranked.size() > opts.max_vocab) ranked.resize(opts.max_vocab);
  for (std::size_t i = 0; i < ranked.size(); ++i) s.vocabulary[ranked[i].first] = kFirstWordToken + i;
  s.vocab_size = kFirstWordToken + ranked.size();

  auto encode = [&](const TextRow& r) {
    auto it = label_id.find(r.label);
    if (it == label_id.end()) throw InputError("row with unregistered label '" + r.label + "'");
    LabeledExample e;
    e.label = it->second;
    e.tokens.push_back(kClsToken);
    auto words = split_whitespace(r.text);
    if (words.size() > opts.max_words) words.resize(opts.max_words);
    for (const auto& w : words) {
      auto v = s.vocabulary.find(w);
      e.tokens.push_back(v == s.vocabulary.end() ? kUnkToken : v->second);
    }
    if (words.empty()) e.tokens.push_back(kUnkToken);
    e.tokens.push_back(kEosToken);
    s.max_length = std::max(s.max_length, e.tokens.size());
    return e;
  };
  for (const auto& r : train_rows) {
    LabeledExample e = encode(r);
    s.tasks[s.task_of(e.label)].train.push_back(std::move(e));
  }
  for (const auto& r : test_rows) {
    LabeledExample e = encode(r);
    s.tasks[s.task_of(e.label)].test.push_back(std::move(e));
  }
  validate_stream(s);
  return s;
}

// ---- replay buffer ---------------------------------------------------------

class ReplayBuffer {
 public:
  ReplayBuffer(std::size_t capacity_per_class = 0, std::uint64_t seed = 0) : capacity_(capacity_per_class), seed_(seed) {}

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, v] : stored_) n += v.size();
    return n;
  }
  bool empty() const { return size() == 0; }
  const std::map<std::size_t, std::vector<LabeledExample>>& stored() const { return stored_; }
  const std::set<std::size_t>& trained_classes() const { return trained_; }

  /// Keeps min(capacity, available) uniformly chosen training examples per
  /// class of a finished task.
  void update(const Task& task) {
    for (std::size_t c : task.classes) trained_.insert(c);
    if (capacity_ == 0) return;
    Rng rng(derive_seed(seed_, "replay-select", task.id));
    for (std::size_t c : task.classes) {
      std::vector<const LabeledExample*> pool;
      for (const auto& e : task.train)
        if (e.label == c) pool.push_back(&e);
      // partial Fisher-Yates: the first k slots are a uniform k-subset
      const std::size_t k = std::min(capacity_, pool.size());
      for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.index(pool.size() - i)]);
      auto& slot = stored_[c];
      slot.clear();
      for (std::size_t i = 0; i < k; ++i) slot.push_back(*pool[i]);
    }
  }

  /// Up to k examples drawn with replacement from everything stored.
  std::vector<LabeledExample> sample(std::size_t k, Rng& rng) const {
    std::vector<const LabeledExample*> all;
    for (const auto& [c, v] : stored_)
      for (const auto& e : v) all.push_back(&e);
    std::vector<LabeledExample> out;
    if (all.empty()) return out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back(*all[rng.index(all.size())]);
    return out;
  }

 private:
  std::size_t capacity_;
  std::uint64_t seed_;
  std::map<std::size_t, std::vector<LabeledExample>> stored_;
  std::set<std::size_t> trained_;
};

}  // namespace ilab
