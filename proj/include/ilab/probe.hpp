// SPDX-License-Identifier: Apache-2.0
#pragma once

// Probing: fresh heads trained (or fit) on every task's training data on top
// of a frozen backbone snapshot, plus the binary feature cache.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "ilab/autodiff.hpp"
#include "ilab/classifier.hpp"
#include "ilab/errors.hpp"
#include "ilab/optim.hpp"
#include "ilab/rng.hpp"
#include "ilab/stream.hpp"
#include "ilab/transformer.hpp"

namespace ilab {

struct ProbeConfig {
  HeadKind kind = HeadKind::Linear;
  std::size_t epochs = 20;
  double learning_rate = 1e-3;
  std::size_t batch_size = 128;
  double cosine_scale = 1.0;
  bool euclidean_prototypes = false;
  double init_std = 0.02;
  std::uint64_t seed = 0;

  LogitOptions logit_options() const { return {cosine_scale, euclidean_prototypes}; }
};

/// Extracted features of one split, rows in stream order (task by task).
struct FeatureSet {
  std::uint64_t tag = 0;
  Tensor features;
  std::vector<std::size_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t d_model() const { return features.cols(); }
};

struct SnapshotFeatures {
  std::uint64_t tag = 0;
  FeatureSet train;
  FeatureSet test;
};

inline FeatureSet extract_split(const Backbone& bb, const TaskStream& stream, bool train, std::uint64_t tag) {
  std::vector<const LabeledExample*> ex;
  FeatureSet fs;
  fs.tag = tag;
  for (const Task& t : stream.tasks)
    for (const auto& e : train ? t.train : t.test) {
      ex.push_back(&e);
      fs.labels.push_back(e.label);
    }
  if (ex.empty()) throw DataError("stream has no examples to extract");
  fs.features = extract_features(bb, ex);
  return fs;
}

inline SnapshotFeatures extract_snapshot_features(const Backbone& bb, const TaskStream& stream, std::uint64_t tag) {
  return {tag, extract_split(bb, stream, true, tag), extract_split(bb, stream, false, tag)};
}

// ---- feature cache file -------------------------------------------------------

inline constexpr char kFeatureMagic[8] = {'I', 'L', 'A', 'B', 'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatureVersion = 1;

inline void save_features(const FeatureSet& fs, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write '" + path + "'");
  auto put = [&](const auto& v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); };
  os.write(kFeatureMagic, sizeof kFeatureMagic);
  put(kFeatureVersion);
  put(fs.tag);
  put(static_cast<std::uint64_t>(fs.d_model()));
  put(static_cast<std::uint64_t>(fs.count()));
  for (std::size_t r = 0; r < fs.count(); ++r) {
    put(static_cast<std::uint64_t>(fs.labels[r]));
    os.write(reinterpret_cast<const char*>(fs.features.row(r).data()),
             static_cast<std::streamsize>(fs.d_model() * sizeof(double)));
  }
  if (!os) throw IoError("write failed for '" + path + "'");
}

inline FeatureSet load_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read '" + path + "'");
  auto get = [&](auto& v) {
    is.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!is) throw IoError("truncated feature cache '" + path + "'");
  };
  char magic[8];
  is.read(magic, sizeof magic);
  if (!is || std::memcmp(magic, kFeatureMagic, sizeof magic) != 0) throw IoError("'" + path + "' is not a feature cache");
  std::uint32_t version = 0;
  get(version);
  if (version != kFeatureVersion) throw IoError("unsupported feature cache version " + std::to_string(version));
  FeatureSet fs;
  std::uint64_t d = 0, n = 0;
  get(fs.tag);
  get(d);
  get(n);
  if (d == 0 || n == 0) throw IoError("empty feature cache '" + path + "'");
  fs.features = Tensor(Shape{n, d});
  fs.labels.resize(n);
  for (std::uint64_t r = 0; r < n; ++r) {
    std::uint64_t label = 0;
    get(label);
    fs.labels[r] = label;
    is.read(reinterpret_cast<char*>(fs.features.row(r).data()), static_cast<std::streamsize>(d * sizeof(double)));
    if (!is) throw IoError("truncated feature cache '" + path + "'");
  }
  return fs;
}

// ---- probe training -----------------------------------------------------------

inline std::vector<std::size_t> all_classes(const TaskStream& stream) {
  std::vector<std::size_t> c;
  for (const Task& t : stream.tasks) c.insert(c.end(), t.classes.begin(), t.classes.end());
  return c;
}

/// A single head over every class of the stream. Prototype kinds are fit
/// from class means; the others train with Adam on shuffled mini-batches.
inline TaskHead train_probe(const FeatureSet& train, const TaskStream& stream, const ProbeConfig& config) {
  if (stream.tasks.empty()) throw ContractError("cannot probe an empty stream");
  if (train.count() == 0) throw DataError("probe training set is empty");
  const std::vector<std::size_t> classes = all_classes(stream);
  if (is_prototype(config.kind)) return fit_prototype_head(train.features, train.labels, classes, 0, config.kind);
  if (config.batch_size == 0) throw ConfigError("probe batch_size must be positive");

  std::vector<std::size_t> column(stream.num_classes(), 0);
  for (std::size_t i = 0; i < classes.size(); ++i) column.at(classes[i]) = i;

  const std::uint64_t seed = derive_seed(derive_seed(config.seed, "probe", train.tag), head_kind_name(config.kind));
  TaskHead head;
  head.class_ids = classes;
  head.kind = config.kind;
  head.weights = Tensor(Shape{classes.size(), train.d_model()});
  Rng init(derive_seed(seed, "init"));
  for (auto& v : head.weights.values()) v = config.init_std * init.normal();

  AdamW adam;
  Rng rng(derive_seed(seed, "batches"));
  std::vector<std::size_t> order(train.count());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t d = train.d_model();
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t lo = 0; lo < order.size(); lo += config.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + config.batch_size);
      Tensor x(Shape{hi - lo, d});
      std::vector<std::size_t> targets;
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy_n(train.features.row(order[i]).data(), d, x.row(i - lo).data());
        targets.push_back(column.at(train.labels[order[i]]));
      }
      ad::Graph g;
      ad::Var logits = build_head_logits(g, g.constant(std::move(x), "features"), head, config.logit_options());
      ad::Var loss = g.cross_entropy(logits, targets);
      ad::Bindings b;
      b.bind(head.param_name(), head.weights);
      g.forward(b);
      const ad::Gradients grads = g.backward(loss);
      adam.step(head.param_name(), head.weights, grads.at(head.param_name()), config.learning_rate, 0.0);
    }
  }
  return head;
}

struct ProbeReport {
  std::uint64_t tag = 0;
  HeadKind kind = HeadKind::Linear;
  std::vector<double> task_accuracy;  // a_prob,i
  double average = 0.0;               // A_prob
};

/// Mean of per-task probing accuracies.
inline double probe_average(const std::vector<double>& task_accuracy) {
  if (task_accuracy.empty()) throw ContractError("no tasks to average");
  double s = 0.0;
  for (double a : task_accuracy) s += a;
  return s / static_cast<double>(task_accuracy.size());
}

/// CIL: argmax over every class. TIL: argmax within the sample's task.
inline ProbeReport probe_accuracy(const TaskHead& head, const FeatureSet& test, const TaskStream& stream,
                                  const LogitOptions& options = {}) {
  std::vector<std::size_t> expected = all_classes(stream);
  if (head.class_ids != expected) throw ContractError("probe head does not cover the stream's classes");
  if (test.count() == 0) throw DataError("probe test set is empty");
  ClassifierBank bank(Scenario::CIL, test.d_model(), options);
  bank.heads().push_back(head);
  const Tensor logits = bank.logits_over(test.features, {head.task_id});

  std::vector<std::size_t> correct(stream.tasks.size(), 0), total(stream.tasks.size(), 0);
  std::vector<std::size_t> task_index(stream.num_classes(), 0);
  for (std::size_t t = 0; t < stream.tasks.size(); ++t)
    for (std::size_t c : stream.tasks[t].classes) task_index.at(c) = t;
  for (std::size_t r = 0; r < test.count(); ++r) {
    const std::size_t t = task_index.at(test.labels[r]);
    auto row = logits.row(r);
    std::size_t best = 0;
    bool first = true;
    for (std::size_t k = 0; k < head.class_ids.size(); ++k) {
      if (stream.scenario == Scenario::TIL && task_index[head.class_ids[k]] != t) continue;
      if (first || row[k] > row[best]) best = k;
      first = false;
    }
    correct[t] += head.class_ids[best] == test.labels[r];
    ++total[t];
  }
  ProbeReport rep;
  rep.tag = test.tag;
  rep.kind = head.kind;
  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    if (total[t] == 0) throw DataError("task " + std::to_string(t + 1) + " has no test rows");
    rep.task_accuracy.push_back(static_cast<double>(correct[t]) / static_cast<double>(total[t]));
  }
  rep.average = probe_average(rep.task_accuracy);
  return rep;
}

/// Every requested probe kind on one snapshot's features.
inline std::vector<ProbeReport> probe_snapshot(const SnapshotFeatures& features, const TaskStream& stream,
                                               const std::vector<ProbeConfig>& configs) {
  std::vector<ProbeReport> out;
  for (const ProbeConfig& c : configs)
    out.push_back(probe_accuracy(train_probe(features.train, stream, c), features.test, stream, c.logit_options()));
  return out;
}

/// Probing across a sequence of backbone snapshots; tags label the rows.
inline std::vector<ProbeReport> probing_curve(const std::vector<std::pair<std::uint64_t, const Backbone*>>& snapshots,
                                              const TaskStream& stream, const std::vector<ProbeConfig>& configs) {
  std::vector<ProbeReport> out;
  for (const auto& [tag, bb] : snapshots) {
    const auto reps = probe_snapshot(extract_snapshot_features(*bb, stream, tag), stream, configs);
    out.insert(out.end(), reps.begin(), reps.end());
  }
  return out;
}

}  // namespace ilab
