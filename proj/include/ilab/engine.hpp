// SPDX-License-Identifier: Apache-2.0
#pragma once

// The incremental-learning loop: sequential fine-tuning (SEQ) and the SEQ*
// strategy flags (warm-up + backbone freeze, old-head freeze, head kind,
// pre-allocation of future heads, replay), plus accuracy-matrix metrics.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
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

struct StrategyConfig {
  std::string name = "SEQ(Lin)";
  HeadKind head_kind = HeadKind::Linear;
  std::size_t warmup_epochs = 0;
  bool freeze_backbone = false;   // FixB: frozen once warm-up on the first task ends
  bool freeze_old_heads = false;  // FixC
  bool preallocate_future = false;  // P
  std::size_t replay_per_class = 0;
  std::size_t epochs_per_task = 5;
  double backbone_lr = 1e-5;
  double head_lr = 1e-3;
  double weight_decay = 0.01;
  std::size_t batch_size = 32;
  Scenario scenario = Scenario::CIL;
  // Restrict the CIL loss to the current task's slots (sensitivity runs).
  bool current_task_loss_only = false;
  double cosine_scale = 1.0;
  bool euclidean_prototypes = false;
};

/// Warm-up epochs used by the W flag: 1 for encoder backbones, 3 for decoders.
inline std::size_t default_warmup_epochs(AttentionMode mode) { return mode == AttentionMode::Causal ? 3 : 1; }

/// The preset rows of the strategy ablation grid.
inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> names = {
      "SEQ(Lin)",          "SEQ(Cos)",           "SEQ(FixB+Cos)",     "SEQ(FixC+Cos)",      "SEQ(FixBC+Cos)",
      "SEQ(W+FixBC+Lin)", "SEQ(P+W+FixBC+Lin)", "SEQ*(W+FixBC+Cos)", "SEQ*(P+W+FixBC+Cos)",
  };
  return names;
}

/// Parses "SEQ(...)" / "SEQ*(...)" with '+'-separated flags from
/// {P, W, FixB, FixC, FixBC, ER, Lin, Cos}. SEQ* with Lin implies replay of one
/// sample per class unless ER is given explicitly.
inline StrategyConfig preset(const std::string& name, AttentionMode mode = AttentionMode::Causal) {
  StrategyConfig s;
  s.name = name;
  bool star = false;
  std::string body;
  if (name.rfind("SEQ*(", 0) == 0) {
    star = true;
    body = name.substr(5);
  } else if (name.rfind("SEQ(", 0) == 0) {
    body = name.substr(4);
  } else {
    throw ValidationError("preset: unknown name '" + name + "'");
  }
  if (body.empty() || body.back() != ')') throw ValidationError("preset: malformed name '" + name + "'");
  body.pop_back();
  bool has_kind = false, has_replay = false;
  std::stringstream ss(body);
  for (std::string flag; std::getline(ss, flag, '+');) {
    if (flag == "Lin" || flag == "Cos") {
      s.head_kind = flag == "Lin" ? HeadKind::Linear : HeadKind::CosineLinear;
      has_kind = true;
    } else if (flag == "P") {
      s.preallocate_future = true;
    } else if (flag == "W") {
      s.warmup_epochs = default_warmup_epochs(mode);
    } else if (flag == "FixB") {
      s.freeze_backbone = true;
    } else if (flag == "FixC") {
      s.freeze_old_heads = true;
    } else if (flag == "FixBC") {
      s.freeze_backbone = s.freeze_old_heads = true;
    } else if (flag == "ER") {
      s.replay_per_class = 1;
      has_replay = true;
    } else {
      throw ValidationError("preset: unknown flag '" + flag + "' in '" + name + "'");
    }
  }
  if (!has_kind) throw ValidationError("preset: '" + name + "' names no head kind (Lin or Cos)");
  if (star && s.head_kind == HeadKind::Linear && !has_replay) s.replay_per_class = 1;
  return s;
}

// ---- accuracy matrix and metrics ------------------------------------------

/// Lower-triangular a_{t,i}, 1 <= i <= t <= T. Unset entries are NaN.
class AccuracyMatrix {
 public:
  explicit AccuracyMatrix(std::size_t n_tasks = 0) {
    for (std::size_t t = 1; t <= n_tasks; ++t) rows_.emplace_back(t, std::numeric_limits<double>::quiet_NaN());
  }

  std::size_t tasks() const { return rows_.size(); }

  void set(std::size_t t, std::size_t i, double acc) {
    check(t, i);
    if (!(acc >= 0.0 && acc <= 1.0)) throw ContractError("accuracy must lie in [0, 1]");
    rows_[t - 1][i - 1] = acc;
  }

  double at(std::size_t t, std::size_t i) const {
    check(t, i);
    return rows_[t - 1][i - 1];
  }

  const std::vector<double>& row(std::size_t t) const {
    if (t == 0 || t > rows_.size()) throw ContractError("row " + std::to_string(t) + " outside the matrix");
    return rows_[t - 1];
  }

  bool row_complete(std::size_t t) const {
    const auto& r = row(t);
    return std::none_of(r.begin(), r.end(), [](double v) { return std::isnan(v); });
  }

  std::size_t entry_count() const {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
  }

 private:
  void check(std::size_t t, std::size_t i) const {
    if (t == 0 || t > rows_.size() || i == 0 || i > t)
      throw ContractError("a_{" + std::to_string(t) + "," + std::to_string(i) + "} is outside the lower triangle");
  }
  std::vector<std::vector<double>> rows_;
};

/// A_t: mean of row t.
inline double average_accuracy(const AccuracyMatrix& m, std::size_t t) {
  if (!m.row_complete(t)) throw ContractError("row " + std::to_string(t) + " is incomplete");
  const auto& r = m.row(t);
  double s = 0.0;
  for (double v : r) s += v;
  return s / static_cast<double>(t);
}

/// Mean of A_1..A_T.
inline double avg_incremental_accuracy(const AccuracyMatrix& m) {
  if (m.tasks() == 0) throw ContractError("empty accuracy matrix");
  double s = 0.0;
  for (std::size_t t = 1; t <= m.tasks(); ++t) s += average_accuracy(m, t);
  return s / static_cast<double>(m.tasks());
}

// ---- training state ---------------------------------------------------------

struct IlState {
  Backbone backbone;
  ClassifierBank bank;
  ReplayBuffer buffer;
  std::size_t trained = 0;  // tasks finished so far
};

struct TaskStats {
  std::size_t task = 0;
  std::vector<double> epoch_losses;  // mean batch loss per epoch
  std::size_t trainable_parameters = 0;  // at the last epoch
  double seconds = 0.0;
};

using Logger = std::function<void(const std::string&)>;

namespace detail {

inline std::size_t count_trainable(const IlState& s, bool backbone_trainable) {
  std::size_t n = backbone_trainable ? s.backbone.num_parameters() : 0;
  for (const auto& h : s.bank.heads())
    if (h.trainable()) n += h.weights.size();
  return n;
}

inline std::vector<const LabeledExample*> pointers(const std::vector<LabeledExample>& v) {
  std::vector<const LabeledExample*> out;
  for (const auto& e : v) out.push_back(&e);
  return out;
}

}  // namespace detail

/// Trains the next task in sequence. `task_index` must equal state.trained.
inline TaskStats train_task(IlState& state, const TaskStream& stream, std::size_t task_index,
                            const StrategyConfig& strategy, std::uint64_t seed, const Logger& log = {}) {
  const auto start = std::chrono::steady_clock::now();
  if (task_index >= stream.tasks.size()) throw ContractError("task index beyond the stream");
  if (task_index != state.trained) throw ContractError("tasks must be trained once each, in order");
  const Task& task = stream.tasks[task_index];
  if (!state.bank.has_head(task.id)) throw ContractError("task " + std::to_string(task.id) + " has no allocated head");
  if (strategy.preallocate_future)
    for (const Task& t : stream.tasks)
      if (!state.bank.has_head(t.id)) throw ContractError("pre-allocation requested but future heads are missing");
  if (strategy.batch_size == 0) throw ConfigError("batch_size must be positive");

  if (strategy.freeze_old_heads) {
    std::vector<std::size_t> old;
    for (std::size_t i = 0; i < task_index; ++i) old.push_back(stream.tasks[i].id);
    state.bank.freeze(old);
  }
  if (strategy.freeze_backbone && (task_index > 0 || strategy.warmup_epochs == 0)) state.backbone.set_frozen(true);

  const bool cil = stream.scenario == Scenario::CIL;
  // Heads in the softmax: everything allocated (past, current, pre-allocated
  // future), or just the current head when the loss is restricted.
  std::vector<std::size_t> visible =
      (cil && !strategy.current_task_loss_only) ? state.bank.task_ids() : std::vector<std::size_t>{task.id};
  std::map<std::size_t, std::size_t> slot;  // class id -> column in the visible logits
  for (const TaskHead& h : state.bank.heads())
    if (std::find(visible.begin(), visible.end(), h.task_id) != visible.end())
      for (std::size_t c : h.class_ids) slot.emplace(c, slot.size());

  TaskStats stats;
  stats.task = task_index + 1;
  AdamW adam;
  const bool heads_trainable = std::any_of(state.bank.heads().begin(), state.bank.heads().end(),
                                           [](const TaskHead& h) { return h.trainable(); });
  std::optional<Tensor> cached;  // training features when the backbone is frozen
  std::map<const LabeledExample*, std::size_t> cached_row;
  const std::size_t d = state.backbone.config().d_model;

  for (std::size_t epoch = 0; epoch < strategy.epochs_per_task; ++epoch) {
    if (strategy.freeze_backbone && task_index == 0 && epoch == strategy.warmup_epochs) state.backbone.set_frozen(true);
    const bool backbone_trainable = !state.backbone.frozen();
    stats.trainable_parameters = detail::count_trainable(state, backbone_trainable);
    if (!backbone_trainable && !heads_trainable) break;

    if (!backbone_trainable && !cached) {
      std::vector<const LabeledExample*> all = detail::pointers(task.train);
      for (const auto& [c, v] : state.buffer.stored())
        for (const auto& e : v) all.push_back(&e);
      cached = extract_features(state.backbone, all);
      for (std::size_t i = 0; i < all.size(); ++i) cached_row[all[i]] = i;
    }

    Rng rng(derive_seed(seed, "batches", task_index * 100000 + epoch));
    std::vector<std::size_t> order(task.train.size());
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(order);

    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t lo = 0; lo < order.size(); lo += strategy.batch_size) {
      const std::size_t hi = std::min(order.size(), lo + strategy.batch_size);
      std::vector<const LabeledExample*> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(&task.train[order[i]]);
      std::vector<LabeledExample> replay;
      if (!strategy.current_task_loss_only && !state.buffer.empty()) {
        replay = state.buffer.sample(std::min(strategy.batch_size, state.buffer.size()), rng);
      }
      // replayed copies are looked up by content in the cache below
      std::vector<const LabeledExample*> replay_src;
      for (const auto& r : replay) {
        const LabeledExample* src = nullptr;
        for (const auto& [c, v] : state.buffer.stored())
          for (const auto& e : v)
            if (!src && e == r) src = &e;
        replay_src.push_back(src);
        batch.push_back(src);
      }

      ad::Graph g;
      ad::Var features;
      if (backbone_trainable) {
        std::vector<const std::vector<std::size_t>*> seqs;
        for (const auto* e : batch) seqs.push_back(&e->tokens);
        features = build_features(g, state.backbone.config(), TokenBatch::from_sequences(seqs));
      } else {
        Tensor f(Shape{batch.size(), d});
        for (std::size_t i = 0; i < batch.size(); ++i) {
          const std::size_t r = cached_row.at(batch[i]);
          std::copy_n(cached->row(r).data(), d, f.row(i).data());
        }
        features = g.constant(std::move(f), "cached-features");
      }

      ad::Var loss;
      if (cil) {
        std::vector<std::size_t> targets;
        for (const auto* e : batch) targets.push_back(slot.at(e->label));
        loss = g.cross_entropy(state.bank.build_logits(g, features, visible), targets);
      } else {
        // TIL: each sample is scored by its own task's head
        std::map<std::size_t, std::vector<std::size_t>> rows_of_task;
        for (std::size_t i = 0; i < batch.size(); ++i) rows_of_task[stream.task_of(batch[i]->label)].push_back(i);
        std::vector<ad::Var> parts;
        for (const auto& [tid, rows] : rows_of_task) {
          const TaskHead& h = state.bank.head(tid);
          std::vector<std::size_t> targets;
          for (std::size_t r : rows) {
            const auto pos = std::find(h.class_ids.begin(), h.class_ids.end(), batch[r]->label) - h.class_ids.begin();
            targets.push_back(static_cast<std::size_t>(pos));
          }
          ad::Var ce = g.cross_entropy(state.bank.build_logits(g, g.gather_rows(features, rows), {tid}), targets);
          parts.push_back(g.scale(ce, static_cast<double>(rows.size()) / static_cast<double>(batch.size())));
        }
        loss = parts[0];
        for (std::size_t k = 1; k < parts.size(); ++k) loss = g.add(loss, parts[k]);
      }

      ad::Bindings b;
      state.backbone.bind(b);
      state.bank.bind(b);
      state.backbone.set_trainable(g, backbone_trainable);
      g.forward(b);
      loss_sum += g.value(loss)[0];
      ++n_batches;
      const ad::Gradients grads = g.backward(loss);

      if (backbone_trainable)
        for (auto& [name, t] : state.backbone.params())
          if (auto it = grads.find(name); it != grads.end())
            adam.step(name, t, it->second, strategy.backbone_lr, strategy.weight_decay);
      for (TaskHead& h : state.bank.heads()) {
        if (!h.trainable()) continue;
        if (auto it = grads.find(h.param_name()); it != grads.end())
          adam.step(h.param_name(), h.weights, it->second, strategy.head_lr, strategy.weight_decay);
      }
    }
    stats.epoch_losses.push_back(n_batches ? loss_sum / static_cast<double>(n_batches) : 0.0);
  }
  if (strategy.freeze_backbone && task_index == 0) state.backbone.set_frozen(true);

  if (is_prototype(strategy.head_kind)) {
    const Tensor f = extract_features(state.backbone, detail::pointers(task.train));
    std::vector<std::size_t> labels;
    for (const auto& e : task.train) labels.push_back(e.label);
    TaskHead& h = state.bank.head(task.id);
    const bool frozen = h.frozen;
    h = fit_prototype_head(f, labels, h.class_ids, task.id, strategy.head_kind);
    h.frozen = frozen;
  }

  state.buffer.update(task);
  ++state.trained;
  stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (log) {
    std::ostringstream os;
    os << "task " << stats.task << ": " << stats.epoch_losses.size() << " epochs, trainable parameters "
       << stats.trainable_parameters << ", " << stats.seconds << " s";
    if (!stats.epoch_losses.empty()) os << ", final loss " << stats.epoch_losses.back();
    log(os.str());
  }
  return stats;
}

/// Accuracy on the test split of tasks 1..t, given test features in the
/// order of `test_examples(stream, t)`.
inline std::vector<double> evaluate_with_features(const ClassifierBank& bank, const TaskStream& stream, std::size_t t,
                                                  const Tensor& features) {
  std::vector<std::size_t> visible;
  for (std::size_t i = 0; i < t; ++i) visible.push_back(stream.tasks[i].id);
  std::vector<std::size_t> slot_class;  // column -> class id
  for (const TaskHead& h : bank.heads())
    if (std::find(visible.begin(), visible.end(), h.task_id) != visible.end())
      slot_class.insert(slot_class.end(), h.class_ids.begin(), h.class_ids.end());

  std::vector<double> row;
  std::size_t offset = 0;
  for (std::size_t i = 0; i < t; ++i) {
    const Task& task = stream.tasks[i];
    const std::size_t n = task.test.size();
    if (n == 0) throw DataError("task " + std::to_string(task.id) + " has an empty test split");
    Tensor f(Shape{n, features.cols()});
    std::copy_n(features.data() + offset * features.cols(), f.size(), f.data());
    offset += n;
    std::size_t correct = 0;
    if (stream.scenario == Scenario::CIL) {
      const auto pred = argmax_rows(bank.logits_over(f, visible));
      for (std::size_t k = 0; k < n; ++k) correct += slot_class[pred[k]] == task.test[k].label;
    } else {
      const TaskHead& h = bank.head(task.id);
      const auto pred = argmax_rows(bank.logits_over(f, {task.id}));
      for (std::size_t k = 0; k < n; ++k) correct += h.class_ids[pred[k]] == task.test[k].label;
    }
    row.push_back(static_cast<double>(correct) / static_cast<double>(n));
  }
  return row;
}

inline std::vector<const LabeledExample*> test_examples(const TaskStream& stream, std::size_t t) {
  std::vector<const LabeledExample*> out;
  for (std::size_t i = 0; i < t; ++i)
    for (const auto& e : stream.tasks[i].test) out.push_back(&e);
  return out;
}

/// Row a_{t,1..t}. CIL: argmax over the slots of tasks 1..t (pre-allocated
/// future slots excluded). TIL: argmax within the true task's head.
inline std::vector<double> evaluate_observed(const IlState& state, const TaskStream& stream, std::size_t t) {
  if (t == 0 || t > state.trained) throw ContractError("cannot evaluate task " + std::to_string(t) + " before training it");
  return evaluate_with_features(state.bank, stream, t, extract_features(state.backbone, test_examples(stream, t)));
}

// ---- experiments ------------------------------------------------------------

struct Snapshot {
  std::size_t task = 0;  // tasks trained when taken (0 = before any training)
  Backbone backbone;
  ClassifierBank bank;
};

struct ExperimentRecord {
  std::string preset;
  std::uint64_t seed = 0;
  AccuracyMatrix accuracy;
  std::vector<double> average_accuracy;  // A_1..A_T
  double avg_incremental_accuracy = 0.0;
  std::vector<Snapshot> snapshots;  // snapshots[0] is the initial state
  std::vector<TaskStats> stats;
  std::vector<std::string> warnings;

  double final_average_accuracy() const { return average_accuracy.back(); }
};

inline ExperimentRecord run_experiment(const TaskStream& stream, const Backbone& backbone,
                                       const StrategyConfig& strategy, std::uint64_t seed, const Logger& log = {}) {
  if (stream.scenario != strategy.scenario) throw ContractError("stream scenario does not match the strategy scenario");
  if (stream.tasks.empty()) throw ContractError("empty task stream");
  if (stream.vocab_size > backbone.config().vocab_size) throw ConfigError("stream vocabulary exceeds the backbone's");
  if (stream.max_length > backbone.config().max_seq_len) throw ConfigError("stream sequences exceed max_seq_len");

  ExperimentRecord rec;
  rec.preset = strategy.name;
  rec.seed = seed;
  rec.accuracy = AccuracyMatrix(stream.tasks.size());
  if (strategy.head_kind == HeadKind::Linear && stream.scenario == Scenario::CIL && strategy.replay_per_class == 0 &&
      strategy.freeze_old_heads) {
    rec.warnings.push_back("linear heads with frozen old heads in CIL and no replay: new classes will dominate");
    if (log) log("warning: " + rec.warnings.back());
  }

  IlState state{backbone,
                ClassifierBank(stream.scenario, backbone.config().d_model,
                               LogitOptions{strategy.cosine_scale, strategy.euclidean_prototypes}),
                ReplayBuffer(strategy.replay_per_class, derive_seed(seed, "replay")), 0};
  state.backbone.set_frozen(false);
  const std::uint64_t head_seed = derive_seed(seed, "heads");
  if (strategy.preallocate_future) {
    std::vector<ClassifierBank::TaskSpec> specs;
    for (const Task& t : stream.tasks) specs.push_back({t.id, t.classes});
    state.bank.allocate(specs, strategy.head_kind, head_seed);
  }
  rec.snapshots.push_back({0, state.backbone, state.bank});

  for (std::size_t t = 0; t < stream.tasks.size(); ++t) {
    if (!state.bank.has_head(stream.tasks[t].id))
      state.bank.allocate({{stream.tasks[t].id, stream.tasks[t].classes}}, strategy.head_kind, head_seed);
    rec.stats.push_back(train_task(state, stream, t, strategy, seed, log));
    const auto row = evaluate_observed(state, stream, t + 1);
    for (std::size_t i = 0; i < row.size(); ++i) rec.accuracy.set(t + 1, i + 1, row[i]);
    rec.average_accuracy.push_back(average_accuracy(rec.accuracy, t + 1));
    rec.snapshots.push_back({t + 1, state.backbone, state.bank});
    if (log) {
      std::ostringstream os;
      os << "after task " << t + 1 << ": A_t = " << rec.average_accuracy.back();
      log(os.str());
    }
  }
  rec.avg_incremental_accuracy = avg_incremental_accuracy(rec.accuracy);
  return rec;
}

}  // namespace ilab
