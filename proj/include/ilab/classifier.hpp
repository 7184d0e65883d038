// SPDX-License-Identifier: Apache-2.0
#pragma once

// Per-task classification heads (linear, cosine-linear, prototype,
// cosine-prototype) and the CIL/TIL logit assembly over them.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ilab/autodiff.hpp"
#include "ilab/errors.hpp"
#include "ilab/rng.hpp"
#include "ilab/stream.hpp"
#include "ilab/tensor.hpp"

namespace ilab {

enum class HeadKind { Linear, CosineLinear, Prototype, CosinePrototype };

inline const char* head_kind_name(HeadKind k) {
  switch (k) {
    case HeadKind::Linear: return "linear";
    case HeadKind::CosineLinear: return "cosine_linear";
    case HeadKind::Prototype: return "prototype";
    case HeadKind::CosinePrototype: return "cosine_prototype";
  }
  return "?";
}

inline HeadKind parse_head_kind(const std::string& s) {
  if (s == "linear" || s == "Lin") return HeadKind::Linear;
  if (s == "cosine_linear" || s == "Cos") return HeadKind::CosineLinear;
  if (s == "prototype") return HeadKind::Prototype;
  if (s == "cosine_prototype") return HeadKind::CosinePrototype;
  throw ValidationError("head kind: unsupported value '" + s + "'");
}

inline bool is_cosine(HeadKind k) { return k == HeadKind::CosineLinear || k == HeadKind::CosinePrototype; }
inline bool is_prototype(HeadKind k) { return k == HeadKind::Prototype || k == HeadKind::CosinePrototype; }

inline constexpr std::array<HeadKind, 4> kAllHeadKinds = {HeadKind::Linear, HeadKind::CosineLinear, HeadKind::Prototype,
                                                           HeadKind::CosinePrototype};

/// One task's classifier. Row i is the class embedding of class_ids[i]; no bias.
struct TaskHead {
  std::size_t task_id = 0;
  std::vector<std::size_t> class_ids;
  Tensor weights;  // n_classes x d_model
  HeadKind kind = HeadKind::Linear;
  bool frozen = false;

  std::string param_name() const { return "head." + std::to_string(task_id); }
  bool trainable() const { return !frozen && !is_prototype(kind); }
};

struct LogitOptions {
  double cosine_scale = 1.0;
  bool euclidean_prototypes = false;
};

/// Logits of one head as a graph node over a feature node.
inline ad::Var build_head_logits(ad::Graph& g, ad::Var features, const TaskHead& head, const LogitOptions& opt) {
  ad::Var w = g.parameter(head.param_name());
  g.set_trainable(head.param_name(), head.trainable());
  if (is_cosine(head.kind)) return g.cosine_logits(features, w, opt.cosine_scale);
  if (head.kind == HeadKind::Prototype && opt.euclidean_prototypes) {
    // x.c - |c|^2/2: equals -|x - c|^2/2 up to a per-sample constant, so
    // argmax and softmax both match nearest-centre classification
    const std::size_t n = head.weights.rows();
    Tensor half_norms(Shape{n});
    for (std::size_t i = 0; i < n; ++i) half_norms[i] = -0.5 * dot(head.weights.row(i), head.weights.row(i));
    return g.add_row(g.matmul_nt(features, w), g.constant(half_norms, "prototype-norms"));
  }
  return g.matmul_nt(features, w);
}

class ClassifierBank {
 public:
  explicit ClassifierBank(Scenario scenario = Scenario::CIL, std::size_t d_model = 0, LogitOptions options = {})
      : scenario_(scenario), d_model_(d_model), options_(options) {}

  Scenario scenario() const { return scenario_; }
  std::size_t d_model() const { return d_model_; }
  const LogitOptions& options() const { return options_; }
  const std::vector<TaskHead>& heads() const { return heads_; }
  std::vector<TaskHead>& heads() { return heads_; }
  bool empty() const { return heads_.empty(); }

  std::size_t total_slots() const {
    std::size_t n = 0;
    for (const auto& h : heads_) n += h.class_ids.size();
    return n;
  }

  /// CIL slot of a global class id (allocation order).
  std::size_t slot_of(std::size_t class_id) const {
    auto it = slots_.find(class_id);
    if (it == slots_.end()) throw LookupError("class " + std::to_string(class_id) + " has no allocated slot");
    return it->second;
  }

  bool has_head(std::size_t task_id) const {
    return std::any_of(heads_.begin(), heads_.end(), [&](const TaskHead& h) { return h.task_id == task_id; });
  }

  const TaskHead& head(std::size_t task_id) const { return heads_[index_of(task_id)]; }
  TaskHead& head(std::size_t task_id) { return heads_[index_of(task_id)]; }

  struct TaskSpec {
    std::size_t task_id;
    std::vector<std::size_t> class_ids;
  };

  /// Appends one head per spec. Trainable heads start from N(0, init_std^2).
  void allocate(const std::vector<TaskSpec>& specs, HeadKind kind, std::uint64_t seed, double init_std = 0.02) {
    if (d_model_ == 0) throw ContractError("classifier bank has no feature dimension");
    std::set<std::size_t> incoming;
    for (const auto& s : specs) {
      if (s.class_ids.empty()) throw AllocationError("task " + std::to_string(s.task_id) + " has no classes");
      if (has_head(s.task_id)) throw AllocationError("task " + std::to_string(s.task_id) + " already has a head");
      for (std::size_t c : s.class_ids)
        if (scenario_ == Scenario::CIL && (slots_.count(c) || !incoming.insert(c).second))
          throw AllocationError("class " + std::to_string(c) + " is allocated twice in a CIL bank");
    }
    for (const auto& s : specs) {
      TaskHead h;
      h.task_id = s.task_id;
      h.class_ids = s.class_ids;
      h.kind = kind;
      h.weights = Tensor(Shape{s.class_ids.size(), d_model_});
      if (!is_prototype(kind)) {
        Rng rng(derive_seed(seed, "head-init", s.task_id));
        for (auto& v : h.weights.values()) v = init_std * rng.normal();
      }
      for (std::size_t c : s.class_ids) {
        const std::size_t next = slots_.size();
        slots_.emplace(c, next);
      }
      heads_.push_back(std::move(h));
    }
  }

  void freeze(const std::vector<std::size_t>& task_ids) {
    for (std::size_t t : task_ids) index_of(t);
    for (std::size_t t : task_ids) head(t).frozen = true;
  }

  /// Logit node over the given heads, concatenated in bank order.
  ad::Var build_logits(ad::Graph& g, ad::Var features, const std::vector<std::size_t>& task_ids) const {
    std::vector<ad::Var> parts;
    for (const TaskHead& h : heads_)
      if (std::find(task_ids.begin(), task_ids.end(), h.task_id) != task_ids.end())
        parts.push_back(build_head_logits(g, features, h, options_));
    if (parts.empty()) throw ContractError("no heads selected for logits");
    return parts.size() == 1 ? parts[0] : g.concat_cols(parts);
  }

  void bind(ad::Bindings& b) const {
    for (const auto& h : heads_) b.bind(h.param_name(), h.weights);
  }

  std::vector<std::size_t> task_ids() const {
    std::vector<std::size_t> ids;
    for (const auto& h : heads_) ids.push_back(h.task_id);
    return ids;
  }

  /// CIL (no task id): every head concatenated in slot order.
  /// TIL (task id required): that head's logits only.
  Tensor logits(const Tensor& features, std::optional<std::size_t> task_id = std::nullopt) const {
    if (scenario_ == Scenario::TIL && !task_id) throw ContractError("TIL logits require a task id");
    if (scenario_ == Scenario::CIL && task_id) throw ContractError("CIL logits take no task id");
    return logits_over(features, task_id ? std::vector<std::size_t>{head(*task_id).task_id} : task_ids());
  }

  /// Logits over an explicit subset of heads (bank order).
  Tensor logits_over(const Tensor& features, const std::vector<std::size_t>& task_ids) const {
    if (features.cols() != d_model_) throw DimensionError("feature width does not match the classifier bank");
    ad::Graph g;
    ad::Var out = build_logits(g, g.constant(features, "features"), task_ids);
    ad::Bindings b;
    bind(b);
    g.forward(b);
    return g.value(out);
  }

  std::uint64_t head_hash(std::size_t task_id) const { return hash_tensor(head(task_id).weights); }

  /// One row per class embedding: format_version,task_id,class_id,w0..w{d-1}.
  void export_csv(const std::string& path) const {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write '" + path + "'");
    os << "format_version,task_id,class_id";
    for (std::size_t k = 0; k < d_model_; ++k) os << ",w" << k;
    os << '\n' << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& h : heads_)
      for (std::size_t r = 0; r < h.class_ids.size(); ++r) {
        os << 1 << ',' << h.task_id + 1 << ',' << h.class_ids[r];
        for (double v : h.weights.row(r)) os << ',' << v;
        os << '\n';
      }
  }

 private:
  std::size_t index_of(std::size_t task_id) const {
    for (std::size_t i = 0; i < heads_.size(); ++i)
      if (heads_[i].task_id == task_id) return i;
    throw LookupError("no head for task " + std::to_string(task_id));
  }

  Scenario scenario_;
  std::size_t d_model_;
  LogitOptions options_;
  std::vector<TaskHead> heads_;
  std::map<std::size_t, std::size_t> slots_;
};

/// Prototype head: row i is the mean training feature of class_ids[i].
inline TaskHead fit_prototype_head(const Tensor& features, const std::vector<std::size_t>& labels,
                                   const std::vector<std::size_t>& class_ids, std::size_t task_id = 0,
                                   HeadKind kind = HeadKind::Prototype) {
  if (features.rows() != labels.size()) throw DimensionError("feature rows do not match label count");
  const std::size_t d = features.cols();
  TaskHead h;
  h.task_id = task_id;
  h.class_ids = class_ids;
  h.kind = kind;
  h.weights = Tensor(Shape{class_ids.size(), d});
  std::map<std::size_t, std::size_t> row_of;
  for (std::size_t i = 0; i < class_ids.size(); ++i) row_of[class_ids[i]] = i;
  std::vector<std::size_t> counts(class_ids.size(), 0);
  for (std::size_t n = 0; n < labels.size(); ++n) {
    auto it = row_of.find(labels[n]);
    if (it == row_of.end()) continue;
    ++counts[it->second];
    for (std::size_t k = 0; k < d; ++k) h.weights.at(it->second, k) += features.at(n, k);
  }
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    if (counts[i] == 0) throw DataError("class " + std::to_string(class_ids[i]) + " has no samples");
    for (std::size_t k = 0; k < d; ++k) h.weights.at(i, k) /= static_cast<double>(counts[i]);
  }
  return h;
}

/// Index of the largest entry in each row (first on ties).
inline std::vector<std::size_t> argmax_rows(const Tensor& logits) {
  std::vector<std::size_t> out(logits.rows());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    auto row = logits.row(r);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace ilab
