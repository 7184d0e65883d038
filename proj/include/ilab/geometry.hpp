// SPDX-License-Identifier: Apache-2.0
#pragma once

// Classifier forensics: class centres, cosine matrices between centres and
// class embeddings, moving distance, class-embedding norms, and cosine/norm
// histograms over feature and embedding populations.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ilab/classifier.hpp"
#include "ilab/errors.hpp"
#include "ilab/rng.hpp"
#include "ilab/stream.hpp"
#include "ilab/tensor.hpp"
#include "ilab/transformer.hpp"

namespace ilab {

/// Per-class mean of feature rows, one row per class id 0..n_classes-1.
inline Tensor class_centers(const Tensor& features, const std::vector<std::size_t>& labels, std::size_t n_classes) {
  if (features.rows() != labels.size()) throw DimensionError("feature rows do not match label count");
  const std::size_t d = features.cols();
  Tensor c(Shape{n_classes, d});
  std::vector<std::size_t> count(n_classes, 0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] >= n_classes) throw InputError("label " + std::to_string(labels[r]) + " out of range");
    ++count[labels[r]];
    for (std::size_t k = 0; k < d; ++k) c.at(labels[r], k) += features.at(r, k);
  }
  for (std::size_t i = 0; i < n_classes; ++i) {
    if (count[i] == 0) throw DataError("class " + std::to_string(i) + " has no training samples");
    for (std::size_t k = 0; k < d; ++k) c.at(i, k) /= static_cast<double>(count[i]);
  }
  return c;
}

/// Centres of every class of the stream from the training split.
inline Tensor class_centers(const Backbone& bb, const TaskStream& stream) {
  std::vector<const LabeledExample*> ex;
  std::vector<std::size_t> labels;
  for (const Task& t : stream.tasks)
    for (const auto& e : t.train) {
      ex.push_back(&e);
      labels.push_back(e.label);
    }
  if (ex.empty()) throw DataError("stream has no training examples");
  return class_centers(extract_features(bb, ex), labels, stream.num_classes());
}

/// C[m, n] = cosine(center m, embedding n).
struct CosineMatrix {
  std::size_t task = 0;         // task s whose embeddings form the columns
  std::size_t measured_at = 0;  // tasks trained when measured
  std::vector<std::size_t> class_ids;  // column classes
  Tensor values;                // |Y_all| x |Y_s|
};

inline CosineMatrix cosine_matrix(const Tensor& embeddings, const Tensor& centers, std::size_t task = 0,
                                  std::size_t measured_at = 0, std::vector<std::size_t> class_ids = {}) {
  if (embeddings.cols() != centers.cols())
    throw ContractError("embedding width " + std::to_string(embeddings.cols()) + " != centre width " +
                        std::to_string(centers.cols()));
  CosineMatrix m;
  m.task = task;
  m.measured_at = measured_at;
  m.class_ids = std::move(class_ids);
  m.values = Tensor(Shape{centers.rows(), embeddings.rows()});
  for (std::size_t i = 0; i < centers.rows(); ++i)
    for (std::size_t j = 0; j < embeddings.rows(); ++j)
      m.values.at(i, j) = cosine(centers.row(i), embeddings.row(j));
  return m;
}

/// Mean absolute entrywise difference between two matrices of the same task.
inline double moving_distance(const CosineMatrix& ref, const CosineMatrix& now) {
  if (ref.values.shape() != now.values.shape()) throw ContractError("cosine matrices differ in shape");
  if (ref.task != now.task || ref.class_ids != now.class_ids)
    throw ContractError("cosine matrices index different task classes");
  double s = 0.0;
  const auto a = ref.values.values(), b = now.values.values();
  for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(a[k] - b[k]);
  return s / static_cast<double>(a.size());
}

/// Rows of `weights` belonging to `class_ids` (in that order).
inline Tensor embedding_rows(const TaskHead& head, const std::vector<std::size_t>& class_ids) {
  Tensor out(Shape{class_ids.size(), head.weights.cols()});
  for (std::size_t i = 0; i < class_ids.size(); ++i) {
    auto it = std::find(head.class_ids.begin(), head.class_ids.end(), class_ids[i]);
    if (it == head.class_ids.end()) throw LookupError("class " + std::to_string(class_ids[i]) + " not in head");
    auto src = head.weights.row(static_cast<std::size_t>(it - head.class_ids.begin()));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

struct MovingDistanceEntry {
  std::string source;  // "observed" or "probing"
  std::size_t task = 0;  // i, 1-based
  std::size_t at = 0;    // i + k, 1-based
  double value = 0.0;
};

/// MD_{i+k}^i for every i <= i+k <= T. `heads_at[t-1]` holds the heads whose
/// rows give each class's embedding after task t; `centers_at[t-1]` the
/// centres measured with the backbone after task t.
inline std::vector<MovingDistanceEntry> moving_distance_report(const TaskStream& stream,
                                                               const std::vector<Tensor>& centers_at,
                                                               const std::vector<std::vector<TaskHead>>& heads_at,
                                                               const std::string& source) {
  const std::size_t T = stream.tasks.size();
  if (centers_at.size() != T || heads_at.size() != T) throw ContractError("one snapshot per task is required");
  auto find_head = [&](std::size_t t, std::size_t cls) -> const TaskHead& {
    for (const TaskHead& h : heads_at[t])
      if (std::find(h.class_ids.begin(), h.class_ids.end(), cls) != h.class_ids.end()) return h;
    throw LookupError("no head holds class " + std::to_string(cls));
  };
  std::vector<MovingDistanceEntry> out;
  for (std::size_t i = 0; i < T; ++i) {
    const auto& cls = stream.tasks[i].classes;
    const Tensor ref_emb = embedding_rows(find_head(i, cls.front()), cls);
    const CosineMatrix ref = cosine_matrix(ref_emb, centers_at[i], i + 1, i + 1, cls);
    for (std::size_t t = i; t < T; ++t) {
      const CosineMatrix now =
          cosine_matrix(embedding_rows(find_head(t, cls.front()), cls), centers_at[t], i + 1, t + 1, cls);
      out.push_back({source, i + 1, t + 1, moving_distance(ref, now)});
    }
  }
  return out;
}

// ---- norms ----------------------------------------------------------------

struct NormReport {
  std::vector<std::size_t> task_ids;   // bank order, 1-based
  std::vector<double> mean_norm;       // per task
  std::vector<std::vector<double>> class_norms;  // per task, in class order

  /// Class norms of each task sorted in decreasing order (presentation only).
  std::vector<std::vector<double>> sorted_class_norms() const {
    auto out = class_norms;
    for (auto& v : out) std::sort(v.begin(), v.end(), std::greater<>());
    return out;
  }
};

inline NormReport norm_report(const ClassifierBank& bank) {
  if (bank.empty()) throw ContractError("norm report of an empty bank");
  NormReport r;
  for (const TaskHead& h : bank.heads()) {
    std::vector<double> norms;
    double s = 0.0;
    for (std::size_t i = 0; i < h.weights.rows(); ++i) {
      norms.push_back(l2_norm(h.weights.row(i)));
      s += norms.back();
    }
    r.task_ids.push_back(h.task_id + 1);
    r.mean_norm.push_back(s / static_cast<double>(norms.size()));
    r.class_norms.push_back(std::move(norms));
  }
  return r;
}

// ---- histograms -------------------------------------------------------------

inline constexpr std::size_t kHistogramBins = 100;
inline constexpr std::size_t kDefaultPairCap = 1000000;

struct Histogram {
  std::string metric;  // "cosine" or "norm"
  std::string population_a;
  std::string population_b;  // empty for norms
  double lo = 0.0, hi = 0.0;
  std::vector<std::size_t> counts;

  std::size_t total() const {
    std::size_t n = 0;
    for (auto c : counts) n += c;
    return n;
  }
  double edge(std::size_t k) const { return lo + (hi - lo) * static_cast<double>(k) / static_cast<double>(counts.size()); }
};

struct HistogramReport {
  std::vector<Histogram> histograms;
};

namespace detail {

inline std::size_t bin_of(double v, double lo, double hi, std::size_t bins) {
  if (hi <= lo) return 0;
  const double x = (v - lo) / (hi - lo) * static_cast<double>(bins);
  if (!(x > 0.0)) return 0;
  return std::min(bins - 1, static_cast<std::size_t>(x));
}

}  // namespace detail

using Population = std::pair<std::string, const Tensor*>;

/// Cosine histograms within each population and across every pair of
/// populations; L2-norm histograms per population. Pair sets larger than
/// `pair_cap` are subsampled uniformly with replacement.
inline HistogramReport geometry_histograms(const std::vector<Population>& populations, std::size_t pair_cap,
                                           std::uint64_t seed, std::size_t bins = kHistogramBins) {
  if (populations.empty()) throw ContractError("no populations");
  if (bins == 0 || pair_cap == 0) throw ConfigError("bins and pair_cap must be positive");
  const std::size_t d = populations.front().second->cols();
  for (const auto& [name, t] : populations)
    if (t->cols() != d) throw ContractError("population '" + name + "' has width " + std::to_string(t->cols()));

  HistogramReport rep;
  for (std::size_t a = 0; a < populations.size(); ++a)
    for (std::size_t b = a; b < populations.size(); ++b) {
      const Tensor& A = *populations[a].second;
      const Tensor& B = *populations[b].second;
      Histogram h{"cosine", populations[a].first, populations[b].first, -1.0, 1.0,
                  std::vector<std::size_t>(bins, 0)};
      auto add = [&](std::size_t i, std::size_t j) {
        ++h.counts[detail::bin_of(cosine(A.row(i), B.row(j)), -1.0, 1.0, bins)];
      };
      const bool same = a == b;
      const std::size_t n = same ? A.rows() * (A.rows() - 1) / 2 : A.rows() * B.rows();
      if (n <= pair_cap) {
        for (std::size_t i = 0; i < A.rows(); ++i)
          for (std::size_t j = same ? i + 1 : 0; j < B.rows(); ++j) add(i, j);
      } else {
        Rng rng(derive_seed(seed, "pairs:" + populations[a].first + ":" + populations[b].first));
        for (std::size_t k = 0; k < pair_cap; ++k) {
          std::size_t i = rng.index(A.rows()), j = rng.index(B.rows());
          if (same)
            while (j == i) j = rng.index(B.rows());
          add(i, j);
        }
      }
      rep.histograms.push_back(std::move(h));
    }
  for (const auto& [name, t] : populations) {
    std::vector<double> norms;
    for (std::size_t i = 0; i < t->rows(); ++i) norms.push_back(l2_norm(t->row(i)));
    const auto [mn, mx] = std::minmax_element(norms.begin(), norms.end());
    Histogram h{"norm", name, "", *mn, *mx, std::vector<std::size_t>(bins, 0)};
    for (double v : norms) ++h.counts[detail::bin_of(v, h.lo, h.hi, bins)];
    rep.histograms.push_back(std::move(h));
  }
  return rep;
}

}  // namespace ilab
