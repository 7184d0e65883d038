// SPDX-License-Identifier: Apache-2.0
#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Graph is built once (structure only), evaluated with forward() against a
// set of parameter bindings, and differentiated with backward(). Rebuilding
// is cheap, so training code builds one graph per batch.
//
// All reductions sum left to right in index order, so results are
// bit-reproducible for fixed bindings.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ilab/errors.hpp"
#include "ilab/tensor.hpp"

namespace ilab::ad {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kCosineEps = 1e-12;

struct Var {
  std::size_t id = 0;
};

/// Non-owning name -> tensor map. Bound tensors must outlive forward/backward.
class Bindings {
 public:
  void bind(const std::string& name, const Tensor& t) { map_[name] = &t; }
  const Tensor* find(const std::string& name) const {
    auto it = map_.find(name);
    return it == map_.end() ? nullptr : it->second;
  }
  bool contains(const std::string& name) const { return map_.count(name) != 0; }

 private:
  std::unordered_map<std::string, const Tensor*> map_;
};

using Gradients = std::map<std::string, Tensor>;

enum class Op {
  Parameter,
  Constant,
  MatMul,
  MatMulNT,
  Add,
  AddRow,
  Mul,
  Scale,
  Softmax,
  LayerNorm,
  Gelu,
  Embedding,
  CrossEntropy,
  CosineLogits,
  Mean,
  Sum,
  Slice,
  ConcatCols,
  ConcatRows,
  GatherRows,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::Parameter: return "parameter";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::MatMulNT: return "matmul_nt";
    case Op::Add: return "add";
    case Op::AddRow: return "add_row";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Softmax: return "softmax";
    case Op::LayerNorm: return "layer_norm";
    case Op::Gelu: return "gelu";
    case Op::Embedding: return "embedding";
    case Op::CrossEntropy: return "cross_entropy";
    case Op::CosineLogits: return "cosine_logits";
    case Op::Mean: return "mean";
    case Op::Sum: return "sum";
    case Op::Slice: return "slice";
    case Op::ConcatCols: return "concat_cols";
    case Op::ConcatRows: return "concat_rows";
    case Op::GatherRows: return "gather_rows";
  }
  return "?";
}

namespace detail {

inline double gelu_tanh(double x) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(k * (x + 0.044715 * x * x * x)));
}

inline double gelu_tanh_grad(double x) {
  constexpr double k = 0.7978845608028654;
  const double t = std::tanh(k * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x);
}

}  // namespace detail

class Graph {
 public:
  // ---- construction --------------------------------------------------------

  /// Parameter node bound by name at forward time. Repeated calls with the
  /// same name return the same node.
  Var parameter(const std::string& name) {
    if (auto it = params_.find(name); it != params_.end()) return Var{it->second};
    Node n;
    n.op = Op::Parameter;
    n.label = name;
    const Var v = push(std::move(n));
    params_.emplace(name, v.id);
    if (!trainable_.count(name)) trainable_[name] = true;
    return v;
  }

  Var constant(Tensor value, std::string label = "constant") {
    Node n;
    n.op = Op::Constant;
    n.label = std::move(label);
    n.own = std::move(value);
    return push(std::move(n));
  }

  Var matmul(Var a, Var b) { return binary(Op::MatMul, a, b); }
  /// a * b^T
  Var matmul_nt(Var a, Var b) { return binary(Op::MatMulNT, a, b); }
  Var add(Var a, Var b) { return binary(Op::Add, a, b); }
  /// Broadcast a length-C vector over every row of an R x C matrix.
  Var add_row(Var x, Var bias) { return binary(Op::AddRow, x, bias); }
  Var mul(Var a, Var b) { return binary(Op::Mul, a, b); }

  Var scale(Var x, double s) {
    Node n = unary_node(Op::Scale, x);
    n.scalar = s;
    return push(std::move(n));
  }

  Var softmax(Var x) { return push(unary_node(Op::Softmax, x)); }

  /// Row-wise softmax over allowed entries only; disallowed entries are 0.
  /// `allowed` is row-major with the same extent as x.
  Var masked_softmax(Var x, std::vector<std::uint8_t> allowed) {
    Node n = unary_node(Op::Softmax, x);
    n.mask = std::move(allowed);
    return push(std::move(n));
  }

  Var layer_norm(Var x, Var gain, Var offset) {
    Node n;
    n.op = Op::LayerNorm;
    n.inputs = {x.id, gain.id, offset.id};
    return push(std::move(n));
  }

  Var gelu(Var x) { return push(unary_node(Op::Gelu, x)); }

  Var embedding(Var table, std::vector<std::size_t> ids) {
    Node n = unary_node(Op::Embedding, table);
    n.indices = std::move(ids);
    return push(std::move(n));
  }

  /// Mean over rows of softmax cross-entropy against integer targets.
  Var cross_entropy(Var logits, std::vector<std::size_t> targets) {
    Node n = unary_node(Op::CrossEntropy, logits);
    n.indices = std::move(targets);
    return push(std::move(n));
  }

  /// scale * cos(x_i, w_j) for every row pair; norms clamped at 1e-12.
  Var cosine_logits(Var x, Var w, double scale = 1.0) {
    Node n;
    n.op = Op::CosineLogits;
    n.inputs = {x.id, w.id};
    n.scalar = scale;
    return push(std::move(n));
  }

  Var mean(Var x) { return push(unary_node(Op::Mean, x)); }
  Var sum(Var x) { return push(unary_node(Op::Sum, x)); }

  Var slice(Var x, std::size_t row0, std::size_t nrows, std::size_t col0, std::size_t ncols) {
    Node n = unary_node(Op::Slice, x);
    n.indices = {row0, nrows, col0, ncols};
    return push(std::move(n));
  }

  Var concat_cols(const std::vector<Var>& parts) { return nary(Op::ConcatCols, parts); }
  Var concat_rows(const std::vector<Var>& parts) { return nary(Op::ConcatRows, parts); }

  Var gather_rows(Var x, std::vector<std::size_t> rows) {
    Node n = unary_node(Op::GatherRows, x);
    n.indices = std::move(rows);
    return push(std::move(n));
  }

  // ---- configuration -------------------------------------------------------

  void set_trainable(const std::string& name, bool trainable) { trainable_[name] = trainable; }
  bool trainable(const std::string& name) const {
    auto it = trainable_.find(name);
    return it == trainable_.end() || it->second;
  }

  void name_output(Var v, std::string name) { outputs_[std::move(name)] = v.id; }

  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (const auto& [name, id] : params_) names.push_back(name);
    return names;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // ---- evaluation ----------------------------------------------------------

  /// Evaluates every node in insertion (topological) order and returns the
  /// named outputs.
  std::map<std::string, Tensor> forward(const Bindings& bindings) {
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      eval(i, bindings);
      if (!value_of(i).all_finite())
        throw NumericError("non-finite output at " + describe(i));
    }
    evaluated_ = true;
    std::map<std::string, Tensor> out;
    for (const auto& [name, id] : outputs_) out.emplace(name, value_of(id));
    return out;
  }

  const Tensor& value(Var v) const { return value_of(v.id); }

  /// Gradients of a scalar node with respect to every parameter in the graph.
  /// Frozen parameters get exact zero tensors.
  Gradients backward(Var loss) {
    if (!evaluated_) throw ContractError("backward called before forward");
    if (value_of(loss.id).size() != 1)
      throw ContractError("backward requires a scalar loss, got " + shape_string(value_of(loss.id).shape()) +
                          " at " + describe(loss.id));

    std::vector<std::uint8_t> needs(nodes_.size(), 0);
    for (std::size_t i = 0; i <= loss.id; ++i) {
      const Node& n = nodes_[i];
      if (n.op == Op::Parameter) {
        needs[i] = trainable(n.label) ? 1 : 0;
      } else {
        for (std::size_t in : n.inputs) needs[i] = needs[i] || needs[in];
      }
    }

    for (auto& n : nodes_) n.grad = Tensor();
    std::vector<std::uint8_t> has_grad(nodes_.size(), 0);
    auto grad = [&](std::size_t id) -> Tensor& {
      if (!has_grad[id]) {
        nodes_[id].grad = Tensor::zeros_like(value_of(id));
        has_grad[id] = 1;
      }
      return nodes_[id].grad;
    };

    if (needs[loss.id]) {
      grad(loss.id)[0] = 1.0;
      for (std::size_t i = loss.id + 1; i-- > 0;) {
        if (!needs[i] || !has_grad[i] || nodes_[i].op == Op::Parameter) continue;
        backprop(i, needs, grad);
      }
    }

    Gradients out;
    for (const auto& [name, id] : params_) {
      if (needs[id] && has_grad[id])
        out.emplace(name, nodes_[id].grad);
      else
        out.emplace(name, Tensor::zeros_like(value_of(id)));
    }
    return out;
  }

 private:
  struct Node {
    Op op = Op::Constant;
    std::vector<std::size_t> inputs;
    std::string label;
    std::vector<std::size_t> indices;
    std::vector<std::uint8_t> mask;
    double scalar = 1.0;
    Tensor own;
    const Tensor* bound = nullptr;
    std::vector<double> aux;  // per-op cache for backward
    Tensor grad;
  };

  Var push(Node n) {
    for (std::size_t in : n.inputs)
      if (in >= nodes_.size()) throw ContractError("node input refers to a later node");
    nodes_.push_back(std::move(n));
    evaluated_ = false;
    return Var{nodes_.size() - 1};
  }

  Node unary_node(Op op, Var x) const {
    Node n;
    n.op = op;
    n.inputs = {x.id};
    return n;
  }

  Var binary(Op op, Var a, Var b) {
    Node n;
    n.op = op;
    n.inputs = {a.id, b.id};
    return push(std::move(n));
  }

  Var nary(Op op, const std::vector<Var>& parts) {
    if (parts.empty()) throw ContractError(std::string(op_name(op)) + " needs at least one input");
    Node n;
    n.op = op;
    for (Var v : parts) n.inputs.push_back(v.id);
    return push(std::move(n));
  }

  const Tensor& value_of(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.bound ? *n.bound : n.own;
  }

  std::string describe(std::size_t id) const {
    const Node& n = nodes_[id];
    std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
    if (!n.label.empty() && (n.op == Op::Parameter || n.op == Op::Constant)) s += " '" + n.label + "'";
    return s + ")";
  }

  [[noreturn]] void dim_error(std::size_t id, const std::string& what) const {
    throw DimensionError(describe(id) + ": " + what);
  }

  void eval(std::size_t id, const Bindings& bindings) {
    Node& n = nodes_[id];
    auto in = [&](std::size_t k) -> const Tensor& { return value_of(n.inputs[k]); };

    switch (n.op) {
      case Op::Parameter: {
        n.bound = bindings.find(n.label);
        if (!n.bound) throw ContractError("unbound parameter '" + n.label + "'");
        return;
      }
      case Op::Constant:
        return;

      case Op::MatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t R = a.rows(), K = a.cols(), C = b.cols();
        if (b.rows() != K) dim_error(id, "inner dimensions " + shape_string(a.shape()) + " * " + shape_string(b.shape()));
        Tensor out(Shape{R, C});
        for (std::size_t i = 0; i < R; ++i) {
          double* o = out.data() + i * C;
          const double* ar = a.data() + i * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double av = ar[k];
            const double* br = b.data() + k * C;
            for (std::size_t j = 0; j < C; ++j) o[j] += av * br[j];
          }
        }
        n.own = std::move(out);
        return;
      }

      case Op::MatMulNT: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t R = a.rows(), K = a.cols(), C = b.rows();
        if (b.cols() != K) dim_error(id, "inner dimensions " + shape_string(a.shape()) + " * T" + shape_string(b.shape()));
        Tensor out(Shape{R, C});
        for (std::size_t i = 0; i < R; ++i)
          for (std::size_t j = 0; j < C; ++j) out.at(i, j) = dot(a.row(i), b.row(j));
        n.own = std::move(out);
        return;
      }

      case Op::Add:
      case Op::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (a.shape() != b.shape()) dim_error(id, "operand shapes " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
        Tensor out(a.shape());
        if (n.op == Op::Add)
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
        else
          for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
        n.own = std::move(out);
        return;
      }

      case Op::AddRow: {
        const Tensor& x = in(0);
        const Tensor& b = in(1);
        if (b.size() != x.cols()) dim_error(id, "bias of size " + std::to_string(b.size()) + " for " + shape_string(x.shape()));
        Tensor out(Shape{x.rows(), x.cols()});
        for (std::size_t r = 0; r < x.rows(); ++r)
          for (std::size_t c = 0; c < x.cols(); ++c) out.at(r, c) = x.at(r, c) + b[c];
        n.own = std::move(out);
        return;
      }

      case Op::Scale: {
        const Tensor& x = in(0);
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = n.scalar * x[i];
        n.own = std::move(out);
        return;
      }

      case Op::Softmax: {
        const Tensor& x = in(0);
        const std::size_t R = x.rows(), C = x.cols();
        if (!n.mask.empty() && n.mask.size() != x.size())
          dim_error(id, "mask size " + std::to_string(n.mask.size()) + " for " + shape_string(x.shape()));
        Tensor out(Shape{R, C});
        for (std::size_t r = 0; r < R; ++r) {
          const std::uint8_t* m = n.mask.empty() ? nullptr : n.mask.data() + r * C;
          double mx = -INFINITY;
          for (std::size_t c = 0; c < C; ++c)
            if (!m || m[c]) mx = std::max(mx, x.at(r, c));
          if (mx == -INFINITY) throw ContractError(describe(id) + ": row " + std::to_string(r) + " fully masked");
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            if (m && !m[c]) continue;
            const double e = std::exp(x.at(r, c) - mx);
            out.at(r, c) = e;
            s += e;
          }
          for (std::size_t c = 0; c < C; ++c) out.at(r, c) /= s;
        }
        n.own = std::move(out);
        return;
      }

      case Op::LayerNorm: {
        const Tensor& x = in(0);
        const Tensor& g = in(1);
        const Tensor& b = in(2);
        const std::size_t R = x.rows(), C = x.cols();
        if (g.size() != C || b.size() != C) dim_error(id, "gain/offset size mismatch for " + shape_string(x.shape()));
        Tensor out(Shape{R, C});
        n.aux.assign(R * C + R, 0.0);  // normalized values, then 1/sigma per row
        for (std::size_t r = 0; r < R; ++r) {
          double mu = 0.0;
          for (std::size_t c = 0; c < C; ++c) mu += x.at(r, c);
          mu /= static_cast<double>(C);
          double var = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = x.at(r, c) - mu;
            var += d * d;
          }
          var /= static_cast<double>(C);
          const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
          n.aux[R * C + r] = inv;
          for (std::size_t c = 0; c < C; ++c) {
            const double xh = (x.at(r, c) - mu) * inv;
            n.aux[r * C + c] = xh;
            out.at(r, c) = g[c] * xh + b[c];
          }
        }
        n.own = std::move(out);
        return;
      }

      case Op::Gelu: {
        const Tensor& x = in(0);
        Tensor out(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) out[i] = detail::gelu_tanh(x[i]);
        n.own = std::move(out);
        return;
      }

      case Op::Embedding: {
        const Tensor& table = in(0);
        const std::size_t V = table.rows(), D = table.cols();
        if (n.indices.empty()) dim_error(id, "empty id list");
        Tensor out(Shape{n.indices.size(), D});
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          const std::size_t tok = n.indices[k];
          if (tok >= V)
            throw InputError(describe(id) + ": id " + std::to_string(tok) + " out of range for table of " + std::to_string(V));
          std::copy_n(table.data() + tok * D, D, out.data() + k * D);
        }
        n.own = std::move(out);
        return;
      }

      case Op::CrossEntropy: {
        const Tensor& x = in(0);
        const std::size_t R = x.rows(), C = x.cols();
        if (n.indices.size() != R) dim_error(id, std::to_string(n.indices.size()) + " targets for " + std::to_string(R) + " rows");
        n.aux.assign(R * C, 0.0);  // softmax probabilities
        double total = 0.0;
        for (std::size_t r = 0; r < R; ++r) {
          const std::size_t t = n.indices[r];
          if (t >= C) dim_error(id, "target " + std::to_string(t) + " out of range for " + std::to_string(C) + " classes");
          double mx = -INFINITY;
          for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, x.at(r, c));
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double e = std::exp(x.at(r, c) - mx);
            n.aux[r * C + c] = e;
            s += e;
          }
          for (std::size_t c = 0; c < C; ++c) n.aux[r * C + c] /= s;
          total += (std::log(s) + mx) - x.at(r, t);
        }
        n.own = Tensor::scalar(total / static_cast<double>(R));
        return;
      }

      case Op::CosineLogits: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const std::size_t N = x.rows(), M = w.rows(), D = x.cols();
        if (w.cols() != D) dim_error(id, "feature width " + std::to_string(D) + " vs weight width " + std::to_string(w.cols()));
        // aux: [x_hat (N*D) | w_hat (M*D) | x norms (N) | w norms (M)], norms clamped
        n.aux.assign(N * D + M * D + N + M, 0.0);
        double* xh = n.aux.data();
        double* wh = xh + N * D;
        double* xn = wh + M * D;
        double* wn = xn + N;
        for (std::size_t i = 0; i < N; ++i) {
          xn[i] = std::max(l2_norm(x.row(i)), kCosineEps);
          for (std::size_t d = 0; d < D; ++d) xh[i * D + d] = x.at(i, d) / xn[i];
        }
        for (std::size_t j = 0; j < M; ++j) {
          wn[j] = std::max(l2_norm(w.row(j)), kCosineEps);
          for (std::size_t d = 0; d < D; ++d) wh[j * D + d] = w.at(j, d) / wn[j];
        }
        Tensor out(Shape{N, M});
        for (std::size_t i = 0; i < N; ++i)
          for (std::size_t j = 0; j < M; ++j) {
            double s = 0.0;
            for (std::size_t d = 0; d < D; ++d) s += xh[i * D + d] * wh[j * D + d];
            out.at(i, j) = n.scalar * s;
          }
        n.own = std::move(out);
        return;
      }

      case Op::Mean:
      case Op::Sum: {
        const Tensor& x = in(0);
        double s = 0.0;
        for (double v : x.values()) s += v;
        n.own = Tensor::scalar(n.op == Op::Mean ? s / static_cast<double>(x.size()) : s);
        return;
      }

      case Op::Slice: {
        const Tensor& x = in(0);
        const std::size_t r0 = n.indices[0], nr = n.indices[1], c0 = n.indices[2], nc = n.indices[3];
        if (nr == 0 || nc == 0 || r0 + nr > x.rows() || c0 + nc > x.cols())
          dim_error(id, "slice out of bounds of " + shape_string(x.shape()));
        Tensor out(Shape{nr, nc});
        for (std::size_t r = 0; r < nr; ++r) std::copy_n(x.data() + (r0 + r) * x.cols() + c0, nc, out.data() + r * nc);
        n.own = std::move(out);
        return;
      }

      case Op::ConcatCols: {
        const std::size_t R = in(0).rows();
        std::size_t C = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (in(k).rows() != R) dim_error(id, "row count mismatch in part " + std::to_string(k));
          C += in(k).cols();
        }
        Tensor out(Shape{R, C});
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& p = in(k);
          for (std::size_t r = 0; r < R; ++r) std::copy_n(p.data() + r * p.cols(), p.cols(), out.data() + r * C + off);
          off += p.cols();
        }
        n.own = std::move(out);
        return;
      }

      case Op::ConcatRows: {
        const std::size_t C = in(0).cols();
        std::size_t R = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (in(k).cols() != C) dim_error(id, "column count mismatch in part " + std::to_string(k));
          R += in(k).rows();
        }
        Tensor out(Shape{R, C});
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& p = in(k);
          std::copy_n(p.data(), p.size(), out.data() + off);
          off += p.size();
        }
        n.own = std::move(out);
        return;
      }

      case Op::GatherRows: {
        const Tensor& x = in(0);
        const std::size_t C = x.cols();
        if (n.indices.empty()) dim_error(id, "empty row list");
        Tensor out(Shape{n.indices.size(), C});
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          if (n.indices[k] >= x.rows()) dim_error(id, "row " + std::to_string(n.indices[k]) + " out of range");
          std::copy_n(x.data() + n.indices[k] * C, C, out.data() + k * C);
        }
        n.own = std::move(out);
        return;
      }
    }
  }

  template <typename GradFn>
  void backprop(std::size_t id, const std::vector<std::uint8_t>& needs, GradFn& grad) {
    Node& n = nodes_[id];
    const Tensor& dy = n.grad;
    auto in = [&](std::size_t k) -> const Tensor& { return value_of(n.inputs[k]); };
    auto wants = [&](std::size_t k) { return needs[n.inputs[k]] != 0; };

    switch (n.op) {
      case Op::Parameter:
      case Op::Constant:
        return;

      case Op::MatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t R = a.rows(), K = a.cols(), C = b.cols();
        if (wants(0)) {
          Tensor& da = grad(n.inputs[0]);
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              double s = 0.0;
              const double* dr = dy.data() + i * C;
              const double* br = b.data() + k * C;
              for (std::size_t j = 0; j < C; ++j) s += dr[j] * br[j];
              da[i * K + k] += s;
            }
        }
        if (wants(1)) {
          Tensor& db = grad(n.inputs[1]);
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t k = 0; k < K; ++k) {
              const double av = a[i * K + k];
              double* dbr = db.data() + k * C;
              const double* dr = dy.data() + i * C;
              for (std::size_t j = 0; j < C; ++j) dbr[j] += av * dr[j];
            }
        }
        return;
      }

      case Op::MatMulNT: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t R = a.rows(), K = a.cols(), C = b.rows();
        if (wants(0)) {
          Tensor& da = grad(n.inputs[0]);
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j) {
              const double g = dy[i * C + j];
              const double* br = b.data() + j * K;
              double* dar = da.data() + i * K;
              for (std::size_t k = 0; k < K; ++k) dar[k] += g * br[k];
            }
        }
        if (wants(1)) {
          Tensor& db = grad(n.inputs[1]);
          for (std::size_t i = 0; i < R; ++i)
            for (std::size_t j = 0; j < C; ++j) {
              const double g = dy[i * C + j];
              const double* ar = a.data() + i * K;
              double* dbr = db.data() + j * K;
              for (std::size_t k = 0; k < K; ++k) dbr[k] += g * ar[k];
            }
        }
        return;
      }

      case Op::Add: {
        for (std::size_t k = 0; k < 2; ++k)
          if (wants(k)) {
            Tensor& d = grad(n.inputs[k]);
            for (std::size_t i = 0; i < dy.size(); ++i) d[i] += dy[i];
          }
        return;
      }

      case Op::AddRow: {
        const std::size_t R = dy.rows(), C = dy.cols();
        if (wants(0)) {
          Tensor& dx = grad(n.inputs[0]);
          for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += dy[i];
        }
        if (wants(1)) {
          Tensor& db = grad(n.inputs[1]);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
        }
        return;
      }

      case Op::Mul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        if (wants(0)) {
          Tensor& da = grad(n.inputs[0]);
          for (std::size_t i = 0; i < dy.size(); ++i) da[i] += dy[i] * b[i];
        }
        if (wants(1)) {
          Tensor& db = grad(n.inputs[1]);
          for (std::size_t i = 0; i < dy.size(); ++i) db[i] += dy[i] * a[i];
        }
        return;
      }

      case Op::Scale: {
        Tensor& dx = grad(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) dx[i] += n.scalar * dy[i];
        return;
      }

      case Op::Softmax: {
        const Tensor& y = n.own;
        const std::size_t R = y.rows(), C = y.cols();
        Tensor& dx = grad(n.inputs[0]);
        for (std::size_t r = 0; r < R; ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < C; ++c) s += y[r * C + c] * dy[r * C + c];
          for (std::size_t c = 0; c < C; ++c) dx[r * C + c] += y[r * C + c] * (dy[r * C + c] - s);
        }
        return;
      }

      case Op::LayerNorm: {
        const Tensor& g = in(1);
        const std::size_t R = dy.rows(), C = dy.cols();
        const double* xh = n.aux.data();
        const double* inv = n.aux.data() + R * C;
        if (wants(1)) {
          Tensor& dg = grad(n.inputs[1]);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) dg[c] += dy[r * C + c] * xh[r * C + c];
        }
        if (wants(2)) {
          Tensor& db = grad(n.inputs[2]);
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < C; ++c) db[c] += dy[r * C + c];
        }
        if (wants(0)) {
          Tensor& dx = grad(n.inputs[0]);
          const double invC = 1.0 / static_cast<double>(C);
          for (std::size_t r = 0; r < R; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < C; ++c) {
              const double dxh = dy[r * C + c] * g[c];
              m1 += dxh;
              m2 += dxh * xh[r * C + c];
            }
            m1 *= invC;
            m2 *= invC;
            for (std::size_t c = 0; c < C; ++c) {
              const double dxh = dy[r * C + c] * g[c];
              dx[r * C + c] += inv[r] * (dxh - m1 - xh[r * C + c] * m2);
            }
          }
        }
        return;
      }

      case Op::Gelu: {
        const Tensor& x = in(0);
        Tensor& dx = grad(n.inputs[0]);
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] += dy[i] * detail::gelu_tanh_grad(x[i]);
        return;
      }

      case Op::Embedding: {
        Tensor& dt = grad(n.inputs[0]);
        const std::size_t D = dt.cols();
        for (std::size_t k = 0; k < n.indices.size(); ++k) {
          double* row = dt.data() + n.indices[k] * D;
          for (std::size_t d = 0; d < D; ++d) row[d] += dy[k * D + d];
        }
        return;
      }

      case Op::CrossEntropy: {
        const Tensor& x = in(0);
        const std::size_t R = x.rows(), C = x.cols();
        Tensor& dx = grad(n.inputs[0]);
        const double scale = dy[0] / static_cast<double>(R);
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) {
            const double target = (c == n.indices[r]) ? 1.0 : 0.0;
            dx[r * C + c] += scale * (n.aux[r * C + c] - target);
          }
        return;
      }

      case Op::CosineLogits: {
        const Tensor& x = in(0);
        const Tensor& w = in(1);
        const std::size_t N = x.rows(), M = w.rows(), D = x.cols();
        const double* xh = n.aux.data();
        const double* wh = xh + N * D;
        const double* xn = wh + M * D;
        const double* wn = xn + N;
        const double s = n.scalar;
        // d/dv of v/max(|v|, eps): projection onto the tangent space when the
        // norm is above eps, plain 1/eps scaling in the clamped region.
        auto project = [D](const double* dh, const double* vh, double norm, double raw_norm, double* out) {
          if (raw_norm > kCosineEps) {
            double p = 0.0;
            for (std::size_t d = 0; d < D; ++d) p += dh[d] * vh[d];
            for (std::size_t d = 0; d < D; ++d) out[d] += (dh[d] - p * vh[d]) / norm;
          } else {
            for (std::size_t d = 0; d < D; ++d) out[d] += dh[d] / norm;
          }
        };
        std::vector<double> buf(D);
        if (wants(0)) {
          Tensor& dx = grad(n.inputs[0]);
          for (std::size_t i = 0; i < N; ++i) {
            std::fill(buf.begin(), buf.end(), 0.0);
            for (std::size_t j = 0; j < M; ++j) {
              const double g = s * dy[i * M + j];
              for (std::size_t d = 0; d < D; ++d) buf[d] += g * wh[j * D + d];
            }
            project(buf.data(), xh + i * D, xn[i], l2_norm(x.row(i)), dx.data() + i * D);
          }
        }
        if (wants(1)) {
          Tensor& dw = grad(n.inputs[1]);
          for (std::size_t j = 0; j < M; ++j) {
            std::fill(buf.begin(), buf.end(), 0.0);
            for (std::size_t i = 0; i < N; ++i) {
              const double g = s * dy[i * M + j];
              for (std::size_t d = 0; d < D; ++d) buf[d] += g * xh[i * D + d];
            }
            project(buf.data(), wh + j * D, wn[j], l2_norm(w.row(j)), dw.data() + j * D);
          }
        }
        return;
      }

      case Op::Mean:
      case Op::Sum: {
        Tensor& dx = grad(n.inputs[0]);
        const double g = n.op == Op::Mean ? dy[0] / static_cast<double>(dx.size()) : dy[0];
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g;
        return;
      }

      case Op::Slice: {
        Tensor& dx = grad(n.inputs[0]);
        const std::size_t r0 = n.indices[0], nr = n.indices[1], c0 = n.indices[2], nc = n.indices[3];
        const std::size_t C = dx.cols();
        for (std::size_t r = 0; r < nr; ++r)
          for (std::size_t c = 0; c < nc; ++c) dx[(r0 + r) * C + c0 + c] += dy[r * nc + c];
        return;
      }

      case Op::ConcatCols: {
        const std::size_t R = dy.rows(), C = dy.cols();
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t pc = in(k).cols();
          if (wants(k)) {
            Tensor& dp = grad(n.inputs[k]);
            for (std::size_t r = 0; r < R; ++r)
              for (std::size_t c = 0; c < pc; ++c) dp[r * pc + c] += dy[r * C + off + c];
          }
          off += pc;
        }
        return;
      }

      case Op::ConcatRows: {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t sz = in(k).size();
          if (wants(k)) {
            Tensor& dp = grad(n.inputs[k]);
            for (std::size_t i = 0; i < sz; ++i) dp[i] += dy[off + i];
          }
          off += sz;
        }
        return;
      }

      case Op::GatherRows: {
        Tensor& dx = grad(n.inputs[0]);
        const std::size_t C = dx.cols();
        for (std::size_t k = 0; k < n.indices.size(); ++k)
          for (std::size_t c = 0; c < C; ++c) dx[n.indices[k] * C + c] += dy[k * C + c];
        return;
      }
    }
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::map<std::string, bool> trainable_;
  std::map<std::string, std::size_t> outputs_;
  bool evaluated_ = false;
};

// ---- gradient checking -----------------------------------------------------

struct GradCheckReport {
  std::map<std::string, double> max_rel_error;  // per trainable parameter
  double worst = 0.0;
  std::vector<std::string> flagged;  // parameters above tolerance
  bool passed() const { return flagged.empty(); }
};

/// Relative error used by grad_check: |a - n| / max(|a|, |n|, floor), and
/// exactly 0 when both are 0. The floor keeps round-off on near-zero
/// gradients (about 1e-11 at step 1e-5) from reading as a large error.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  const double diff = std::abs(analytic - numeric);
  if (diff == 0.0) return 0.0;
  return diff / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central finite differences for every element
/// of every trainable parameter reachable from `loss`.
inline GradCheckReport grad_check(Graph& graph, Var loss, const Bindings& bindings, double step, double tolerance) {
  if (!(step > 0.0)) throw ContractError("grad_check step must be positive");
  graph.forward(bindings);
  const Gradients analytic = graph.backward(loss);

  GradCheckReport report;
  for (const std::string& name : graph.parameter_names()) {
    if (!graph.trainable(name)) continue;
    const Tensor* original = bindings.find(name);
    if (!original) throw ContractError("unbound parameter '" + name + "'");
    if (!original->all_finite()) throw NumericError("parameter '" + name + "' is not finite");

    Tensor probe = *original;
    Bindings local = bindings;
    local.bind(name, probe);
    const Tensor& grad = analytic.at(name);
    double worst = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) {
      const double saved = probe[i];
      probe[i] = saved + step;
      graph.forward(local);
      const double lp = graph.value(loss)[0];
      probe[i] = saved - step;
      graph.forward(local);
      const double lm = graph.value(loss)[0];
      probe[i] = saved;
      const double numeric = (lp - lm) / (2.0 * step);
      if (!std::isfinite(numeric)) throw NumericError("non-finite finite-difference estimate for '" + name + "'");
      worst = std::max(worst, relative_error(grad[i], numeric));
    }
    report.max_rel_error[name] = worst;
    report.worst = std::max(report.worst, worst);
    if (worst > tolerance) report.flagged.push_back(name);
  }
  graph.forward(bindings);
  return report;
}

}  // namespace ilab::ad
