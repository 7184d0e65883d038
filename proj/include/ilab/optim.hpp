// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "ilab/errors.hpp"
#include "ilab/tensor.hpp"

namespace ilab {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with decoupled weight decay. State is keyed by parameter name, so
/// one optimizer can serve several parameter groups with different rates.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config = {}) : config_(config) {}

  void step(const std::string& name, Tensor& param, const Tensor& grad, double lr, double weight_decay) {
    if (param.shape() != grad.shape())
      throw DimensionError("gradient shape " + shape_string(grad.shape()) + " does not match parameter '" + name + "'");
    State& s = state_[name];
    if (s.t == 0) {
      s.m = Tensor::zeros_like(param);
      s.v = Tensor::zeros_like(param);
    }
    ++s.t;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(s.t));
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i];
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * g;
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * g * g;
      const double mhat = s.m[i] / c1;
      const double vhat = s.v[i] / c2;
      param[i] -= lr * weight_decay * param[i];
      param[i] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }

  std::size_t steps(const std::string& name) const {
    auto it = state_.find(name);
    return it == state_.end() ? 0 : it->second.t;
  }

 private:
  struct State {
    Tensor m, v;
    std::size_t t = 0;
  };
  AdamWConfig config_;
  std::map<std::string, State> state_;
};

}  // namespace ilab
