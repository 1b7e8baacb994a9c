#pragma once

#include <cmath>
#include <string>

#include "segkit/layers.hpp"

namespace segkit {

/// base_lr * (1 - iter/max_iter)^power.
inline double poly_lr(std::size_t iter, std::size_t max_iter, double base_lr, double power) {
  if (iter > max_iter) {
    throw ParameterError("poly_lr: iter " + std::to_string(iter) + " exceeds max_iter " + std::to_string(max_iter));
  }
  if (!(power > 0)) throw ParameterError("poly_lr: power must be positive");
  if (iter == max_iter) return 0.0;
  return base_lr * std::pow(1.0 - static_cast<double>(iter) / static_cast<double>(max_iter), power);
}

struct SgdOptions {
  double momentum = 0.9;
  double weight_decay = 4e-5;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
/// Parameters without a gradient this step are left untouched.
template <typename T>
class Sgd {
 public:
  Sgd(NamedTensors<T> params, SgdOptions opts) : params_(std::move(params)), opts_(opts) {
    if (opts_.momentum < 0 || opts_.momentum >= 1) throw ParameterError("momentum must lie in [0, 1)");
    if (opts_.weight_decay < 0) throw ParameterError("weight_decay must be non-negative");
    for (const auto& [name, p] : params_) velocity_.emplace_back(name, Tensor<T>(p.shape()));
  }

  void step(double lr) {
    const T m = static_cast<T>(opts_.momentum), wd = static_cast<T>(opts_.weight_decay), rate = static_cast<T>(lr);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const Tensor<T>& p = params_[i].second;
      if (!p.has_grad()) continue;
      auto w = Tensor<T>(p).data();
      auto grad = p.grad();
      auto v = velocity_[i].second.data();
      if (grad.size() != w.size() || v.size() != w.size()) throw Error("sgd: shape mismatch for " + params_[i].first);
      for (std::size_t j = 0; j < w.size(); ++j) {
        v[j] = m * v[j] + (grad[j] + wd * w[j]);
        w[j] -= rate * v[j];
      }
      p.clear_grad();
    }
  }

  const NamedTensors<T>& velocity() const { return velocity_; }
  const SgdOptions& options() const { return opts_; }

  void reset() {
    for (auto& [name, v] : velocity_) std::fill(v.data().begin(), v.data().end(), T{0});
  }

 private:
  NamedTensors<T> params_;
  NamedTensors<T> velocity_;
  SgdOptions opts_;
};

}  // namespace segkit
