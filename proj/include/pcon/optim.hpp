#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "autograd.hpp"

namespace pcon {

/// lr_t = base * (1 + cos(pi * t / total)) / 2, so lr_0 = base and lr_total = 0.
inline double cosine_lr(double base, std::size_t t, std::size_t total) {
  if (total == 0) return base;
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * double(t) / double(total)));
}

/// Multiplies base by 0.1 at each milestone epoch already reached.
inline double step_lr(double base, std::size_t epoch, const std::vector<std::size_t>& milestones) {
  double lr = base;
  for (std::size_t m : milestones)
    if (epoch >= m) lr *= 0.1;
  return lr;
}

/// SGD with heavy-ball momentum and L2 weight decay:
///   g <- grad + wd * w;  buf <- mu * buf + g;  w <- w - lr * buf
template <class T>
class Sgd {
 public:
  Sgd(std::vector<Tensor<T>> params, double momentum, double weight_decay)
      : params_(std::move(params)), momentum_(momentum), weight_decay_(weight_decay), buffers_(params_.size()) {}

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto w = p.data();
      auto g = p.grad();
      auto& buf = buffers_[i];
      if (buf.empty()) buf.assign(w.size(), T(0));
      for (std::size_t k = 0; k < w.size(); ++k) {
        const T gk = g[k] + T(weight_decay_) * w[k];
        buf[k] = T(momentum_) * buf[k] + gk;
        w[k] -= T(lr) * buf[k];
      }
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  double momentum_;
  double weight_decay_;
  std::vector<std::vector<T>> buffers_;
};

}  // namespace pcon
