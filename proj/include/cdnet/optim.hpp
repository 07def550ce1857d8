#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "cdnet/autograd.hpp"

namespace cdnet {

/// Adam with decoupled weight decay. Parameters of rank <= 1 (biases, norm gains, CLS)
/// are not decayed.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
  };

  explicit AdamW(std::vector<Var> params) : AdamW(std::move(params), Options{}) {}
  AdamW(std::vector<Var> params, Options opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void step(double lr, double weight_decay) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Var& p = params_[i];
      auto& w = p.value();
      const auto& g = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const double decay = p.value().rank() >= 2 ? weight_decay : 0.0;
      for (std::size_t k = 0; k < w.size(); ++k) {
        m[k] = opts_.beta1 * m[k] + (1.0 - opts_.beta1) * g[k];
        v[k] = opts_.beta2 * v[k] + (1.0 - opts_.beta2) * g[k] * g[k];
        const double update = (m[k] / bc1) / (std::sqrt(v[k] / bc2) + opts_.eps);
        w[k] -= lr * (update + decay * w[k]);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::vector<Var>& params() { return params_; }

 private:
  std::vector<Var> params_;
  Options opts_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  long t_ = 0;
};

/// Linear warmup from 0 to `base` over `warmup` steps, then cosine decay to `final`.
inline double warmup_cosine(double base, double final, std::size_t warmup, std::size_t total, std::size_t step) {
  if (step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total <= warmup + 1) return base;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup - 1);
  return final + 0.5 * (base - final) * (1.0 + std::cos(std::numbers::pi * std::min(progress, 1.0)));
}

/// Cosine ramp from `start` at step 0 to `end` at step total-1.
inline double cosine_ramp(double start, double end, std::size_t total, std::size_t step) {
  if (total <= 1) return start;
  const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(total - 1));
  return end - (end - start) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace cdnet
