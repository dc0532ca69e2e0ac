#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "carfollow/common.hpp"

namespace carfollow::diff {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Zero gradient is a fixed point; per-coordinate
// step magnitude is bounded by roughly lr when gradients are steady.
class Adam {
 public:
  explicit Adam(size_t n, AdamConfig cfg = {})
      : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::span<double> x, std::span<const double> g) {
    if (x.size() != m_.size() || g.size() != m_.size())
      throw TrainError("optimizer dimension mismatch");
    for (double gi : g)
      if (!std::isfinite(gi)) throw TrainError("non-finite gradient");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (size_t i = 0; i < m_.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      double mhat = m_[i] / bc1;
      double vhat = v_[i] / bc2;
      x[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  long t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace carfollow::diff
