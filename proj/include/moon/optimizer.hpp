#pragma once

#include "moon/parameters.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace moon {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// Cosine decay from base_lr at step 0 to zero at total_steps.
inline double cosine_lr(double base_lr, int step, int total_steps) {
  if (total_steps <= 0) return base_lr;
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Adam with decoupled weight decay over every tensor of a ParameterStore.
template <typename Scalar>
class AdamW {
 public:
  using Mat = Matrix<Scalar>;

  AdamW(const ParameterStore<Scalar>& params, AdamWConfig config) : config_(config) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_.push_back(Mat::Zero(params.value(i).rows(), params.value(i).cols()));
      v_.push_back(m_.back());
    }
  }

  void step(ParameterStore<Scalar>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, t_);
    const double c2 = 1.0 - std::pow(config_.beta2, t_);
    const auto b1 = static_cast<Scalar>(config_.beta1), b2 = static_cast<Scalar>(config_.beta2);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Mat& g = params.grad(i);
      Mat& w = params.value(i);
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g.cwiseProduct(g);
      w *= static_cast<Scalar>(1.0 - lr * config_.weight_decay);
      const auto step_size = static_cast<Scalar>(lr / c1);
      const auto v_scale = static_cast<Scalar>(1.0 / c2);
      w.array() -= step_size * m_[i].array() / ((v_[i].array() * v_scale).sqrt() + static_cast<Scalar>(config_.eps));
    }
  }

  long steps() const { return t_; }

 private:
  AdamWConfig config_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

}  // namespace moon
