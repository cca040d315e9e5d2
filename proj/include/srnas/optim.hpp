#ifndef SRNAS_OPTIM_HPP
#define SRNAS_OPTIM_HPP

#include <cmath>
#include <vector>

#include "srnas/tensor.hpp"

namespace srnas {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over a fixed parameter list. Moments are per-element float32; the
// bias-corrected step size is computed in double. Step 1 on a constant
// gradient g moves each element by ~ -lr * sign(g).
class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<NamedParam> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      m_.push_back(ArrayX::Zero(p.param->numel()));
      v_.push_back(ArrayX::Zero(p.param->numel()));
    }
  }

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  long step_count() const { return t_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    const Scalar b1 = static_cast<Scalar>(cfg_.beta1);
    const Scalar b2 = static_cast<Scalar>(cfg_.beta2);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param& p = *params_[i].param;
      m_[i] = b1 * m_[i] + (Scalar(1) - b1) * p.grad;
      v_[i] = b2 * v_[i] + (Scalar(1) - b2) * p.grad * p.grad;
      const Scalar a = static_cast<Scalar>(cfg_.lr / bc1);
      const Scalar c2 = static_cast<Scalar>(1.0 / bc2);
      const Scalar eps = static_cast<Scalar>(cfg_.eps);
      p.value -= a * m_[i] / ((v_[i] * c2).sqrt() + eps);
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.param->zero_grad();
  }

 private:
  std::vector<NamedParam> params_;
  AdamConfig cfg_;
  std::vector<ArrayX> m_, v_;
  long t_ = 0;
};

}  // namespace srnas

#endif  // SRNAS_OPTIM_HPP
