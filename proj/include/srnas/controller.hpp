#ifndef SRNAS_CONTROLLER_HPP
#define SRNAS_CONTROLLER_HPP

#include <Eigen/Core>
#include <cstdint>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "srnas/rng.hpp"
#include "srnas/snapshot.hpp"

namespace srnas {

// Reward shaping shared by both search stages. Raw metrics are minmax
// normalized over the entire history seen so far, the advantage is taken
// against an exponential-moving-average baseline (computed before the
// baseline absorbs the new value), and a small entropy bonus is added.
// Failed evaluations take the worst normalized value (0) without polluting
// the running min/max. All arithmetic is double so a log replay reproduces
// rewards bit for bit.
class RewardPipeline {
 public:
  explicit RewardPipeline(double entropy_coef = 1e-4, double decay = 0.95)
      : entropy_coef_(entropy_coef), decay_(decay) {}

  double compute(double raw_metric, double entropy);
  double compute_failure(double entropy);

  double baseline() const { return baseline_; }
  double running_min() const { return mn_; }
  double running_max() const { return mx_; }
  long count() const { return count_; }
  double entropy_coef() const { return entropy_coef_; }

  nlohmann::json state() const;
  void restore(const nlohmann::json& j);

 private:
  double entropy_coef_;
  double decay_;
  bool any_ = false;
  double mn_ = 0.0, mx_ = 0.0;
  double baseline_ = 0.0;
  long count_ = 0;
};

struct ControllerConfig {
  std::vector<int> dims;  // per-position choice counts
  int hidden = 100;
  int embed = 32;
  double lr = 3.5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double tanh_scale = 2.5;   // logit range clamp
  double logit_temp = 5.0;   // logits = tanh_scale * tanh(linear / logit_temp)
  std::uint64_t init_seed = 0;
};

struct SampleResult {
  std::vector<int> decisions;
  double log_prob = 0.0;
  double entropy = 0.0;
};

// Autoregressive LSTM policy: one learned start embedding feeds step 0, each
// later step consumes a learned embedding of the previous choice, and a
// per-position projection head produces bounded logits. Projection heads start
// at zero, so a fresh policy is exactly uniform. All math is double precision.
class Controller {
 public:
  explicit Controller(ControllerConfig cfg);

  const ControllerConfig& config() const { return cfg_; }

  SampleResult sample(Rng& rng) const;
  double log_prob(const std::vector<int>& decisions) const;
  double entropy_of(const std::vector<int>& decisions) const;

  // One REINFORCE step on loss = -log_prob(decisions) * reward, applied with
  // Adam. reward == 0 leaves a fresh optimizer's parameters untouched.
  void reinforce_update(const std::vector<int>& decisions, double reward);

  long update_count() const { return adam_t_; }

  Snapshot to_snapshot() const;
  static Controller from_snapshot(const Snapshot& snap);

 private:
  struct DParam {
    Eigen::MatrixXd value, grad, m, v;
    explicit DParam(long rows = 0, long cols = 1)
        : value(Eigen::MatrixXd::Zero(rows, cols)),
          grad(Eigen::MatrixXd::Zero(rows, cols)),
          m(Eigen::MatrixXd::Zero(rows, cols)),
          v(Eigen::MatrixXd::Zero(rows, cols)) {}
  };

  struct StepTrace;  // forward caches for BPTT

  void walk(const std::vector<int>* forced, Rng* rng, SampleResult& out,
            std::vector<StepTrace>* traces) const;
  void adam_step();
  std::vector<std::pair<std::string, DParam*>> named_params();
  std::vector<std::pair<std::string, const DParam*>> named_params() const;

  ControllerConfig cfg_;
  int L_;
  DParam wx_, wh_, bg_;  // LSTM
  DParam start_;
  std::vector<DParam> head_w_, head_b_;
  std::vector<DParam> emb_;  // emb_[i]: choices at position i -> input of i+1
  long adam_t_ = 0;
};

// Many workers sample against a consistent copy while updates stay serialized.
class SharedController {
 public:
  explicit SharedController(Controller c) : ctrl_(std::move(c)) {}

  Controller snapshot() const {
    std::shared_lock lk(mu_);
    return ctrl_;
  }

  // Shared-lock access without copying; fn must not retain the reference.
  template <typename Fn>
  auto read(Fn&& fn) const {
    std::shared_lock lk(mu_);
    return fn(static_cast<const Controller&>(ctrl_));
  }

  template <typename Fn>
  auto update(Fn&& fn) {
    std::unique_lock lk(mu_);
    return fn(ctrl_);
  }

 private:
  mutable std::shared_mutex mu_;
  Controller ctrl_;
};

}  // namespace srnas

#endif  // SRNAS_CONTROLLER_HPP
