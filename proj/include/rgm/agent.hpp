#pragma once

#include <rgm/env.hpp>
#include <rgm/nn.hpp>

#include <functional>
#include <optional>
#include <span>
#include <vector>

namespace rgm {

/// Categorical policy pi_theta: MLP logits followed by a softmax head.
class PolicyNet {
 public:
  PolicyNet() = default;
  PolicyNet(Index input_dim, const std::vector<Index>& hidden, int num_actions, Rng& rng);

  /// [T x A] log-probabilities for a batch of feature rows.
  [[nodiscard]] Var log_probs(std::span<const Var> bound, const Var& states) const;
  [[nodiscard]] Tensord probabilities(const Tensord& states) const;
  [[nodiscard]] std::vector<double> probabilities(std::span<const double> features) const;

  /// Sampling policy backed by the current parameters (captures by reference).
  [[nodiscard]] PolicyFn sampler() const;
  /// Puts all mass on the most probable action (lowest index on ties).
  [[nodiscard]] PolicyFn greedy() const;

  [[nodiscard]] int num_actions() const { return static_cast<int>(mlp_.out_dim()); }
  [[nodiscard]] Index input_dim() const { return mlp_.in_dim(); }

  ParameterSet params;

 private:
  Mlp mlp_;
};

/// State-value network V_phi.
class ValueNet {
 public:
  ValueNet() = default;
  ValueNet(Index input_dim, const std::vector<Index>& hidden, Rng& rng);

  /// [T x 1]
  [[nodiscard]] Var values(std::span<const Var> bound, const Var& states) const;
  [[nodiscard]] Tensord evaluate(const Tensord& states) const;

  ParameterSet params;

 private:
  Mlp mlp_;
};

/// G_t = r_t + gamma * G_{t+1}, with nothing bootstrapped after the last step.
std::vector<double> discounted_return(std::span<const double> rewards, double gamma);
std::vector<double> discounted_return(const Trajectory& trajectory, double gamma);

/// Gradient over theta of sum_t log pi(a_t | s_t) * (target_t - baseline_t),
/// aligned with policy.params.
std::vector<Tensord> policy_gradient_estimate(const PolicyNet& policy, const Trajectory& trajectory,
                                              std::span<const double> targets,
                                              std::optional<std::span<const double>> baseline = std::nullopt);

/// [T x A] one-hot rows for the trajectory's actions.
Tensord action_one_hot(const Trajectory& trajectory, int num_actions);

struct A2CConfig {
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;  // per network; 0 disables clipping
  // Standardize R - V over the batch before the policy step, which makes the
  // step independent of the return's scale.
  bool normalize_advantages = false;
};

struct A2CStats {
  double policy_objective = 0.0;  // mean log-prob * advantage
  double value_loss = 0.0;
  double entropy = 0.0;
};

/// Synchronous advantage actor-critic with separate policy and value networks.
/// The policy ascends mean(log pi * (R - V)) + entropy_coef * mean entropy;
/// the value network descends value_coef * mean((V - R)^2).
class A2CLearner {
 public:
  A2CLearner(PolicyNet& policy, ValueNet& value, const OptimizerConfig& policy_opt, const OptimizerConfig& value_opt,
             A2CConfig config);

  A2CStats update(const Trajectory& trajectory, std::span<const double> returns);

  [[nodiscard]] const A2CConfig& config() const { return config_; }

 private:
  PolicyNet& policy_;
  ValueNet& value_;
  Optimizer policy_opt_;
  Optimizer value_opt_;
  A2CConfig config_;
};

/// Mean entropy of the policy over the given feature rows.
double mean_policy_entropy(const PolicyNet& policy, const Tensord& states);

struct ValueEstimate {
  double mean = 0.0;
  double standard_error = 0.0;
};

using ReturnFn = std::function<double(const Trajectory&)>;

/// Monte-Carlo estimate of E[return_fn(tau)] over n rollouts from `start`.
ValueEstimate mc_value_estimate(const Environment& env, const EnvState& start, const PolicyFn& policy,
                                const ReturnFn& return_fn, int n_rollouts, std::uint64_t seed);

}  // namespace rgm
