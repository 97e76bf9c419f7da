#pragma once

#include <rgm/agent.hpp>
#include <rgm/rgm.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rgm {

struct MetaConfig {
  double inner_lr = 1.0;  // alpha of the one-step inner ascent
  double meta_lr = 1e-4;  // alpha'; zero freezes eta
  int window = 200;       // RGM input length; longer episodes are split
  double gamma = 0.99;    // classic return used by the outer objective
  double clip_norm = 10.0;  // global norm on the meta-gradient; 0 disables
  OptimizerKind optimizer = OptimizerKind::Sgd;
};

/// theta' = theta + alpha * sum_t grad_theta log pi(a_t|s_t) G^g_t, recorded on
/// the tape that holds G^g so theta' stays a differentiable function of eta.
struct InnerUpdate {
  std::vector<Var> theta_prime;  // aligned with policy.params
  Var returns;                   // G^g, [T x 1]
  double inner_objective = 0.0;  // sum_t log pi(a_t|s_t) G^g_t at theta
};

InnerUpdate inner_update(const PolicyNet& policy, const Trajectory& trajectory, const Var& beta, double alpha);

/// sum_t G_t pi_theta'(a_t|s_t) / pi_theta(a_t|s_t). The behavior
/// log-probabilities are recomputed from policy.params as constants on the
/// same tape, so the ratios are exactly one when theta' equals theta.
Var surrogate_outer_objective(const PolicyNet& policy, const Trajectory& trajectory,
                              std::span<const Var> theta_prime, std::span<const double> classic_returns);

struct MetaStepReport {
  double inner_objective = 0.0;
  double surrogate = 0.0;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
  double beta_entropy = 0.0;
  double seconds = 0.0;
};

struct MetaGradient {
  std::vector<Tensord> grads;  // aligned with rgm.params, clipped
  MetaStepReport report;
};

/// How dJ/deta is assembled from v = dJ/dtheta'.
///  Recorded: build theta'(eta) with inner_update and pull v back through it.
///  Factored: theta' - theta = alpha * S^T G^g with S the per-step score
///  Jacobian, so v^T dtheta'/deta = alpha * (S v)^T dG^g/deta. S v comes from
///  one forward-mode sweep of the policy; no per-step backward passes.
enum class MetaPath { Recorded, Factored };

MetaGradient meta_gradient(const PolicyNet& policy, const ReturnGeneratingModel& rgm, const Trajectory& trajectory,
                           std::span<const double> classic_returns, const MetaConfig& config,
                           MetaPath path = MetaPath::Factored);

MetaGradient meta_gradient(const PolicyNet& policy, const ReturnGeneratingModel& rgm, const Trajectory& trajectory,
                           const MetaConfig& config, MetaPath path = MetaPath::Factored);

/// Per-step score Jacobian rows: entry t holds grad_theta log pi(a_t|s_t),
/// aligned with policy.params.
std::vector<std::vector<Tensord>> score_gradients(const PolicyNet& policy, const Trajectory& trajectory);

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

enum class Algorithm { Vanilla, Rgm };

Algorithm parse_algorithm(const std::string& name);
std::string to_string(Algorithm algorithm);

struct TrainConfig {
  Algorithm algorithm = Algorithm::Rgm;
  std::uint64_t seed = 1;
  int episodes = 1000;
  std::vector<Index> policy_hidden{64, 64, 64};
  std::vector<Index> value_hidden{64, 64, 64};
  OptimizerConfig policy_optimizer{OptimizerKind::RmsProp, 7e-4};
  OptimizerConfig value_optimizer{OptimizerKind::RmsProp, 7e-4};
  A2CConfig a2c;
  MetaConfig meta;
  RgmConfig rgm;
};

struct MetricsRow {
  std::int64_t episode = 0;  // 1-based
  std::int64_t env_steps = 0;
  double episode_return = 0.0;
  double moving_avg_1000 = 0.0;
  double beta_entropy = 0.0;    // mean over windows; 0 for vanilla
  double meta_grad_norm = 0.0;  // mean over windows; 0 for vanilla
  double surrogate_J = 0.0;     // mean over windows; 0 for vanilla
};

/// Trailing mean over the last `window` entries (fewer at the start).
class MovingAverage {
 public:
  explicit MovingAverage(std::size_t window = 1000) : window_(window) {}
  double push(double x);

 private:
  std::size_t window_;
  std::vector<double> ring_;
  std::size_t next_ = 0;
};

struct Learner {
  PolicyNet policy;
  ValueNet value;
  std::optional<ReturnGeneratingModel> rgm;
  std::optional<ReturnGeneratingModel> target;
};

/// Networks initialized from the config's seed streams.
Learner make_learner(const TrainConfig& config, const Environment& env);

struct TrainHooks {
  std::function<void(const MetricsRow&)> on_episode;
  // written with the last finite parameters when training aborts on NaN
  std::optional<std::filesystem::path> abort_checkpoint;
};

struct TrainResult {
  Learner learner;
  std::vector<MetricsRow> metrics;
};

/// Raised when a loss or gradient turns non-finite mid-run.
class TrainingAborted : public NumericalError {
 public:
  TrainingAborted(const std::string& what, std::int64_t episode) : NumericalError(what), episode_(episode) {}
  [[nodiscard]] std::int64_t episode() const { return episode_; }

 private:
  std::int64_t episode_;
};

/// Per episode: roll out under pi_theta; split into windows; per window
/// compute returns (classic, or G^g from the RGM or its target copy), run
/// the A2C update, take a meta step on eta from the pre-update theta, and
/// sync the target. Deterministic given the config.
TrainResult meta_train(const TrainConfig& config, const Environment& env, const TrainHooks& hooks = {});

/// Greedy-policy episode from the environment's start state.
Trajectory greedy_rollout(const PolicyNet& policy, const Environment& env);

void save_learner(const std::filesystem::path& path, const Learner& learner);
void load_learner(const std::filesystem::path& path, Learner& learner);

}  // namespace rgm
