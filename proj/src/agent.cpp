#include <rgm/agent.hpp>

#include <cmath>
#include <sstream>

namespace rgm {
namespace {

std::vector<Index> layer_dims(Index in, const std::vector<Index>& hidden, Index out) {
  std::vector<Index> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

}  // namespace

PolicyNet::PolicyNet(Index input_dim, const std::vector<Index>& hidden, int num_actions, Rng& rng)
    : mlp_(params, "policy", layer_dims(input_dim, hidden, num_actions), rng) {}

Var PolicyNet::log_probs(std::span<const Var> bound, const Var& states) const {
  return ad::log_softmax(mlp_.forward(bound, states), 1);
}

Tensord PolicyNet::probabilities(const Tensord& states) const {
  Tensord logits = mlp_.evaluate(params, states);
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - m).exp().matrix();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

std::vector<double> PolicyNet::probabilities(std::span<const double> features) const {
  Tensord row(1, static_cast<Index>(features.size()));
  for (std::size_t j = 0; j < features.size(); ++j) row(0, static_cast<Index>(j)) = features[j];
  const Tensord p = probabilities(row);
  return {p.data(), p.data() + p.size()};
}

PolicyFn PolicyNet::sampler() const {
  return [this](std::span<const double> features) { return probabilities(features); };
}

PolicyFn PolicyNet::greedy() const {
  return [this](std::span<const double> features) {
    std::vector<double> p = probabilities(features);
    const auto best = std::max_element(p.begin(), p.end()) - p.begin();
    std::fill(p.begin(), p.end(), 0.0);
    p[static_cast<std::size_t>(best)] = 1.0;
    return p;
  };
}

ValueNet::ValueNet(Index input_dim, const std::vector<Index>& hidden, Rng& rng)
    : mlp_(params, "value", layer_dims(input_dim, hidden, 1), rng) {}

Var ValueNet::values(std::span<const Var> bound, const Var& states) const { return mlp_.forward(bound, states); }

Tensord ValueNet::evaluate(const Tensord& states) const { return mlp_.evaluate(params, states); }

// ---------------------------------------------------------------------------

std::vector<double> discounted_return(std::span<const double> rewards, double gamma) {
  if (rewards.empty()) throw std::invalid_argument("discounted_return: empty trajectory");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw std::invalid_argument("discounted_return: gamma outside [0, 1]");
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

std::vector<double> discounted_return(const Trajectory& trajectory, double gamma) {
  const auto r = trajectory.rewards();
  return discounted_return(std::span<const double>(r), gamma);
}

Tensord action_one_hot(const Trajectory& trajectory, int num_actions) {
  Tensord m = Tensord::Zero(trajectory.size(), num_actions);
  for (Index t = 0; t < trajectory.size(); ++t) m(t, trajectory.steps[static_cast<std::size_t>(t)].action) = 1.0;
  return m;
}

std::vector<Tensord> policy_gradient_estimate(const PolicyNet& policy, const Trajectory& trajectory,
                                              std::span<const double> targets,
                                              std::optional<std::span<const double>> baseline) {
  const Index T = trajectory.size();
  if (T == 0) throw std::invalid_argument("policy_gradient_estimate: empty trajectory");
  if (static_cast<Index>(targets.size()) != T || (baseline && static_cast<Index>(baseline->size()) != T)) {
    throw std::invalid_argument("policy_gradient_estimate: " + std::to_string(targets.size()) +
                                " targets for a trajectory of length " + std::to_string(T));
  }
  Tensord weights(T, 1);
  for (Index t = 0; t < T; ++t) {
    weights(t, 0) = targets[static_cast<std::size_t>(t)] - (baseline ? (*baseline)[static_cast<std::size_t>(t)] : 0.0);
  }
  Tape tape;
  const std::vector<Var> theta = policy.params.bind(tape);
  const Var logp = policy.log_probs(theta, tape.constant(trajectory.features));
  const Var chosen = ad::sum(logp * tape.constant(action_one_hot(trajectory, policy.num_actions())), 1);
  const Var objective = ad::sum(chosen * tape.constant(weights));
  return ad::backward(tape, objective, std::span<const Var>(theta)).release();
}

// ---------------------------------------------------------------------------

A2CLearner::A2CLearner(PolicyNet& policy, ValueNet& value, const OptimizerConfig& policy_opt,
                       const OptimizerConfig& value_opt, A2CConfig config)
    : policy_(policy),
      value_(value),
      policy_opt_(policy_opt, policy.params),
      value_opt_(value_opt, value.params),
      config_(config) {}

A2CStats A2CLearner::update(const Trajectory& trajectory, std::span<const double> returns) {
  const Index T = trajectory.size();
  if (static_cast<Index>(returns.size()) != T) {
    throw std::invalid_argument("a2c_update: " + std::to_string(returns.size()) + " returns for " +
                                std::to_string(T) + " steps");
  }
  Tensord targets(T, 1);
  for (Index t = 0; t < T; ++t) targets(t, 0) = returns[static_cast<std::size_t>(t)];

  Tape tape;
  const std::vector<Var> theta = policy_.params.bind(tape);
  const std::vector<Var> phi = value_.params.bind(tape);
  const Var states = tape.constant(trajectory.features);

  const Var v = value_.values(phi, states);
  const Var residual = v - tape.constant(targets);
  const Var value_loss = config_.value_coef * ad::mean(residual * residual);

  Tensord advantage = targets - v.value();
  if (config_.normalize_advantages && T > 1) {
    const double mu = advantage.mean();
    const double sd = std::sqrt((advantage.array() - mu).square().sum() / static_cast<double>(T));
    advantage = ((advantage.array() - mu) / (sd + 1e-8)).matrix();
  }
  const Var logp = policy_.log_probs(theta, states);
  const Var chosen = ad::sum(logp * tape.constant(action_one_hot(trajectory, policy_.num_actions())), 1);
  const Var pg = ad::mean(chosen * tape.constant(advantage));
  const Var entropy = ad::mean(-ad::sum(ad::exp(logp) * logp, 1));
  const Var policy_objective = pg + config_.entropy_coef * entropy;

  A2CStats stats{pg.item(), value_loss.item(), entropy.item()};
  if (!std::isfinite(stats.policy_objective) || !std::isfinite(stats.value_loss) || !std::isfinite(stats.entropy)) {
    std::ostringstream os;
    os << "a2c_update: non-finite loss (policy " << stats.policy_objective << ", value " << stats.value_loss
       << ", entropy " << stats.entropy << ") on a trajectory of length " << T;
    throw NumericalError(os.str());
  }

  std::vector<Tensord> g_theta = ad::backward(tape, policy_objective, std::span<const Var>(theta)).release();
  std::vector<Tensord> g_phi = ad::backward(tape, value_loss, std::span<const Var>(phi)).release();
  clip_global_norm(g_theta, config_.max_grad_norm);
  clip_global_norm(g_phi, config_.max_grad_norm);
  policy_opt_.step(policy_.params, g_theta, UpdateDirection::Ascent);
  value_opt_.step(value_.params, g_phi, UpdateDirection::Descent);
  return stats;
}

double mean_policy_entropy(const PolicyNet& policy, const Tensord& states) {
  const Tensord p = policy.probabilities(states);
  double total = 0.0;
  for (Index i = 0; i < p.rows(); ++i) {
    for (Index j = 0; j < p.cols(); ++j) {
      if (p(i, j) > 0.0) total -= p(i, j) * std::log(p(i, j));
    }
  }
  return total / static_cast<double>(p.rows());
}

ValueEstimate mc_value_estimate(const Environment& env, const EnvState& start, const PolicyFn& policy,
                                const ReturnFn& return_fn, int n_rollouts, std::uint64_t seed) {
  if (n_rollouts < 1) throw std::invalid_argument("mc_value_estimate: n_rollouts must be >= 1");
  // Accumulate around the first sample so identical outcomes give exactly
  // zero spread.
  double first = 0.0;
  double sum = 0.0;
  double sum_sq = 0.0;
  for (int i = 0; i < n_rollouts; ++i) {
    const Trajectory tau = rollout(env, policy, derive_seed(seed, Stream::Evaluation, static_cast<std::uint64_t>(i)), start);
    const double g = return_fn(tau);
    if (i == 0) first = g;
    sum += g - first;
    sum_sq += (g - first) * (g - first);
  }
  const double n = n_rollouts;
  ValueEstimate est;
  est.mean = first + sum / n;
  if (n_rollouts > 1) {
    const double var = std::max(0.0, (sum_sq - sum * sum / n) / (n - 1.0));
    est.standard_error = std::sqrt(var / n);
  }
  return est;
}

}  // namespace rgm
