#include <rgm/checkpoint.hpp>
#include <rgm/meta.hpp>

#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

namespace rgm {
namespace {

constexpr double kMinBehaviorProbability = 1e-12;

Tensord column(std::span<const double> xs) {
  Tensord c(static_cast<Index>(xs.size()), 1);
  for (std::size_t i = 0; i < xs.size(); ++i) c(static_cast<Index>(i), 0) = xs[i];
  return c;
}

// [T x 1] log pi(a_t | s_t) under the bound parameters.
Var chosen_log_probs(const PolicyNet& policy, std::span<const Var> bound, const Trajectory& trajectory) {
  Tape& tape = *bound.front().tape();
  const Var logp = policy.log_probs(bound, tape.constant(trajectory.features));
  return ad::sum(logp * tape.constant(action_one_hot(trajectory, policy.num_actions())), 1);
}

void require_finite(std::span<const Tensord> grads, const std::string& what) {
  for (const Tensord& g : grads) {
    if (!g.allFinite()) throw NumericalError(what + ": non-finite gradient");
  }
}

void check_lengths(const Trajectory& trajectory, std::span<const double> returns, const char* who) {
  if (trajectory.empty()) throw std::invalid_argument(std::string(who) + ": empty trajectory");
  if (static_cast<Index>(returns.size()) != trajectory.size()) {
    throw std::invalid_argument(std::string(who) + ": " + std::to_string(returns.size()) + " returns for " +
                                std::to_string(trajectory.size()) + " steps");
  }
}

}  // namespace

std::vector<std::vector<Tensord>> score_gradients(const PolicyNet& policy, const Trajectory& trajectory) {
  Tape tape;
  const std::vector<Var> theta = policy.params.bind(tape);
  const Var lp = chosen_log_probs(policy, theta, trajectory);
  std::vector<std::vector<Tensord>> rows;
  rows.reserve(static_cast<std::size_t>(trajectory.size()));
  for (Index t = 0; t < trajectory.size(); ++t) {
    Tensord e = Tensord::Zero(trajectory.size(), 1);
    e(t, 0) = 1.0;
    rows.push_back(ad::vector_jacobian_product(tape, lp, e, std::span<const Var>(theta)).release());
    require_finite(rows.back(), "score_gradients");
  }
  return rows;
}

InnerUpdate inner_update(const PolicyNet& policy, const Trajectory& trajectory, const Var& beta, double alpha) {
  if (!std::isfinite(alpha)) throw std::invalid_argument("inner_update: non-finite step size");
  Tape& tape = *beta.tape();
  const std::vector<double> rewards = trajectory.rewards();
  InnerUpdate out;
  out.returns = rgm_return(beta, rewards);

  const Index T = trajectory.size();
  const auto scores = score_gradients(policy, trajectory);
  const Var g_row = ad::transpose(out.returns);  // [1 x T]
  for (std::size_t p = 0; p < policy.params.size(); ++p) {
    const Tensord& theta = policy.params[p].value;
    Tensord jac(T, theta.size());
    for (Index t = 0; t < T; ++t) {
      jac.row(t) = Eigen::Map<const Eigen::RowVectorXd>(scores[static_cast<std::size_t>(t)][p].data(), theta.size());
    }
    const Var step = ad::reshape(ad::matmul(g_row, tape.constant(std::move(jac))), theta.rows(), theta.cols());
    out.theta_prime.push_back(tape.constant(theta) + alpha * step);
  }

  Tape scratch;
  const std::vector<Var> theta = policy.params.bind_constant(scratch);
  const Tensord lp = chosen_log_probs(policy, theta, trajectory).value();
  out.inner_objective = lp.cwiseProduct(out.returns.value()).sum();
  if (!std::isfinite(out.inner_objective)) throw NumericalError("inner_update: non-finite inner objective");
  return out;
}

Var surrogate_outer_objective(const PolicyNet& policy, const Trajectory& trajectory,
                              std::span<const Var> theta_prime, std::span<const double> classic_returns) {
  check_lengths(trajectory, classic_returns, "surrogate_outer_objective");
  if (theta_prime.size() != policy.params.size()) {
    throw ShapeError("surrogate_outer_objective: " + std::to_string(theta_prime.size()) + " tensors for a policy with " +
                     std::to_string(policy.params.size()));
  }
  Tape& tape = *theta_prime.front().tape();
  const std::vector<Var> behavior = policy.params.bind_constant(tape);
  const Var lp_behavior = chosen_log_probs(policy, behavior, trajectory);
  for (Index t = 0; t < trajectory.size(); ++t) {
    if (std::exp(lp_behavior.value()(t, 0)) < kMinBehaviorProbability) {
      std::ostringstream os;
      os << "surrogate_outer_objective: behavior probability " << std::exp(lp_behavior.value()(t, 0)) << " at step "
         << t << " is below " << kMinBehaviorProbability;
      throw NumericalError(os.str());
    }
  }
  const Var ratio = ad::exp(chosen_log_probs(policy, theta_prime, trajectory) - lp_behavior);
  return ad::sum(ratio * tape.constant(column(classic_returns)));
}

MetaGradient meta_gradient(const PolicyNet& policy, const ReturnGeneratingModel& rgm, const Trajectory& trajectory,
                           std::span<const double> classic_returns, const MetaConfig& config, MetaPath path) {
  check_lengths(trajectory, classic_returns, "meta_gradient");
  const auto started = std::chrono::steady_clock::now();
  MetaGradient out;

  Tape tape;
  const std::vector<Var> eta = rgm.params.bind(tape);
  const Var beta = rgm.generate_beta(eta, trajectory);
  const Tensord& b = beta.value();
  out.report.beta_entropy = beta_entropy(std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));

  if (path == MetaPath::Recorded) {
    const InnerUpdate inner = inner_update(policy, trajectory, beta, config.inner_lr);
    const Var j = surrogate_outer_objective(policy, trajectory, inner.theta_prime, classic_returns);
    out.report.inner_objective = inner.inner_objective;
    out.report.surrogate = j.item();
    out.grads = ad::backward(tape, j, std::span<const Var>(eta)).release();
  } else {
    const Var g = rgm_return(beta, trajectory.rewards());

    Tape ptape;
    const std::vector<Var> theta = policy.params.bind(ptape);
    const Var lp = chosen_log_probs(policy, theta, trajectory);
    out.report.inner_objective = lp.value().cwiseProduct(g.value()).sum();
    std::vector<Tensord> step =
        ad::vector_jacobian_product(ptape, lp, g.value(), std::span<const Var>(theta)).release();
    require_finite(step, "inner_update");

    Tape outer;
    std::vector<Var> theta_prime;
    theta_prime.reserve(step.size());
    for (std::size_t p = 0; p < step.size(); ++p) {
      theta_prime.push_back(outer.variable(policy.params[p].value + config.inner_lr * step[p]));
    }
    const Var j = surrogate_outer_objective(policy, trajectory, theta_prime, classic_returns);
    out.report.surrogate = j.item();
    const std::vector<Tensord> v = ad::backward(outer, j, std::span<const Var>(theta_prime)).release();

    const std::vector<Tensord> sv =
        ad::jacobian_vector_product(ptape, std::span<const Var>(theta), std::span<const Tensord>(v),
                                    std::span<const Var>(&lp, 1));
    out.grads =
        ad::vector_jacobian_product(tape, g, Tensord(config.inner_lr * sv.front()), std::span<const Var>(eta))
            .release();
  }

  require_finite(out.grads, "meta_gradient");
  if (!std::isfinite(out.report.surrogate)) throw NumericalError("meta_gradient: non-finite surrogate objective");
  if (config.clip_norm > 0.0) {
    out.report.grad_norm = clip_global_norm(out.grads, config.clip_norm);
    out.report.clipped = out.report.grad_norm > config.clip_norm;
  } else {
    out.report.grad_norm = global_norm(out.grads);
  }
  out.report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

MetaGradient meta_gradient(const PolicyNet& policy, const ReturnGeneratingModel& rgm, const Trajectory& trajectory,
                           const MetaConfig& config, MetaPath path) {
  const std::vector<double> g = discounted_return(trajectory, config.gamma);
  return meta_gradient(policy, rgm, trajectory, g, config, path);
}

// ---------------------------------------------------------------------------

Algorithm parse_algorithm(const std::string& name) {
  if (name == "vanilla") return Algorithm::Vanilla;
  if (name == "rgm") return Algorithm::Rgm;
  throw std::invalid_argument("unknown algorithm '" + name + "' (expected vanilla or rgm)");
}

std::string to_string(Algorithm algorithm) { return algorithm == Algorithm::Vanilla ? "vanilla" : "rgm"; }

double MovingAverage::push(double x) {
  if (ring_.size() < window_) {
    ring_.push_back(x);
  } else {
    ring_[next_] = x;
    next_ = (next_ + 1) % window_;
  }
  // Summing the window afresh keeps the result free of accumulated drift.
  const double total = std::accumulate(ring_.begin(), ring_.end(), 0.0);
  return total / static_cast<double>(ring_.size());
}

Learner make_learner(const TrainConfig& config, const Environment& env) {
  Rng policy_rng(config.seed, Stream::PolicyInit);
  Rng value_rng(config.seed, Stream::ValueInit);
  Learner learner{PolicyNet(env.feature_dim(), config.policy_hidden, env.num_actions(), policy_rng),
                  ValueNet(env.feature_dim(), config.value_hidden, value_rng), std::nullopt, std::nullopt};
  if (config.algorithm == Algorithm::Rgm) {
    RgmConfig rc = config.rgm;
    rc.state_dim = env.feature_dim();
    rc.num_actions = env.num_actions();
    Rng rgm_rng(config.seed, Stream::RgmInit);
    learner.rgm.emplace(rc, rgm_rng);
    if (rc.variant == RgmVariant::WithTargetNetwork) learner.target = learner.rgm;
  }
  return learner;
}

Trajectory greedy_rollout(const PolicyNet& policy, const Environment& env) { return rollout(env, policy.greedy(), 0); }

void save_learner(const std::filesystem::path& path, const Learner& learner) {
  std::vector<ParameterGroup> groups{{"policy", &learner.policy.params}, {"value", &learner.value.params}};
  if (learner.rgm) groups.emplace_back("rgm", &learner.rgm->params);
  if (learner.target) groups.emplace_back("rgm_target", &learner.target->params);
  save_checkpoint(path, groups);
}

void load_learner(const std::filesystem::path& path, Learner& learner) {
  const std::vector<Parameter> loaded = load_checkpoint(path);
  restore_group(learner.policy.params, "policy", loaded);
  restore_group(learner.value.params, "value", loaded);
  if (learner.rgm) restore_group(learner.rgm->params, "rgm", loaded);
  if (learner.target) {
    restore_group(learner.target->params, has_group(loaded, "rgm_target") ? "rgm_target" : "rgm", loaded);
  }
}

namespace {

bool learner_finite(const Learner& l) {
  return l.policy.params.all_finite() && l.value.params.all_finite() && (!l.rgm || l.rgm->params.all_finite()) &&
         (!l.target || l.target->params.all_finite());
}

}  // namespace

TrainResult meta_train(const TrainConfig& config, const Environment& env, const TrainHooks& hooks) {
  if (config.episodes < 0) throw std::invalid_argument("meta_train: negative episode count");
  if (config.meta.window < 1) throw std::invalid_argument("meta_train: window must be >= 1");
  if (!(config.meta.meta_lr >= 0.0)) throw std::invalid_argument("meta_train: meta learning rate must be >= 0");

  TrainResult result{make_learner(config, env), {}};
  Learner& l = result.learner;
  A2CLearner a2c(l.policy, l.value, config.policy_optimizer, config.value_optimizer, config.a2c);
  std::optional<Optimizer> meta_opt;
  if (l.rgm) meta_opt.emplace(OptimizerConfig{config.meta.optimizer, config.meta.meta_lr}, l.rgm->params);
  const int sync_period = config.rgm.target_sync_period;

  MovingAverage average(1000);
  std::int64_t env_steps = 0;
  std::uint64_t meta_steps = 0;
  result.metrics.reserve(static_cast<std::size_t>(config.episodes));

  for (int episode = 0; episode < config.episodes; ++episode) {
    const Learner last_good = l;
    MetricsRow row;
    row.episode = episode + 1;
    try {
      const Trajectory traj =
          rollout(env, l.policy.sampler(), derive_seed(config.seed, Stream::Rollout, static_cast<std::uint64_t>(episode)));
      const std::vector<double> classic = discounted_return(traj, config.meta.gamma);
      int windows = 0;
      for (Index begin = 0; begin < traj.size(); begin += config.meta.window) {
        const Index len = std::min<Index>(config.meta.window, traj.size() - begin);
        const Trajectory w = traj.window(begin, len);
        const std::span<const double> classic_w(classic.data() + begin, static_cast<std::size_t>(len));
        ++windows;
        if (!l.rgm) {
          a2c.update(w, classic_w);
          continue;
        }
        const ReturnGeneratingModel& source = l.target ? *l.target : *l.rgm;
        const std::vector<double> beta = source.beta(w);
        const std::vector<double> returns = rgm_return(w.rewards(), beta);
        const MetaGradient mg = meta_gradient(l.policy, *l.rgm, w, classic_w, config.meta);
        a2c.update(w, returns);
        meta_opt->step(l.rgm->params, mg.grads, UpdateDirection::Ascent);
        ++meta_steps;
        if (l.target) target_sync(*l.rgm, *l.target, meta_steps, sync_period);
        row.beta_entropy += beta_entropy(beta);
        row.meta_grad_norm += mg.report.grad_norm;
        row.surrogate_J += mg.report.surrogate;
      }
      if (l.rgm) {
        row.beta_entropy /= windows;
        row.meta_grad_norm /= windows;
        row.surrogate_J /= windows;
      }
      if (!learner_finite(l)) throw NumericalError("parameters became non-finite");
      env_steps += traj.size();
      row.env_steps = env_steps;
      row.episode_return = traj.total_reward();
      row.moving_avg_1000 = average.push(row.episode_return);
    } catch (const NumericalError& e) {
      l = last_good;
      if (hooks.abort_checkpoint) save_learner(*hooks.abort_checkpoint, l);
      throw TrainingAborted("episode " + std::to_string(episode + 1) + ": " + e.what(), episode + 1);
    } catch (const PolicyError& e) {
      l = last_good;
      if (hooks.abort_checkpoint) save_learner(*hooks.abort_checkpoint, l);
      throw TrainingAborted("episode " + std::to_string(episode + 1) + ": " + e.what(), episode + 1);
    }
    result.metrics.push_back(row);
    if (hooks.on_episode) hooks.on_episode(row);
  }
  return result;
}

}  // namespace rgm
