#include "helpers.hpp"
#include "meta_oracle.hpp"
#include "oracles.hpp"

#include <rgm/checkpoint.hpp>
#include <rgm/meta.hpp>

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <limits>

using namespace rgm;
using testing_support::random_trajectory;
using meta_oracle::as_vector;
using meta_oracle::count;
using meta_oracle::fd_meta_gradient;
using meta_oracle::outer_objective;
using meta_oracle::relative_error;
using meta_oracle::tiny_rgm;

namespace {

MetaConfig unclipped(double alpha) {
  MetaConfig c;
  c.inner_lr = alpha;
  c.clip_norm = 0.0;
  return c;
}

bool same_bits(const ParameterSet& a, const ParameterSet& b) {
  if (!a.same_layout(b)) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].value.array() == b[i].value.array()).all()) return false;
  }
  return true;
}

bool same_rows(const std::vector<MetricsRow>& a, const std::vector<MetricsRow>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const MetricsRow& x = a[i];
    const MetricsRow& y = b[i];
    if (x.episode != y.episode || x.env_steps != y.env_steps || x.episode_return != y.episode_return ||
        x.moving_avg_1000 != y.moving_avg_1000 || x.beta_entropy != y.beta_entropy ||
        x.meta_grad_norm != y.meta_grad_norm || x.surrogate_J != y.surrogate_J) {
      return false;
    }
  }
  return true;
}

TrainConfig small_train(Algorithm algorithm, int episodes) {
  TrainConfig c;
  c.algorithm = algorithm;
  c.seed = 5;
  c.episodes = episodes;
  c.policy_hidden = {16};
  c.value_hidden = {16};
  c.rgm.d_model = 8;
  c.rgm.heads = 2;
  c.rgm.layers = 1;
  c.rgm.ff_dim = 8;
  c.meta.window = 50;
  return c;
}

}  // namespace

TEST_CASE("the inner step matches a hand-rolled REINFORCE update") {
  Rng rng(1, Stream::Test);
  const PolicyNet policy(2, {6, 6}, 4, rng);
  const ReturnGeneratingModel model(tiny_rgm(), rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Trajectory tau = random_trajectory(2 + trial % 7, 2, 4, rng);
    Tape tape;
    const auto eta = model.params.bind(tape);
    const Var beta = model.generate_beta(eta, tau);
    const double alpha = 0.7;
    const InnerUpdate inner = inner_update(policy, tau, beta, alpha);
    const auto ref = oracle::reinforce_step(oracle::Mlp::from(policy.params), tau,
                                            oracle::suffix_weighted(tau.rewards(), as_vector(beta.value())), alpha);
    REQUIRE(inner.theta_prime.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i) {
      CHECK((Eigen::MatrixXd(inner.theta_prime[i].value()) - ref[i]).cwiseAbs().maxCoeff() < 1e-10);
    }
  }
}

TEST_CASE("a zero step size or a zero generated return leaves theta unchanged") {
  Rng rng(2, Stream::Test);
  const PolicyNet policy(2, {6}, 4, rng);
  Trajectory tau = random_trajectory(5, 2, 4, rng);
  {
    Tape tape;
    const Var beta = tape.variable(Tensord::Constant(5, 1, 0.2));
    const InnerUpdate inner = inner_update(policy, tau, beta, 0.0);
    for (std::size_t i = 0; i < policy.params.size(); ++i) CHECK(inner.theta_prime[i].value() == policy.params[i].value);
  }
  {
    // all weight on step 2, whose reward is zero: G^g is zero everywhere
    tau.steps[2].reward = 0.0;
    Tape tape;
    Tensord one_hot = Tensord::Zero(5, 1);
    one_hot(2, 0) = 1.0;
    const InnerUpdate inner = inner_update(policy, tau, tape.variable(one_hot), 1.0);
    CHECK(inner.returns.value().cwiseAbs().maxCoeff() == 0.0);
    for (std::size_t i = 0; i < policy.params.size(); ++i) CHECK(inner.theta_prime[i].value() == policy.params[i].value);
  }
}

TEST_CASE("the surrogate at theta' = theta is the sum of the returns") {
  Rng rng(3, Stream::Test);
  const PolicyNet policy(2, {6}, 4, rng);
  const Trajectory tau = random_trajectory(8, 2, 4, rng);
  const std::vector<double> g = discounted_return(tau, 0.99);
  Tape tape;
  const auto theta = policy.params.bind(tape);
  const Var j = surrogate_outer_objective(policy, tau, theta, g);
  double total = 0.0;
  for (double x : g) total += x;
  CHECK(std::abs(j.item() - total) < 1e-12);

  Tape zero_tape;
  const auto theta0 = policy.params.bind(zero_tape);
  CHECK(surrogate_outer_objective(policy, tau, theta0, std::vector<double>(8, 0.0)).item() == 0.0);
  CHECK_THROWS_AS(surrogate_outer_objective(policy, tau, theta0, std::vector<double>(3, 0.0)), std::invalid_argument);
}

TEST_CASE("the surrogate gradient at theta' = theta is the policy gradient estimate") {
  Rng rng(4, Stream::Test);
  const PolicyNet policy(2, {6, 6}, 4, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Trajectory tau = random_trajectory(3 + trial, 2, 4, rng);
    const std::vector<double> g = discounted_return(tau, 0.99);
    Tape tape;
    const auto theta = policy.params.bind(tape);
    const Var j = surrogate_outer_objective(policy, tau, theta, g);
    const auto grads = ad::backward(tape, j, std::span<const Var>(theta)).release();
    const auto pg = policy_gradient_estimate(policy, tau, g);
    for (std::size_t i = 0; i < pg.size(); ++i) CHECK((grads[i] - pg[i]).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("the expected surrogate gradient equals the exact tabular gradient") {
  const oracle::TabularMdp mdp;
  Rng rng(5, Stream::Test);
  const PolicyNet policy(2, {4}, 2, rng);
  const oracle::Mlp ref = oracle::Mlp::from(policy.params);
  auto probs = [&](int s) {
    Eigen::RowVectorXd x = Eigen::RowVectorXd::Zero(2);
    x(s) = 1.0;
    return Eigen::RowVectorXd(ref.log_softmax(x).array().exp());
  };
  std::vector<Eigen::MatrixXd> expected;
  for (const auto& p : policy.params) expected.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
  for (const auto& path : mdp.enumerate()) {
    const Trajectory tau = oracle::TabularMdp::to_trajectory(path);
    Tape tape;
    const auto theta = policy.params.bind(tape);
    const Var j = surrogate_outer_objective(policy, tau, theta, discounted_return(tau, 1.0));
    const auto grads = ad::backward(tape, j, std::span<const Var>(theta)).release();
    const double pr = oracle::TabularMdp::probability(path, probs);
    for (std::size_t i = 0; i < grads.size(); ++i) expected[i] += pr * Eigen::MatrixXd(grads[i]);
  }
  const auto exact = oracle::tabular_gradient(mdp, policy.params, 1e-5);
  for (std::size_t i = 0; i < exact.size(); ++i) CHECK((expected[i] - exact[i]).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("meta-gradients match finite differences of the outer objective") {
  for (std::uint64_t instance = 0; instance < 20; ++instance) {
    Rng rng(100 + instance, Stream::Test);
    const PolicyNet policy(2, {6}, 4, rng);
    const ReturnGeneratingModel model(tiny_rgm(), rng);
    REQUIRE(count(policy.params) <= 200);
    REQUIRE(count(model.params) <= 200);
    const Index T = 2 + static_cast<Index>(instance % 7);
    Trajectory tau = random_trajectory(T, 2, 4, rng);
    if (instance == 0) {
      for (auto& s : tau.steps) s.reward = 0.5;
    }
    const std::vector<double> classic = discounted_return(tau, 0.99);
    const double alpha = 0.5;
    const auto fd = fd_meta_gradient(policy, model, tau, classic, alpha, 1e-4);
    const MetaGradient factored = meta_gradient(policy, model, tau, classic, unclipped(alpha), MetaPath::Factored);
    const MetaGradient recorded = meta_gradient(policy, model, tau, classic, unclipped(alpha), MetaPath::Recorded);
    INFO("instance " << instance);
    CHECK(relative_error(factored.grads, fd) < 1e-3);
    CHECK(relative_error(recorded.grads, fd) < 1e-3);
    CHECK(relative_error(factored.grads, recorded.grads) < 1e-10);
    CHECK(factored.report.surrogate == doctest::Approx(outer_objective(policy, model, tau, classic, alpha)).epsilon(1e-10));
  }
}

TEST_CASE("a zero inner step size gives exactly zero meta-gradient") {
  Rng rng(6, Stream::Test);
  const PolicyNet policy(2, {6}, 4, rng);
  const ReturnGeneratingModel model(tiny_rgm(), rng);
  const Trajectory tau = random_trajectory(6, 2, 4, rng);
  for (MetaPath path : {MetaPath::Factored, MetaPath::Recorded}) {
    const MetaGradient mg = meta_gradient(policy, model, tau, unclipped(0.0), path);
    for (const auto& g : mg.grads) CHECK(g.cwiseAbs().maxCoeff() == 0.0);
    CHECK(mg.report.grad_norm == 0.0);
  }
}

TEST_CASE("meta-gradients are clipped to the configured norm") {
  Rng rng(7, Stream::Test);
  const PolicyNet policy(2, {6}, 4, rng);
  const ReturnGeneratingModel model(tiny_rgm(), rng);
  const Trajectory tau = random_trajectory(6, 2, 4, rng);
  MetaConfig cfg = unclipped(5.0);
  const double raw = meta_gradient(policy, model, tau, cfg).report.grad_norm;
  REQUIRE(raw > 1e-6);
  cfg.clip_norm = raw / 2.0;
  const MetaGradient clipped = meta_gradient(policy, model, tau, cfg);
  CHECK(clipped.report.clipped);
  CHECK(clipped.report.grad_norm == doctest::Approx(raw).epsilon(1e-12));
  CHECK(global_norm(clipped.grads) == doctest::Approx(raw / 2.0).epsilon(1e-12));
}

TEST_CASE("a vanishing behavior probability is a numerical error") {
  Rng rng(8, Stream::Test);
  PolicyNet policy(2, {4}, 4, rng);
  // make action 0 overwhelmingly likely, then ask about action 3
  policy.params[policy.params.size() - 1].value(0, 0) = 100.0;
  Trajectory tau = random_trajectory(3, 2, 4, rng);
  tau.steps[1].action = 3;
  Tape tape;
  const auto theta = policy.params.bind(tape);
  CHECK_THROWS_AS(surrogate_outer_objective(policy, tau, theta, std::vector<double>(3, 1.0)), NumericalError);
}

TEST_CASE("moving average matches a direct trailing mean") {
  Rng rng(9, Stream::Test);
  MovingAverage avg(1000);
  std::vector<double> xs;
  for (int i = 0; i < 3000; ++i) {
    xs.push_back(rng.uniform(-1.0, 1.0));
    const double got = avg.push(xs.back());
    const std::size_t from = xs.size() > 1000 ? xs.size() - 1000 : 0;
    double ref = 0.0;
    for (std::size_t k = from; k < xs.size(); ++k) ref += xs[k];
    ref /= static_cast<double>(xs.size() - from);
    CHECK(std::abs(got - ref) < 1e-12);
  }
}

TEST_CASE("algorithm names round-trip") {
  CHECK(parse_algorithm(to_string(Algorithm::Vanilla)) == Algorithm::Vanilla);
  CHECK(parse_algorithm(to_string(Algorithm::Rgm)) == Algorithm::Rgm);
  CHECK_THROWS_AS(parse_algorithm("ppo"), std::invalid_argument);
}

TEST_CASE("zero episodes leaves the initial networks") {
  const MazeEnv env(default_maze());
  const TrainConfig cfg = small_train(Algorithm::Rgm, 0);
  const TrainResult r = meta_train(cfg, env);
  const Learner fresh = make_learner(cfg, env);
  CHECK(r.metrics.empty());
  CHECK(same_bits(r.learner.policy.params, fresh.policy.params));
  CHECK(same_bits(r.learner.rgm->params, fresh.rgm->params));
}

TEST_CASE("a frozen RGM reduces training to A2C on fixed generated returns") {
  const MazeEnv env(default_maze());
  TrainConfig cfg = small_train(Algorithm::Rgm, 6);
  cfg.meta.meta_lr = 0.0;
  const TrainResult r = meta_train(cfg, env);

  Learner ref = make_learner(cfg, env);
  A2CLearner a2c(ref.policy, ref.value, cfg.policy_optimizer, cfg.value_optimizer, cfg.a2c);
  for (int ep = 0; ep < cfg.episodes; ++ep) {
    const Trajectory tau =
        rollout(env, ref.policy.sampler(), derive_seed(cfg.seed, Stream::Rollout, static_cast<std::uint64_t>(ep)));
    for (Index begin = 0; begin < tau.size(); begin += cfg.meta.window) {
      const Trajectory w = tau.window(begin, std::min<Index>(cfg.meta.window, tau.size() - begin));
      a2c.update(w, rgm_return(w.rewards(), ref.rgm->beta(w)));
    }
    CHECK(r.metrics[static_cast<std::size_t>(ep)].episode_return == tau.total_reward());
  }
  CHECK(same_bits(r.learner.policy.params, ref.policy.params));
  CHECK(same_bits(r.learner.value.params, ref.value.params));
  CHECK(same_bits(r.learner.rgm->params, ref.rgm->params));
}

TEST_CASE("training is bitwise reproducible for every algorithm and variant") {
  const MazeEnv env(default_maze());
  for (auto variant : {RgmVariant::Standard, RgmVariant::WithTargetNetwork, RgmVariant::NoAttention}) {
    TrainConfig cfg = small_train(Algorithm::Rgm, 4);
    cfg.rgm.variant = variant;
    cfg.rgm.target_sync_period = 3;
    const TrainResult a = meta_train(cfg, env);
    const TrainResult b = meta_train(cfg, env);
    CHECK(same_rows(a.metrics, b.metrics));
    CHECK(same_bits(a.learner.rgm->params, b.learner.rgm->params));
    CHECK(a.learner.target.has_value() == (variant == RgmVariant::WithTargetNetwork));
  }
  const TrainConfig vanilla = small_train(Algorithm::Vanilla, 20);
  const TrainResult a = meta_train(vanilla, env);
  const TrainResult b = meta_train(vanilla, env);
  CHECK(same_rows(a.metrics, b.metrics));
  CHECK_FALSE(a.learner.rgm.has_value());
  for (const auto& row : a.metrics) CHECK(row.meta_grad_norm == 0.0);
}

TEST_CASE("metrics rows count episodes and steps") {
  const MazeEnv env(default_maze());
  const TrainResult r = meta_train(small_train(Algorithm::Rgm, 3), env);
  REQUIRE(r.metrics.size() == 3);
  std::int64_t prev = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(r.metrics[i].episode == static_cast<std::int64_t>(i + 1));
    CHECK(r.metrics[i].env_steps > prev);
    prev = r.metrics[i].env_steps;
    CHECK(r.metrics[i].beta_entropy > 0.0);
  }
}

TEST_CASE("non-finite parameters abort training and save the last finite state") {
  const MazeEnv env(default_maze());
  TrainConfig cfg = small_train(Algorithm::Rgm, 5);
  cfg.meta.meta_lr = std::numeric_limits<double>::max();
  const auto path = std::filesystem::temp_directory_path() / "rgm_abort_test.ckpt";
  std::filesystem::remove(path);
  TrainHooks hooks;
  hooks.abort_checkpoint = path;
  try {
    (void)meta_train(cfg, env, hooks);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(e.episode() == 1);
  }
  REQUIRE(std::filesystem::exists(path));
  Learner restored = make_learner(cfg, env);
  load_learner(path, restored);
  CHECK(restored.policy.params.all_finite());
  CHECK(restored.rgm->params.all_finite());
  std::filesystem::remove(path);
}

TEST_CASE("invalid training configurations are rejected") {
  const MazeEnv env(default_maze());
  TrainConfig cfg = small_train(Algorithm::Rgm, 1);
  cfg.meta.window = 0;
  CHECK_THROWS_AS(meta_train(cfg, env), std::invalid_argument);
  cfg = small_train(Algorithm::Rgm, -1);
  CHECK_THROWS_AS(meta_train(cfg, env), std::invalid_argument);
  cfg = small_train(Algorithm::Rgm, 1);
  cfg.meta.meta_lr = -1.0;
  CHECK_THROWS_AS(meta_train(cfg, env), std::invalid_argument);
}

TEST_CASE("learner checkpoints round-trip including the target copy") {
  const MazeEnv env(default_maze());
  TrainConfig cfg = small_train(Algorithm::Rgm, 2);
  cfg.rgm.variant = RgmVariant::WithTargetNetwork;
  const TrainResult r = meta_train(cfg, env);
  const auto path = std::filesystem::temp_directory_path() / "rgm_learner_test.ckpt";
  save_learner(path, r.learner);
  Learner back = make_learner(cfg, env);
  load_learner(path, back);
  CHECK(same_bits(back.policy.params, r.learner.policy.params));
  CHECK(same_bits(back.value.params, r.learner.value.params));
  CHECK(same_bits(back.rgm->params, r.learner.rgm->params));
  CHECK(same_bits(back.target->params, r.learner.target->params));
  std::filesystem::remove(path);
}
