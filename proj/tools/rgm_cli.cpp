// Command-line front end: train, sweep, value-grid, beta-dump, eval.
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration error,
// 3 training aborted on a non-finite value, 4 value-grid assertion failed.

#include <rgm/checkpoint.hpp>
#include <rgm/harness.hpp>

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace fs = std::filesystem;
using namespace rgm;

namespace {

constexpr int kRuntimeFailure = 1;
constexpr int kConfigFailure = 2;
constexpr int kAborted = 3;
constexpr int kAssertionFailed = 4;

struct Common {
  std::string config;
  std::string out;
  std::string variant;
  std::vector<std::uint64_t> seeds;
  int episodes = -1;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config (JSON)")->required();
  cmd->add_option("--out", c.out, "Output directory (overrides output_dir)");
  cmd->add_option("--variant", c.variant, "vanilla | rgm | rgm-target | rgm-noattn")
      ->check(CLI::IsMember({"vanilla", "rgm", "rgm-target", "rgm-noattn"}));
  cmd->add_option("--seed", c.seeds, "Seed(s) replacing the config's list");
  cmd->add_option("--episodes", c.episodes, "Episode count replacing the config's");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = load_experiment_config(c.config, environment_overrides());
  if (!c.out.empty()) cfg.output_dir = c.out;
  if (!c.variant.empty()) apply_variant(cfg.train, c.variant);
  if (!c.seeds.empty()) cfg.seeds = c.seeds;
  if (c.episodes >= 0) cfg.train.episodes = c.episodes;
  cfg.train.seed = cfg.seeds.front();
  return cfg;
}

Learner load_checkpointed_learner(const ExperimentConfig& cfg, const Environment& env, const std::string& checkpoint) {
  Learner learner = make_learner(cfg.train, env);
  load_learner(checkpoint, learner);
  return learner;
}

int cmd_train(const Common& c) {
  const ExperimentConfig cfg = resolve(c);
  bool aborted = false;
  for (std::uint64_t seed : cfg.seeds) {
    const fs::path dir = cfg.output_dir / ("seed_" + std::to_string(seed));
    std::cout << "train " << to_string(cfg.train.algorithm) << " (" << to_string(cfg.train.rgm.variant) << ") seed "
              << seed << " -> " << dir.string() << '\n';
    const RunSummary run = run_experiment(cfg, seed, dir, &std::cout);
    if (run.aborted) {
      std::cerr << "training aborted: " << run.message << "\n  last finite parameters in "
                << (dir / "abort.ckpt").string() << '\n';
      aborted = true;
      continue;
    }
    std::cout << "seed " << seed << " final moving average return " << run.final_moving_avg << '\n';
  }
  return aborted ? kAborted : 0;
}

int cmd_sweep(const Common& c, const std::vector<double>& lrs, const std::vector<int>& windows) {
  const ExperimentConfig cfg = resolve(c);
  SweepGrid grid;
  if (!lrs.empty()) grid.meta_lrs = lrs;
  if (!windows.empty()) grid.windows = windows;
  const SweepResult r = run_sweep(cfg, grid, &std::cout);
  std::cout << "best cell: meta_lr " << r.best_meta_lr << ", window " << r.best_window << "\nsummary in "
            << (cfg.output_dir / "summary.csv").string() << '\n';
  return 0;
}

int cmd_value_grid(const Common& c, const std::string& checkpoint, bool assert_shape) {
  const ExperimentConfig cfg = resolve(c);
  const MazeEnv env(spec_layout(cfg.env));
  const Learner learner = load_checkpointed_learner(cfg, env, checkpoint);
  const auto cells = value_grid(learner.value, env);
  fs::create_directories(cfg.output_dir);
  write_value_grid_csv(cfg.output_dir / "value_grid.csv", cells);
  std::ofstream(cfg.output_dir / "value_grid.svg") << render_value_grid_svg(cells, env.layout());
  std::cout << "wrote " << (cfg.output_dir / "value_grid.csv").string() << " and value_grid.svg\n";
  if (!assert_shape) return 0;
  const ValueGridCheck check = check_value_grid(cells, env.layout());
  std::cout << (check.passed ? "value-grid assertion passed: " : "value-grid assertion FAILED: ") << check.message
            << '\n';
  return check.passed ? 0 : kAssertionFailed;
}

int cmd_beta_dump(const Common& c, const std::string& checkpoint, int episodes) {
  const ExperimentConfig cfg = resolve(c);
  const auto env = make_environment(cfg.env);
  const Learner learner = load_checkpointed_learner(cfg, *env, checkpoint);
  const auto rows = beta_dump(learner, *env, episodes, cfg.train.meta.window, cfg.train.meta.gamma, cfg.seeds.front());
  fs::create_directories(cfg.output_dir);
  write_beta_csv(cfg.output_dir / "beta.csv", rows);
  for (int ep = 0; ep < episodes; ++ep) {
    const bool reached = std::any_of(rows.begin(), rows.end(),
                                     [&](const BetaRow& r) { return r.episode == ep && r.reached_exit; });
    if (!reached) std::cout << "episode " << ep << " did not reach the exit (rows flagged)\n";
  }
  std::cout << "greedy episode: normalized beta on the exit step " << exit_step_beta(rows, 0) << '\n'
            << "wrote " << (cfg.output_dir / "beta.csv").string() << '\n';
  return 0;
}

int cmd_eval(const Common& c, const std::string& checkpoint, int episodes) {
  const ExperimentConfig cfg = resolve(c);
  const auto env = make_environment(cfg.env);
  const Learner learner = load_checkpointed_learner(cfg, *env, checkpoint);
  const Trajectory greedy = greedy_rollout(learner.policy, *env);
  std::cout << "greedy: return " << greedy.total_reward() << ", steps " << greedy.size() << ", reached goal "
            << (greedy.terminal ? "yes" : "no") << '\n';
  double total = 0.0;
  int successes = 0;
  for (int i = 0; i < episodes; ++i) {
    const Trajectory tau = rollout(*env, learner.policy.sampler(),
                                   derive_seed(cfg.seeds.front(), Stream::Evaluation, static_cast<std::uint64_t>(i)));
    total += tau.total_reward();
    successes += tau.terminal ? 1 : 0;
  }
  if (episodes > 0) {
    std::cout << "sampled over " << episodes << " episodes: mean return " << total / episodes << ", success rate "
              << static_cast<double>(successes) / episodes << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Return generating model experiments"};
  app.require_subcommand(1);

  Common train_opts;
  auto* train = app.add_subcommand("train", "Train one run per seed and write metrics, snapshot and checkpoint");
  add_common(train, train_opts);

  Common sweep_opts;
  std::vector<double> sweep_lrs;
  std::vector<int> sweep_windows;
  auto* sweep = app.add_subcommand("sweep", "Grid over meta learning rate and window length");
  add_common(sweep, sweep_opts);
  sweep->add_option("--meta-lrs", sweep_lrs, "Meta learning rates (default 1e-4 1e-5 1e-6 1e-7)");
  sweep->add_option("--windows", sweep_windows, "Window lengths (default 50 100 200)");

  Common grid_opts;
  std::string grid_ckpt;
  bool grid_assert = false;
  auto* grid = app.add_subcommand("value-grid", "Dump V(x, y) over the maze as CSV and SVG");
  add_common(grid, grid_opts);
  grid->add_option("--checkpoint", grid_ckpt, "Checkpoint written by train")->required();
  grid->add_flag("--assert", grid_assert, "Fail unless start-room path cells outrank the room's other cells");

  Common beta_opts;
  std::string beta_ckpt;
  int beta_episodes = 1;
  auto* beta = app.add_subcommand("beta-dump", "Normalized beta and gamma^t along policy trajectories");
  add_common(beta, beta_opts);
  beta->add_option("--checkpoint", beta_ckpt, "Checkpoint written by train")->required();
  beta->add_option("--rollouts", beta_episodes, "Trajectories to dump; the first is greedy");

  Common eval_opts;
  std::string eval_ckpt;
  int eval_episodes = 100;
  auto* eval = app.add_subcommand("eval", "Greedy and sampled returns of a checkpoint");
  add_common(eval, eval_opts);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint written by train")->required();
  eval->add_option("--rollouts", eval_episodes, "Sampled episodes");

  CLI11_PARSE(app, argc, argv);

  try {
    if (train->parsed()) return cmd_train(train_opts);
    if (sweep->parsed()) return cmd_sweep(sweep_opts, sweep_lrs, sweep_windows);
    if (grid->parsed()) return cmd_value_grid(grid_opts, grid_ckpt, grid_assert);
    if (beta->parsed()) return cmd_beta_dump(beta_opts, beta_ckpt, beta_episodes);
    if (eval->parsed()) return cmd_eval(eval_opts, eval_ckpt, eval_episodes);
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const LayoutError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return kConfigFailure;
  } catch (const TrainingAborted& e) {
    std::cerr << "training aborted: " << e.what() << '\n';
    return kAborted;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeFailure;
  }
  return kRuntimeFailure;
}
