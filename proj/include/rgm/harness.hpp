#pragma once

#include <rgm/meta.hpp>

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace rgm {

/// Bad or inconsistent experiment configuration, including missing files.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EnvKind { Maze, Chain };

struct EnvSpec {
  EnvKind kind = EnvKind::Maze;
  std::filesystem::path layout;  // empty selects the built-in maze
  int chain_length = 3;
  int chain_max_steps = 50;
};

/// Everything a run needs. `train.seed` is ignored in favor of `seeds`.
struct ExperimentConfig {
  EnvSpec env;
  TrainConfig train;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path output_dir = "runs/default";
};

/// Maps a flat override name such as META__META_LR (already stripped of the
/// RGM_ prefix) to a JSON path meta/meta_lr and assigns the value, parsed as
/// JSON when possible and as a string otherwise.
void apply_override(nlohmann::json& config, const std::string& name, const std::string& value);

/// Collects RGM_* variables from the process environment.
std::map<std::string, std::string> environment_overrides();

/// Unknown keys, wrong types, out-of-range values and missing files all
/// raise ConfigError. Missing keys keep their defaults.
ExperimentConfig parse_experiment_config(const nlohmann::json& config);
ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::map<std::string, std::string>& overrides = {});
nlohmann::json to_json(const ExperimentConfig& config);

std::unique_ptr<Environment> make_environment(const EnvSpec& spec);
/// Layout used by a maze spec (the built-in one when no path is given).
MazeLayout spec_layout(const EnvSpec& spec);

/// CLI variant names: vanilla, rgm, rgm-target, rgm-noattn.
void apply_variant(TrainConfig& config, const std::string& variant);

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

inline constexpr const char* kMetricsHeader =
    "episode,env_steps,episode_return,moving_avg_1000,beta_entropy,meta_grad_norm,surrogate_J";

/// One CSV line without the newline; doubles print with 17 significant
/// digits so the file round-trips bit for bit.
std::string format_metrics_row(const MetricsRow& row);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// First episode, counted from 1, whose full-window moving average reaches
/// the threshold; nullopt if none does.
std::optional<std::int64_t> episodes_to_threshold(const std::vector<MetricsRow>& metrics, double threshold,
                                                  std::int64_t min_episode = 1000);
/// Mean of the moving-average column over the run.
double area_under_curve(const std::vector<MetricsRow>& metrics);

struct RunSummary {
  std::uint64_t seed = 0;
  std::filesystem::path directory;
  std::vector<MetricsRow> metrics;
  bool aborted = false;
  std::string message;
  double final_moving_avg = 0.0;
};

/// Trains one seed and writes metrics.csv, config.json and final.ckpt (or
/// abort.ckpt) into `directory`. TrainingAborted is caught and reported.
RunSummary run_experiment(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& directory,
                          std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct SweepGrid {
  std::vector<double> meta_lrs{1e-4, 1e-5, 1e-6, 1e-7};
  std::vector<int> windows{50, 100, 200};
};

struct SweepRow {
  double meta_lr = 0.0;
  int window = 0;
  std::uint64_t seed = 0;
  double final_moving_avg = 0.0;
  std::optional<std::int64_t> episodes_to_0_8;
  std::string status;  // "ok" or the failure message
};

struct SweepResult {
  std::vector<SweepRow> rows;  // ranked by final moving average, best first; failed runs last
  double best_meta_lr = 0.0;
  int best_window = 0;
};

/// Runs every cell for every seed under output_dir/lr_<a>_T_<w>/seed_<s>,
/// writes summary.csv and returns the cell with the highest mean final
/// moving average.
SweepResult run_sweep(const ExperimentConfig& base, const SweepGrid& grid, std::ostream* progress = nullptr);

// ---------------------------------------------------------------------------
// Figure data
// ---------------------------------------------------------------------------

struct ValueCell {
  int x = 0;
  int y = 0;
  double value = 0.0;
  int room = 0;
  bool on_path = false;  // occupied by the shortest start-to-exit route
  bool portal = false;
};

/// V_phi at the features of every cell, row-major.
std::vector<ValueCell> value_grid(const ValueNet& value, const MazeEnv& env);
void write_value_grid_csv(const std::filesystem::path& path, const std::vector<ValueCell>& cells);
std::string render_value_grid_svg(const std::vector<ValueCell>& cells, const MazeLayout& layout);

struct ValueGridCheck {
  bool passed = false;
  std::string message;
};

/// In the start room, every shortest-path cell must have a larger value than
/// the mean over the room's other cells. Portal cells are never occupied and
/// are left out of both groups.
ValueGridCheck check_value_grid(const std::vector<ValueCell>& cells, const MazeLayout& layout);

struct BetaRow {
  int episode = 0;
  int t = 0;
  double beta = 0.0;
  double gamma_normalized = 0.0;
  bool reached_exit = false;
};

/// gamma^t / sum_l gamma^l for t < length.
std::vector<double> normalized_discounts(int length, double gamma);

/// Episode 0 follows the greedy policy; later episodes sample from the
/// policy with seeds derived from `seed`. Coefficients of windowed episodes
/// are concatenated and renormalized over the whole episode.
std::vector<BetaRow> beta_dump(const Learner& learner, const Environment& env, int episodes, int window, double gamma,
                               std::uint64_t seed);
void write_beta_csv(const std::filesystem::path& path, const std::vector<BetaRow>& rows);

/// Normalized beta on the exit step of an episode; 0 if the exit was not
/// reached.
double exit_step_beta(const std::vector<BetaRow>& rows, int episode);

}  // namespace rgm
