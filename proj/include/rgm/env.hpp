#pragma once

#include <rgm/tensor.hpp>

#include <compare>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace rgm {

struct Cell {
  int x = 0;
  int y = 0;
  auto operator<=>(const Cell&) const = default;
};

struct EnvState {
  Cell cell;
  int steps_taken = 0;
  bool operator==(const EnvState&) const = default;
};

struct Transition {
  EnvState state;
  int action = 0;
  double reward = 0.0;
  EnvState next_state;
  bool done = false;
};

class EpisodeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Deterministic episodic environment with a discrete action set. States are
/// presented to networks as fixed-width feature rows.
class Environment {
 public:
  virtual ~Environment() = default;

  [[nodiscard]] virtual EnvState reset() const = 0;
  [[nodiscard]] virtual Transition step(const EnvState& state, int action) const = 0;
  [[nodiscard]] virtual int num_actions() const = 0;
  [[nodiscard]] virtual int max_steps() const = 0;
  [[nodiscard]] virtual Index feature_dim() const { return 2; }
  virtual void features(const EnvState& state, std::span<double> out) const = 0;
  [[nodiscard]] virtual bool is_terminal(const EnvState& state) const = 0;
};

// ---------------------------------------------------------------------------
// Portal maze
// ---------------------------------------------------------------------------

namespace wall {
inline constexpr std::uint8_t kNorth = 1;
inline constexpr std::uint8_t kEast = 2;
inline constexpr std::uint8_t kSouth = 4;
inline constexpr std::uint8_t kWest = 8;
}  // namespace wall

enum MazeAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3 };
inline constexpr int kMazeActions = 4;

class LayoutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MazeLayout {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> walls;  // row-major, index y * width + x
  std::vector<std::pair<Cell, Cell>> portals;
  Cell start;
  Cell exit;
  double step_reward = -0.01;
  double exit_reward = 1.0;
  int max_steps = 200;

  [[nodiscard]] bool contains(Cell c) const { return c.x >= 0 && c.y >= 0 && c.x < width && c.y < height; }
  [[nodiscard]] std::uint8_t wall_mask(Cell c) const { return walls[static_cast<std::size_t>(c.y * width + c.x)]; }
  [[nodiscard]] bool blocked(Cell c, int action) const;
  [[nodiscard]] std::optional<Cell> portal_partner(Cell c) const;
  [[nodiscard]] bool is_portal(Cell c) const { return portal_partner(c).has_value(); }

  /// Cell reached from c by `action`: unchanged when a wall blocks, otherwise
  /// one step, then relocated to the partner if it lands on a portal.
  [[nodiscard]] Cell move(Cell c, int action) const;
};

/// Parses the text layout format:
///   maze <width> <height>
///   <x> <y> <wallmask>        (one line per cell)
///   portal <x1> <y1> <x2> <y2>
///   start <x> <y>
///   exit <x> <y>
///   step_reward <value> | exit_reward <value> | max_steps <n>   (optional)
/// Blank lines and '#' comments are ignored. The result is validated.
MazeLayout parse_maze(std::string_view text);
MazeLayout load_maze_file(const std::filesystem::path& path);

/// Throws LayoutError on asymmetric or missing border walls, bad portals or
/// an unreachable exit.
void validate_maze(const MazeLayout& layout);

std::string_view default_maze_text();
MazeLayout default_maze();

struct MazePath {
  std::vector<Cell> cells;  // occupied cells, start first, exit last
  std::vector<int> actions;
  int portal_jumps = 0;
};

/// Breadth-first shortest path from start to exit (ties broken by action order).
std::optional<MazePath> shortest_path(const MazeLayout& layout);

/// Index of the room (connected component under plain moves, portals ignored)
/// for every cell, row-major.
std::vector<int> room_labels(const MazeLayout& layout);

class MazeEnv final : public Environment {
 public:
  explicit MazeEnv(MazeLayout layout);

  [[nodiscard]] EnvState reset() const override { return {layout_.start, 0}; }
  [[nodiscard]] Transition step(const EnvState& state, int action) const override;
  [[nodiscard]] int num_actions() const override { return kMazeActions; }
  [[nodiscard]] int max_steps() const override { return layout_.max_steps; }
  void features(const EnvState& state, std::span<double> out) const override;
  [[nodiscard]] bool is_terminal(const EnvState& state) const override;

  [[nodiscard]] const MazeLayout& layout() const { return layout_; }

 private:
  MazeLayout layout_;
};

// ---------------------------------------------------------------------------
// Chain: positions 0..n-1, moving right from n-1 reaches the goal (+1, done).
// ---------------------------------------------------------------------------

enum ChainAction : int { kChainLeft = 0, kChainRight = 1 };

class ChainEnv final : public Environment {
 public:
  explicit ChainEnv(int length, int max_steps = 50);

  [[nodiscard]] EnvState reset() const override { return {{0, 0}, 0}; }
  [[nodiscard]] Transition step(const EnvState& state, int action) const override;
  [[nodiscard]] int num_actions() const override { return 2; }
  [[nodiscard]] int max_steps() const override { return max_steps_; }
  void features(const EnvState& state, std::span<double> out) const override;
  [[nodiscard]] bool is_terminal(const EnvState& state) const override;

  [[nodiscard]] int length() const { return length_; }

 private:
  int length_;
  int max_steps_;
};

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct Trajectory {
  std::vector<Transition> steps;
  std::vector<double> log_probs;  // behavior log pi(a_t | s_t)
  Tensord features;               // [T x feature_dim], features of s_t
  bool terminal = false;          // ended at a goal rather than the step cap

  [[nodiscard]] Index size() const { return static_cast<Index>(steps.size()); }
  [[nodiscard]] bool empty() const { return steps.empty(); }
  [[nodiscard]] std::vector<double> rewards() const;
  [[nodiscard]] std::vector<int> actions() const;
  [[nodiscard]] double total_reward() const;

  /// Steps [begin, begin + length) as a standalone trajectory.
  [[nodiscard]] Trajectory window(Index begin, Index length) const;

  /// next_state of each step equals the state of the following one.
  [[nodiscard]] bool chained() const;
};

/// Maps a feature row to a probability vector over actions.
using PolicyFn = std::function<std::vector<double>(std::span<const double>)>;

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Samples one episode. Deterministic for a given seed.
Trajectory rollout(const Environment& env, const PolicyFn& policy, std::uint64_t seed,
                   std::optional<EnvState> start = std::nullopt);

}  // namespace rgm
