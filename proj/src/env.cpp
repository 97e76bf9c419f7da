#include <rgm/env.hpp>
#include <rgm/rng.hpp>

#include <array>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace rgm {
namespace {

constexpr std::array<int, 4> kDx{0, 0, -1, 1};
constexpr std::array<int, 4> kDy{-1, 1, 0, 0};
constexpr std::array<std::uint8_t, 4> kWallFor{wall::kNorth, wall::kSouth, wall::kWest, wall::kEast};

void check_action(int action, int count) {
  if (action < 0 || action >= count) {
    throw std::invalid_argument("action " + std::to_string(action) + " outside [0, " + std::to_string(count) + ")");
  }
}

[[noreturn]] void parse_fail(int line, const std::string& what) {
  throw LayoutError("maze layout line " + std::to_string(line) + ": " + what);
}

std::string cell_str(Cell c) { return "(" + std::to_string(c.x) + "," + std::to_string(c.y) + ")"; }

}  // namespace

bool MazeLayout::blocked(Cell c, int action) const {
  check_action(action, kMazeActions);
  return (wall_mask(c) & kWallFor[static_cast<std::size_t>(action)]) != 0;
}

std::optional<Cell> MazeLayout::portal_partner(Cell c) const {
  for (const auto& [a, b] : portals) {
    if (a == c) return b;
    if (b == c) return a;
  }
  return std::nullopt;
}

Cell MazeLayout::move(Cell c, int action) const {
  if (blocked(c, action)) return c;
  const auto a = static_cast<std::size_t>(action);
  const Cell next{c.x + kDx[a], c.y + kDy[a]};
  if (auto partner = portal_partner(next)) return *partner;
  return next;
}

MazeLayout parse_maze(std::string_view text) {
  MazeLayout layout;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  bool have_header = false;
  bool have_start = false;
  bool have_exit = false;
  std::vector<bool> seen;

  auto read_cell = [&](std::istringstream& ls, const char* what) {
    Cell c;
    if (!(ls >> c.x >> c.y)) parse_fail(line_no, std::string("expected coordinates for ") + what);
    if (!layout.contains(c)) parse_fail(line_no, std::string(what) + " " + cell_str(c) + " outside the grid");
    return c;
  };

  while (std::getline(in, raw)) {
    ++line_no;
    if (auto hash = raw.find('#'); hash != std::string::npos) raw.erase(hash);
    std::istringstream ls(raw);
    std::string head;
    if (!(ls >> head)) continue;

    if (!have_header) {
      if (head != "maze") parse_fail(line_no, "expected 'maze <width> <height>' header");
      if (!(ls >> layout.width >> layout.height) || layout.width < 1 || layout.height < 1) {
        parse_fail(line_no, "invalid grid size");
      }
      layout.walls.assign(static_cast<std::size_t>(layout.width * layout.height), 0);
      seen.assign(layout.walls.size(), false);
      have_header = true;
    } else if (head == "portal") {
      const Cell a = read_cell(ls, "portal");
      const Cell b = read_cell(ls, "portal");
      layout.portals.emplace_back(a, b);
    } else if (head == "start") {
      layout.start = read_cell(ls, "start");
      have_start = true;
    } else if (head == "exit") {
      layout.exit = read_cell(ls, "exit");
      have_exit = true;
    } else if (head == "step_reward") {
      if (!(ls >> layout.step_reward)) parse_fail(line_no, "expected a number");
    } else if (head == "exit_reward") {
      if (!(ls >> layout.exit_reward)) parse_fail(line_no, "expected a number");
    } else if (head == "max_steps") {
      if (!(ls >> layout.max_steps) || layout.max_steps < 1) parse_fail(line_no, "expected a positive integer");
    } else {
      Cell c;
      int mask = 0;
      std::istringstream cell_line(raw);
      if (!(cell_line >> c.x >> c.y >> mask)) parse_fail(line_no, "unrecognized line '" + head + "'");
      if (!layout.contains(c)) parse_fail(line_no, "cell " + cell_str(c) + " outside the grid");
      if (mask < 0 || mask > 15) parse_fail(line_no, "wall mask must be in [0, 15]");
      const auto idx = static_cast<std::size_t>(c.y * layout.width + c.x);
      if (seen[idx]) parse_fail(line_no, "cell " + cell_str(c) + " listed twice");
      seen[idx] = true;
      layout.walls[idx] = static_cast<std::uint8_t>(mask);
      ls.clear();
      continue;
    }
    std::string extra;
    if (ls >> extra) parse_fail(line_no, "unexpected trailing token '" + extra + "'");
  }

  if (!have_header) throw LayoutError("maze layout: missing 'maze' header");
  for (std::size_t i = 0; i < seen.size(); ++i) {
    if (!seen[i]) {
      throw LayoutError("maze layout: no wall line for cell " +
                        cell_str({static_cast<int>(i) % layout.width, static_cast<int>(i) / layout.width}));
    }
  }
  if (!have_start) throw LayoutError("maze layout: missing 'start'");
  if (!have_exit) throw LayoutError("maze layout: missing 'exit'");
  validate_maze(layout);
  return layout;
}

MazeLayout load_maze_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LayoutError("cannot open maze layout '" + path.string() + "'");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_maze(buffer.str());
}

void validate_maze(const MazeLayout& layout) {
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const Cell c{x, y};
      const auto m = layout.wall_mask(c);
      if (y == 0 && !(m & wall::kNorth)) throw LayoutError("border open: north of " + cell_str(c));
      if (y == layout.height - 1 && !(m & wall::kSouth)) throw LayoutError("border open: south of " + cell_str(c));
      if (x == 0 && !(m & wall::kWest)) throw LayoutError("border open: west of " + cell_str(c));
      if (x == layout.width - 1 && !(m & wall::kEast)) throw LayoutError("border open: east of " + cell_str(c));
      if (x + 1 < layout.width) {
        const bool here = m & wall::kEast;
        const bool there = layout.wall_mask({x + 1, y}) & wall::kWest;
        if (here != there) throw LayoutError("asymmetric wall between " + cell_str(c) + " and " + cell_str({x + 1, y}));
      }
      if (y + 1 < layout.height) {
        const bool here = m & wall::kSouth;
        const bool there = layout.wall_mask({x, y + 1}) & wall::kNorth;
        if (here != there) throw LayoutError("asymmetric wall between " + cell_str(c) + " and " + cell_str({x, y + 1}));
      }
    }
  }
  if (layout.start == layout.exit) throw LayoutError("start and exit coincide");
  std::set<Cell> used;
  for (const auto& [a, b] : layout.portals) {
    if (a == b) throw LayoutError("portal joins " + cell_str(a) + " to itself");
    for (Cell c : {a, b}) {
      if (c == layout.start || c == layout.exit) throw LayoutError("portal on start or exit cell " + cell_str(c));
      if (!used.insert(c).second) throw LayoutError("cell " + cell_str(c) + " belongs to two portal pairs");
    }
  }
  if (!shortest_path(layout)) throw LayoutError("exit " + cell_str(layout.exit) + " unreachable from start");
}

MazeLayout default_maze() { return parse_maze(default_maze_text()); }

std::optional<MazePath> shortest_path(const MazeLayout& layout) {
  const auto index = [&](Cell c) { return static_cast<std::size_t>(c.y * layout.width + c.x); };
  std::vector<int> parent(layout.walls.size(), -1);
  std::vector<int> via(layout.walls.size(), -1);
  std::vector<bool> visited(layout.walls.size(), false);
  std::deque<Cell> frontier{layout.start};
  visited[index(layout.start)] = true;
  while (!frontier.empty()) {
    const Cell c = frontier.front();
    frontier.pop_front();
    if (c == layout.exit) break;
    for (int a = 0; a < kMazeActions; ++a) {
      const Cell n = layout.move(c, a);
      if (visited[index(n)]) continue;
      visited[index(n)] = true;
      parent[index(n)] = static_cast<int>(index(c));
      via[index(n)] = a;
      frontier.push_back(n);
    }
  }
  if (!visited[index(layout.exit)]) return std::nullopt;

  MazePath path;
  for (int at = static_cast<int>(index(layout.exit)); at != -1; at = parent[static_cast<std::size_t>(at)]) {
    path.cells.push_back({at % layout.width, at / layout.width});
    if (via[static_cast<std::size_t>(at)] >= 0) path.actions.push_back(via[static_cast<std::size_t>(at)]);
  }
  std::reverse(path.cells.begin(), path.cells.end());
  std::reverse(path.actions.begin(), path.actions.end());
  for (std::size_t i = 0; i + 1 < path.cells.size(); ++i) {
    const Cell a = path.cells[i];
    const Cell b = path.cells[i + 1];
    if (std::abs(a.x - b.x) + std::abs(a.y - b.y) != 1) ++path.portal_jumps;
  }
  return path;
}

std::vector<int> room_labels(const MazeLayout& layout) {
  std::vector<int> label(layout.walls.size(), -1);
  int next = 0;
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      if (label[static_cast<std::size_t>(y * layout.width + x)] != -1) continue;
      std::deque<Cell> frontier{{x, y}};
      label[static_cast<std::size_t>(y * layout.width + x)] = next;
      while (!frontier.empty()) {
        const Cell c = frontier.front();
        frontier.pop_front();
        for (int a = 0; a < kMazeActions; ++a) {
          if (layout.blocked(c, a)) continue;
          const Cell n{c.x + kDx[static_cast<std::size_t>(a)], c.y + kDy[static_cast<std::size_t>(a)]};
          auto& l = label[static_cast<std::size_t>(n.y * layout.width + n.x)];
          if (l == -1) {
            l = next;
            frontier.push_back(n);
          }
        }
      }
      ++next;
    }
  }
  return label;
}

// ---------------------------------------------------------------------------

MazeEnv::MazeEnv(MazeLayout layout) : layout_(std::move(layout)) { validate_maze(layout_); }

bool MazeEnv::is_terminal(const EnvState& state) const {
  return state.cell == layout_.exit || state.steps_taken >= layout_.max_steps;
}

Transition MazeEnv::step(const EnvState& state, int action) const {
  check_action(action, kMazeActions);
  if (!layout_.contains(state.cell)) throw std::invalid_argument("maze step: state outside the grid");
  if (is_terminal(state)) throw EpisodeError("maze step: episode already finished");
  Transition t;
  t.state = state;
  t.action = action;
  t.next_state = {layout_.move(state.cell, action), state.steps_taken + 1};
  const bool at_exit = t.next_state.cell == layout_.exit;
  t.reward = at_exit ? layout_.exit_reward : layout_.step_reward;
  t.done = at_exit || t.next_state.steps_taken >= layout_.max_steps;
  return t;
}

void MazeEnv::features(const EnvState& state, std::span<double> out) const {
  out[0] = layout_.width > 1 ? static_cast<double>(state.cell.x) / (layout_.width - 1) : 0.0;
  out[1] = layout_.height > 1 ? static_cast<double>(state.cell.y) / (layout_.height - 1) : 0.0;
}

ChainEnv::ChainEnv(int length, int max_steps) : length_(length), max_steps_(max_steps) {
  if (length < 1) throw std::invalid_argument("chain length must be >= 1");
  if (max_steps < 1) throw std::invalid_argument("chain max_steps must be >= 1");
}

bool ChainEnv::is_terminal(const EnvState& state) const {
  return state.cell.x >= length_ || state.steps_taken >= max_steps_;
}

Transition ChainEnv::step(const EnvState& state, int action) const {
  check_action(action, 2);
  if (is_terminal(state)) throw EpisodeError("chain step: episode already finished");
  Transition t;
  t.state = state;
  t.action = action;
  const int x = action == kChainRight ? state.cell.x + 1 : std::max(0, state.cell.x - 1);
  t.next_state = {{x, 0}, state.steps_taken + 1};
  const bool goal = x >= length_;
  t.reward = goal ? 1.0 : 0.0;
  t.done = goal || t.next_state.steps_taken >= max_steps_;
  return t;
}

void ChainEnv::features(const EnvState& state, std::span<double> out) const {
  out[0] = static_cast<double>(state.cell.x) / length_;
  out[1] = 0.0;
}

// ---------------------------------------------------------------------------

std::vector<double> Trajectory::rewards() const {
  std::vector<double> r;
  r.reserve(steps.size());
  for (const auto& s : steps) r.push_back(s.reward);
  return r;
}

std::vector<int> Trajectory::actions() const {
  std::vector<int> a;
  a.reserve(steps.size());
  for (const auto& s : steps) a.push_back(s.action);
  return a;
}

double Trajectory::total_reward() const {
  double total = 0.0;
  for (const auto& s : steps) total += s.reward;
  return total;
}

Trajectory Trajectory::window(Index begin, Index length) const {
  if (begin < 0 || length < 1 || begin + length > size()) {
    throw std::out_of_range("trajectory window [" + std::to_string(begin) + ", " + std::to_string(begin + length) +
                            ") outside length " + std::to_string(size()));
  }
  Trajectory w;
  const auto b = static_cast<std::size_t>(begin);
  const auto e = static_cast<std::size_t>(begin + length);
  w.steps.assign(steps.begin() + static_cast<std::ptrdiff_t>(b), steps.begin() + static_cast<std::ptrdiff_t>(e));
  w.log_probs.assign(log_probs.begin() + static_cast<std::ptrdiff_t>(b),
                     log_probs.begin() + static_cast<std::ptrdiff_t>(e));
  w.features = features.middleRows(begin, length);
  w.terminal = terminal && e == steps.size();
  return w;
}

bool Trajectory::chained() const {
  for (std::size_t i = 0; i + 1 < steps.size(); ++i) {
    if (!(steps[i].next_state == steps[i + 1].state)) return false;
  }
  return true;
}

Trajectory rollout(const Environment& env, const PolicyFn& policy, std::uint64_t seed, std::optional<EnvState> start) {
  Rng rng(seed);
  EnvState state = start.value_or(env.reset());
  if (env.is_terminal(state)) throw EpisodeError("rollout: start state is terminal");
  const Index dim = env.feature_dim();
  std::vector<double> feat(static_cast<std::size_t>(dim));
  std::vector<std::vector<double>> rows;
  Trajectory traj;
  while (true) {
    env.features(state, feat);
    const std::vector<double> probs = policy(feat);
    if (static_cast<int>(probs.size()) != env.num_actions()) {
      throw PolicyError("policy returned " + std::to_string(probs.size()) + " probabilities for " +
                        std::to_string(env.num_actions()) + " actions");
    }
    double total = 0.0;
    for (double p : probs) {
      if (!std::isfinite(p) || p < 0.0) throw PolicyError("policy returned a negative or non-finite probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-6) throw PolicyError("policy probabilities sum to " + std::to_string(total));
    const auto action = static_cast<int>(rng.categorical(probs));
    Transition t = env.step(state, action);
    rows.push_back(feat);
    traj.log_probs.push_back(std::log(probs[static_cast<std::size_t>(action)]));
    traj.steps.push_back(t);
    state = t.next_state;
    if (t.done) break;
  }
  traj.terminal = env.is_terminal(EnvState{state.cell, 0});
  traj.features.resize(static_cast<Index>(rows.size()), dim);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (Index j = 0; j < dim; ++j) traj.features(static_cast<Index>(i), j) = rows[i][static_cast<std::size_t>(j)];
  }
  return traj;
}

}  // namespace rgm
