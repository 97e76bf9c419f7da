#include <rgm/checkpoint.hpp>
#include <rgm/harness.hpp>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

extern char** environ;

namespace rgm {
namespace {

using nlohmann::json;

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
    if (!node_.is_object()) fail("expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      throw ConfigError("config: '" + where(key) + "' has the wrong type");
    }
  }

  [[nodiscard]] std::optional<Section> child(const char* key) {
    seen_.insert(key);
    const auto it = node_.find(key);
    if (it == node_.end()) return std::nullopt;
    return Section(*it, where(key));
  }

  void finish() const {
    for (const auto& [key, _] : node_.items()) {
      if (!seen_.count(key)) throw ConfigError("config: unknown key '" + where(key.c_str()) + "'");
    }
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config: " + (path_.empty() ? std::string("top level") : "'" + path_ + "'") + ": " + what);
  }

  [[nodiscard]] std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& node_;
  std::string path_;
  std::set<std::string> seen_;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

void read_optimizer(Section& s, OptimizerConfig& opt) {
  std::string kind = to_string(opt.kind);
  s.read("optimizer", kind);
  try {
    opt.kind = parse_optimizer_kind(kind);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  s.read("learning_rate", opt.learning_rate);
  require(opt.learning_rate > 0.0, "'" + s.where("learning_rate") + "' must be positive");
}

json optimizer_json(const OptimizerConfig& opt) {
  return {{"optimizer", to_string(opt.kind)}, {"learning_rate", opt.learning_rate}};
}

std::string env_kind_name(EnvKind k) { return k == EnvKind::Maze ? "maze" : "chain"; }

std::string format_double(double x) {
  std::ostringstream os;
  os << std::setprecision(17) << x;
  return os.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::string cell_dir_name(double meta_lr, int window) {
  std::ostringstream os;
  os << "lr_" << meta_lr << "_T_" << window;
  return os.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void apply_override(json& config, const std::string& name, const std::string& value) {
  json* node = &config;
  std::string rest = lowercase(name);
  while (true) {
    const auto split = rest.find("__");
    const std::string key = rest.substr(0, split);
    if (key.empty()) throw ConfigError("config override '" + name + "': empty key");
    if (split == std::string::npos) {
      json parsed = json::parse(value, nullptr, /*allow_exceptions=*/false);
      (*node)[key] = parsed.is_discarded() ? json(value) : parsed;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object()) throw ConfigError("config override '" + name + "': '" + key + "' is not a section");
    rest = rest.substr(split + 2);
  }
}

std::map<std::string, std::string> environment_overrides() {
  std::map<std::string, std::string> out;
  for (char** e = environ; e && *e; ++e) {
    const std::string entry(*e);
    if (entry.rfind("RGM_", 0) != 0) continue;
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    out[entry.substr(4, eq - 4)] = entry.substr(eq + 1);
  }
  return out;
}

ExperimentConfig parse_experiment_config(const json& config) {
  ExperimentConfig c;
  TrainConfig& t = c.train;
  Section top(config, "");

  if (auto env = top.child("env")) {
    std::string kind = env_kind_name(c.env.kind);
    env->read("type", kind);
    if (kind == "maze") {
      c.env.kind = EnvKind::Maze;
    } else if (kind == "chain") {
      c.env.kind = EnvKind::Chain;
    } else {
      env->fail("type must be maze or chain, got '" + kind + "'");
    }
    std::string layout;
    env->read("layout", layout);
    c.env.layout = layout;
    env->read("chain_length", c.env.chain_length);
    env->read("chain_max_steps", c.env.chain_max_steps);
    env->finish();
    require(c.env.chain_length >= 1, "'env.chain_length' must be >= 1");
    require(c.env.chain_max_steps >= 1, "'env.chain_max_steps' must be >= 1");
    if (!c.env.layout.empty() && !std::filesystem::exists(c.env.layout)) {
      throw ConfigError("config: maze layout file '" + c.env.layout.string() + "' does not exist");
    }
  }

  std::string algorithm = to_string(t.algorithm);
  top.read("algorithm", algorithm);
  try {
    t.algorithm = parse_algorithm(algorithm);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::string variant = to_string(t.rgm.variant);
  top.read("variant", variant);
  try {
    t.rgm.variant = parse_rgm_variant(variant);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }

  top.read("seeds", c.seeds);
  require(!c.seeds.empty(), "'seeds' must not be empty");
  top.read("episodes", t.episodes);
  require(t.episodes >= 0, "'episodes' must be >= 0");
  top.read("gamma", t.meta.gamma);
  require(t.meta.gamma >= 0.0 && t.meta.gamma <= 1.0, "'gamma' must lie in [0, 1]");
  std::string out = c.output_dir.string();
  top.read("output_dir", out);
  c.output_dir = out;

  if (auto p = top.child("policy")) {
    p->read("hidden", t.policy_hidden);
    read_optimizer(*p, t.policy_optimizer);
    p->finish();
  }
  if (auto v = top.child("value")) {
    v->read("hidden", t.value_hidden);
    read_optimizer(*v, t.value_optimizer);
    v->finish();
  }
  for (Index h : t.policy_hidden) require(h >= 1, "'policy.hidden' widths must be >= 1");
  for (Index h : t.value_hidden) require(h >= 1, "'value.hidden' widths must be >= 1");

  if (auto a = top.child("a2c")) {
    a->read("entropy_coef", t.a2c.entropy_coef);
    a->read("value_coef", t.a2c.value_coef);
    a->read("max_grad_norm", t.a2c.max_grad_norm);
    a->read("normalize_advantages", t.a2c.normalize_advantages);
    a->finish();
    require(t.a2c.entropy_coef >= 0.0, "'a2c.entropy_coef' must be >= 0");
    require(t.a2c.value_coef >= 0.0, "'a2c.value_coef' must be >= 0");
    require(t.a2c.max_grad_norm >= 0.0, "'a2c.max_grad_norm' must be >= 0");
  }

  if (auto m = top.child("meta")) {
    m->read("inner_lr", t.meta.inner_lr);
    m->read("meta_lr", t.meta.meta_lr);
    m->read("window", t.meta.window);
    m->read("clip_norm", t.meta.clip_norm);
    std::string opt = to_string(t.meta.optimizer);
    m->read("optimizer", opt);
    try {
      t.meta.optimizer = parse_optimizer_kind(opt);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("config: ") + e.what());
    }
    m->finish();
    require(t.meta.inner_lr > 0.0, "'meta.inner_lr' must be positive");
    require(t.meta.meta_lr >= 0.0, "'meta.meta_lr' must be >= 0");
    require(t.meta.window >= 1, "'meta.window' must be >= 1");
    require(t.meta.clip_norm >= 0.0, "'meta.clip_norm' must be >= 0");
  }

  if (auto r = top.child("rgm")) {
    r->read("d_model", t.rgm.d_model);
    r->read("heads", t.rgm.heads);
    r->read("layers", t.rgm.layers);
    r->read("ff_dim", t.rgm.ff_dim);
    r->read("layer_norm", t.rgm.layer_norm);
    r->read("target_sync_period", t.rgm.target_sync_period);
    r->finish();
    require(t.rgm.d_model >= 2 && t.rgm.d_model % 2 == 0, "'rgm.d_model' must be even and >= 2");
    require(t.rgm.heads >= 1 && t.rgm.d_model % t.rgm.heads == 0, "'rgm.heads' must divide 'rgm.d_model'");
    require(t.rgm.layers >= 0, "'rgm.layers' must be >= 0");
    require(t.rgm.ff_dim >= 1, "'rgm.ff_dim' must be >= 1");
    require(t.rgm.target_sync_period >= 1, "'rgm.target_sync_period' must be >= 1");
  }
  top.finish();
  t.seed = c.seeds.front();
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path,
                                        const std::map<std::string, std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file '" + path.string() + "' cannot be opened");
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.what());
  }
  for (const auto& [name, value] : overrides) apply_override(doc, name, value);
  // relative layout paths resolve against the config file's directory
  if (doc.contains("env") && doc["env"].is_object() && doc["env"].contains("layout") &&
      doc["env"]["layout"].is_string()) {
    const std::filesystem::path layout = doc["env"]["layout"].get<std::string>();
    if (!layout.empty() && layout.is_relative() && !std::filesystem::exists(layout)) {
      doc["env"]["layout"] = (path.parent_path() / layout).string();
    }
  }
  return parse_experiment_config(doc);
}

json to_json(const ExperimentConfig& c) {
  const TrainConfig& t = c.train;
  return {
      {"env",
       {{"type", env_kind_name(c.env.kind)},
        {"layout", c.env.layout.string()},
        {"chain_length", c.env.chain_length},
        {"chain_max_steps", c.env.chain_max_steps}}},
      {"algorithm", to_string(t.algorithm)},
      {"variant", to_string(t.rgm.variant)},
      {"seeds", c.seeds},
      {"episodes", t.episodes},
      {"gamma", t.meta.gamma},
      {"output_dir", c.output_dir.string()},
      {"policy", {{"hidden", t.policy_hidden}, {"optimizer", to_string(t.policy_optimizer.kind)},
                  {"learning_rate", t.policy_optimizer.learning_rate}}},
      {"value", {{"hidden", t.value_hidden}, {"optimizer", to_string(t.value_optimizer.kind)},
                 {"learning_rate", t.value_optimizer.learning_rate}}},
      {"a2c",
       {{"entropy_coef", t.a2c.entropy_coef},
        {"value_coef", t.a2c.value_coef},
        {"max_grad_norm", t.a2c.max_grad_norm},
        {"normalize_advantages", t.a2c.normalize_advantages}}},
      {"meta",
       {{"inner_lr", t.meta.inner_lr},
        {"meta_lr", t.meta.meta_lr},
        {"window", t.meta.window},
        {"clip_norm", t.meta.clip_norm},
        {"optimizer", to_string(t.meta.optimizer)}}},
      {"rgm",
       {{"d_model", t.rgm.d_model},
        {"heads", t.rgm.heads},
        {"layers", t.rgm.layers},
        {"ff_dim", t.rgm.ff_dim},
        {"layer_norm", t.rgm.layer_norm},
        {"target_sync_period", t.rgm.target_sync_period}}},
  };
}

MazeLayout spec_layout(const EnvSpec& spec) {
  if (spec.kind != EnvKind::Maze) throw ConfigError("config: environment is not a maze");
  if (spec.layout.empty()) return default_maze();
  try {
    return load_maze_file(spec.layout);
  } catch (const LayoutError& e) {
    throw ConfigError(e.what());
  }
}

std::unique_ptr<Environment> make_environment(const EnvSpec& spec) {
  if (spec.kind == EnvKind::Chain) return std::make_unique<ChainEnv>(spec.chain_length, spec.chain_max_steps);
  return std::make_unique<MazeEnv>(spec_layout(spec));
}

void apply_variant(TrainConfig& config, const std::string& variant) {
  if (variant == "vanilla") {
    config.algorithm = Algorithm::Vanilla;
    return;
  }
  config.algorithm = Algorithm::Rgm;
  if (variant == "rgm") {
    config.rgm.variant = RgmVariant::Standard;
  } else if (variant == "rgm-target") {
    config.rgm.variant = RgmVariant::WithTargetNetwork;
  } else if (variant == "rgm-noattn") {
    config.rgm.variant = RgmVariant::NoAttention;
  } else {
    throw ConfigError("unknown variant '" + variant + "' (expected vanilla, rgm, rgm-target or rgm-noattn)");
  }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string format_metrics_row(const MetricsRow& r) {
  std::ostringstream os;
  os << std::setprecision(17) << r.episode << ',' << r.env_steps << ',' << r.episode_return << ',' << r.moving_avg_1000
     << ',' << r.beta_entropy << ',' << r.meta_grad_norm << ',' << r.surrogate_J;
  return os.str();
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics file '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != kMetricsHeader) {
    throw std::runtime_error("metrics file '" + path.string() + "' has an unexpected header");
  }
  std::vector<MetricsRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    MetricsRow r;
    char c1, c2, c3, c4, c5, c6;
    if (!(ls >> r.episode >> c1 >> r.env_steps >> c2 >> r.episode_return >> c3 >> r.moving_avg_1000 >> c4 >>
          r.beta_entropy >> c5 >> r.meta_grad_norm >> c6 >> r.surrogate_J)) {
      throw std::runtime_error("metrics file '" + path.string() + "': malformed row '" + line + "'");
    }
    rows.push_back(r);
  }
  return rows;
}

std::optional<std::int64_t> episodes_to_threshold(const std::vector<MetricsRow>& metrics, double threshold,
                                                  std::int64_t min_episode) {
  for (const MetricsRow& r : metrics) {
    if (r.episode >= min_episode && r.moving_avg_1000 >= threshold) return r.episode;
  }
  return std::nullopt;
}

double area_under_curve(const std::vector<MetricsRow>& metrics) {
  if (metrics.empty()) return 0.0;
  double total = 0.0;
  for (const MetricsRow& r : metrics) total += r.moving_avg_1000;
  return total / static_cast<double>(metrics.size());
}

RunSummary run_experiment(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& directory,
                          std::ostream* progress) {
  std::filesystem::create_directories(directory);
  ExperimentConfig snapshot = config;
  snapshot.seeds = {seed};
  snapshot.output_dir = directory;
  snapshot.train.seed = seed;
  write_text(directory / "config.json", to_json(snapshot).dump(2) + "\n");

  const std::unique_ptr<Environment> env = make_environment(config.env);
  RunSummary summary;
  summary.seed = seed;
  summary.directory = directory;

  std::ofstream csv(directory / "metrics.csv", std::ios::binary);
  if (!csv) throw std::runtime_error("cannot write '" + (directory / "metrics.csv").string() + "'");
  csv << kMetricsHeader << '\n';
  TrainHooks hooks;
  hooks.abort_checkpoint = directory / "abort.ckpt";
  hooks.on_episode = [&](const MetricsRow& row) {
    csv << format_metrics_row(row) << '\n';
    summary.metrics.push_back(row);
    if (progress && row.episode % 500 == 0) {
      *progress << "  seed " << seed << " episode " << row.episode << " moving avg " << row.moving_avg_1000 << '\n'
                << std::flush;
    }
  };
  try {
    const TrainResult result = meta_train(snapshot.train, *env, hooks);
    save_learner(directory / "final.ckpt", result.learner);
  } catch (const TrainingAborted& e) {
    summary.aborted = true;
    summary.message = e.what();
  }
  csv.flush();
  if (!summary.metrics.empty()) summary.final_moving_avg = summary.metrics.back().moving_avg_1000;
  return summary;
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

SweepResult run_sweep(const ExperimentConfig& base, const SweepGrid& grid, std::ostream* progress) {
  if (grid.meta_lrs.empty() || grid.windows.empty()) throw ConfigError("sweep: empty grid");
  SweepResult result;
  std::map<std::pair<double, int>, std::vector<double>> by_cell;
  for (double lr : grid.meta_lrs) {
    for (int window : grid.windows) {
      ExperimentConfig cell = base;
      cell.train.meta.meta_lr = lr;
      cell.train.meta.window = window;
      for (std::uint64_t seed : base.seeds) {
        SweepRow row{lr, window, seed, 0.0, std::nullopt, "ok"};
        if (progress) *progress << "cell meta_lr=" << lr << " T=" << window << " seed=" << seed << '\n' << std::flush;
        try {
          const RunSummary run = run_experiment(
              cell, seed, base.output_dir / cell_dir_name(lr, window) / ("seed_" + std::to_string(seed)), progress);
          row.final_moving_avg = run.final_moving_avg;
          row.episodes_to_0_8 = episodes_to_threshold(run.metrics, 0.8);
          if (run.aborted) row.status = run.message;
        } catch (const std::exception& e) {
          row.status = e.what();
        }
        // a failed seed disqualifies its cell
        by_cell[{lr, window}].push_back(row.status == "ok" ? row.final_moving_avg
                                                           : -std::numeric_limits<double>::infinity());
        result.rows.push_back(row);
      }
    }
  }
  std::stable_sort(result.rows.begin(), result.rows.end(),
                   [](const SweepRow& a, const SweepRow& b) {
                     const bool a_ok = a.status == "ok";
                     const bool b_ok = b.status == "ok";
                     if (a_ok != b_ok) return a_ok;
                     return a.final_moving_avg > b.final_moving_avg;
                   });
  double best = -std::numeric_limits<double>::infinity();
  result.best_meta_lr = grid.meta_lrs.front();
  result.best_window = grid.windows.front();
  for (const auto& [cell, finals] : by_cell) {
    const double mean = std::accumulate(finals.begin(), finals.end(), 0.0) / static_cast<double>(finals.size());
    if (mean > best) {
      best = mean;
      result.best_meta_lr = cell.first;
      result.best_window = cell.second;
    }
  }

  std::ostringstream csv;
  csv << "rank,meta_lr,window,seed,final_moving_avg,episodes_to_0.8,status\n";
  for (std::size_t i = 0; i < result.rows.size(); ++i) {
    const SweepRow& r = result.rows[i];
    std::string status = r.status;
    std::replace(status.begin(), status.end(), ',', ';');
    csv << i + 1 << ',' << r.meta_lr << ',' << r.window << ',' << r.seed << ',' << format_double(r.final_moving_avg)
        << ',' << (r.episodes_to_0_8 ? std::to_string(*r.episodes_to_0_8) : std::string()) << ',' << status << '\n';
  }
  std::filesystem::create_directories(base.output_dir);
  write_text(base.output_dir / "summary.csv", csv.str());
  std::ostringstream best_line;
  best_line << "best meta_lr=" << result.best_meta_lr << " window=" << result.best_window
            << " mean_final_moving_avg=" << format_double(best) << '\n';
  write_text(base.output_dir / "best_cell.txt", best_line.str());
  return result;
}

// ---------------------------------------------------------------------------
// Figure data
// ---------------------------------------------------------------------------

std::vector<ValueCell> value_grid(const ValueNet& value, const MazeEnv& env) {
  const MazeLayout& m = env.layout();
  const std::vector<int> rooms = room_labels(m);
  const auto path = shortest_path(m);
  std::set<Cell> on_path;
  if (path) on_path.insert(path->cells.begin(), path->cells.end());

  Tensord features(static_cast<Index>(m.width) * m.height, env.feature_dim());
  std::vector<double> f(static_cast<std::size_t>(env.feature_dim()));
  std::vector<ValueCell> cells;
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      const Cell c{x, y};
      env.features(EnvState{c, 0}, f);
      const auto row = static_cast<Index>(cells.size());
      for (std::size_t j = 0; j < f.size(); ++j) features(row, static_cast<Index>(j)) = f[j];
      ValueCell vc;
      vc.x = x;
      vc.y = y;
      vc.room = rooms[static_cast<std::size_t>(y * m.width + x)];
      vc.on_path = on_path.count(c) > 0;
      vc.portal = m.is_portal(c);
      cells.push_back(vc);
    }
  }
  const Tensord v = value.evaluate(features);
  for (std::size_t i = 0; i < cells.size(); ++i) cells[i].value = v(static_cast<Index>(i), 0);
  return cells;
}

void write_value_grid_csv(const std::filesystem::path& path, const std::vector<ValueCell>& cells) {
  std::ostringstream os;
  os << "x,y,value,room,on_path,portal\n";
  for (const ValueCell& c : cells) {
    os << c.x << ',' << c.y << ',' << format_double(c.value) << ',' << c.room << ',' << (c.on_path ? 1 : 0) << ','
       << (c.portal ? 1 : 0) << '\n';
  }
  write_text(path, os.str());
}

std::string render_value_grid_svg(const std::vector<ValueCell>& cells, const MazeLayout& layout) {
  constexpr int kCell = 48;
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const ValueCell& c : cells) {
    lo = std::min(lo, c.value);
    hi = std::max(hi, c.value);
  }
  const double span = hi > lo ? hi - lo : 1.0;
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << layout.width * kCell << "\" height=\""
     << layout.height * kCell << "\">\n";
  for (const ValueCell& c : cells) {
    // darker is larger
    const int shade = static_cast<int>(std::lround(235.0 - 200.0 * (c.value - lo) / span));
    os << "<rect x=\"" << c.x * kCell << "\" y=\"" << c.y * kCell << "\" width=\"" << kCell << "\" height=\"" << kCell
       << "\" fill=\"rgb(" << shade << ',' << shade << ",255)\"/>\n";
    os << "<text x=\"" << c.x * kCell + 4 << "\" y=\"" << c.y * kCell + kCell / 2 + 4
       << "\" font-size=\"11\" fill=\"" << (shade < 140 ? "white" : "black") << "\">" << c.value << "</text>\n";
    if (c.portal) {
      os << "<circle cx=\"" << c.x * kCell + kCell / 2 << "\" cy=\"" << c.y * kCell + kCell - 8
         << "\" r=\"4\" fill=\"orange\"/>\n";
    }
    if (c.on_path) {
      os << "<rect x=\"" << c.x * kCell + 2 << "\" y=\"" << c.y * kCell + 2 << "\" width=\"" << kCell - 4
         << "\" height=\"" << kCell - 4 << "\" fill=\"none\" stroke=\"red\" stroke-width=\"2\"/>\n";
    }
  }
  for (int y = 0; y < layout.height; ++y) {
    for (int x = 0; x < layout.width; ++x) {
      const std::uint8_t m = layout.wall_mask({x, y});
      const int x0 = x * kCell;
      const int y0 = y * kCell;
      auto line = [&](int ax, int ay, int bx, int by) {
        os << "<line x1=\"" << ax << "\" y1=\"" << ay << "\" x2=\"" << bx << "\" y2=\"" << by
           << "\" stroke=\"black\" stroke-width=\"3\"/>\n";
      };
      if (m & wall::kNorth) line(x0, y0, x0 + kCell, y0);
      if (m & wall::kSouth) line(x0, y0 + kCell, x0 + kCell, y0 + kCell);
      if (m & wall::kWest) line(x0, y0, x0, y0 + kCell);
      if (m & wall::kEast) line(x0 + kCell, y0, x0 + kCell, y0 + kCell);
    }
  }
  os << "</svg>\n";
  return os.str();
}

ValueGridCheck check_value_grid(const std::vector<ValueCell>& cells, const MazeLayout& layout) {
  ValueGridCheck check;
  const auto start = std::find_if(cells.begin(), cells.end(),
                                  [&](const ValueCell& c) { return c.x == layout.start.x && c.y == layout.start.y; });
  if (start == cells.end()) {
    check.message = "start cell missing from the grid";
    return check;
  }
  std::vector<const ValueCell*> path;
  double other_sum = 0.0;
  int other_count = 0;
  for (const ValueCell& c : cells) {
    if (c.room != start->room || c.portal) continue;
    if (c.on_path) {
      path.push_back(&c);
    } else {
      other_sum += c.value;
      ++other_count;
    }
  }
  if (path.empty() || other_count == 0) {
    check.message = "start room has no path cells or no other cells";
    return check;
  }
  const double other_mean = other_sum / other_count;
  std::ostringstream os;
  os << std::setprecision(6) << "start room: off-path mean " << other_mean << "; path values";
  check.passed = true;
  for (const ValueCell* c : path) {
    os << " (" << c->x << ',' << c->y << ")=" << c->value;
    if (!(c->value > other_mean)) check.passed = false;
  }
  check.message = os.str();
  return check;
}

std::vector<double> normalized_discounts(int length, double gamma) {
  if (length < 1) throw std::invalid_argument("normalized_discounts: length must be >= 1");
  std::vector<double> w(static_cast<std::size_t>(length));
  double scale = 1.0;
  for (double& x : w) {
    x = scale;
    scale *= gamma;
  }
  const double total = std::accumulate(w.begin(), w.end(), 0.0);
  for (double& x : w) x /= total;
  return w;
}

std::vector<BetaRow> beta_dump(const Learner& learner, const Environment& env, int episodes, int window, double gamma,
                               std::uint64_t seed) {
  if (!learner.rgm) throw ConfigError("beta-dump: the checkpoint has no return generating model");
  if (episodes < 1) throw ConfigError("beta-dump: episode count must be >= 1");
  if (window < 1) throw ConfigError("beta-dump: window must be >= 1");
  std::vector<BetaRow> rows;
  for (int ep = 0; ep < episodes; ++ep) {
    const Trajectory tau = ep == 0 ? greedy_rollout(learner.policy, env)
                                   : rollout(env, learner.policy.sampler(),
                                             derive_seed(seed, Stream::Evaluation, static_cast<std::uint64_t>(ep)));
    std::vector<double> beta;
    for (Index begin = 0; begin < tau.size(); begin += window) {
      const auto w = learner.rgm->beta(tau.window(begin, std::min<Index>(window, tau.size() - begin)));
      beta.insert(beta.end(), w.begin(), w.end());
    }
    const double total = std::accumulate(beta.begin(), beta.end(), 0.0);
    const auto discounts = normalized_discounts(static_cast<int>(tau.size()), gamma);
    for (std::size_t t = 0; t < beta.size(); ++t) {
      rows.push_back({ep, static_cast<int>(t), beta[t] / total, discounts[t], tau.terminal});
    }
  }
  return rows;
}

void write_beta_csv(const std::filesystem::path& path, const std::vector<BetaRow>& rows) {
  std::ostringstream os;
  os << "episode,t,beta_t,gamma_pow_t_normalized,reached_exit\n";
  for (const BetaRow& r : rows) {
    os << r.episode << ',' << r.t << ',' << format_double(r.beta) << ',' << format_double(r.gamma_normalized) << ','
       << (r.reached_exit ? 1 : 0) << '\n';
  }
  write_text(path, os.str());
}

double exit_step_beta(const std::vector<BetaRow>& rows, int episode) {
  const BetaRow* last = nullptr;
  for (const BetaRow& r : rows) {
    if (r.episode == episode) last = &r;
  }
  return last && last->reached_exit ? last->beta : 0.0;
}

}  // namespace rgm
