#include "wayrvs/envs.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>

#include "wayrvs/checkpoint.hpp"

namespace wayrvs {

double Trajectory::total_return(double gamma) const {
  double total = 0.0;
  double discount = 1.0;
  for (double r : rewards) {
    total += discount * r;
    discount *= gamma;
  }
  return total;
}

void validate(const Dataset& dataset) {
  if (dataset.trajectories.empty()) throw std::invalid_argument("dataset: no trajectories");
  for (const auto& t : dataset.trajectories) {
    if (t.rewards.size() != t.actions.size() || t.states.size() != t.actions.size() + 1) {
      throw std::invalid_argument("dataset: trajectory sequence lengths disagree");
    }
  }
}

// ---------------------------------------------------------------- chain MDP

void validate(const ChainMdpConfig& config) {
  if (config.H < 2) throw std::invalid_argument("chain: H must be >= 2");
  if (!(config.lambda > 0.0 && config.lambda < 1.0)) {
    throw std::invalid_argument("chain: lambda must lie in (0, 1)");
  }
}

ChainEnv::ChainEnv(ChainMdpConfig config) : config_(config) { validate(config_); }

std::string ChainEnv::name() const {
  std::ostringstream os;
  os << "chain:H=" << config_.H << ",lambda=" << format_double(config_.lambda);
  return os.str();
}

State ChainEnv::reset() {
  position_ = 0;
  return {0.0};
}

StepResult ChainEnv::step(int action, Rng&) {
  if (action != kChainStay && action != kChainAdvance) {
    throw std::invalid_argument("chain: invalid action " + std::to_string(action));
  }
  if (action == kChainAdvance && position_ < config_.H) ++position_;
  StepResult r;
  r.state = {static_cast<double>(position_)};
  r.done = position_ == config_.H;
  r.reward = (action == kChainAdvance && r.done) ? 1.0 : 0.0;
  return r;
}

bool ChainEnv::success(const Trajectory& traj) const {
  return !traj.states.empty() && traj.states.back()[0] == config_.H;
}

std::unique_ptr<Environment> ChainEnv::clone() const { return std::make_unique<ChainEnv>(*this); }

Dataset chain_generate(const ChainMdpConfig& config, std::size_t n_traj, std::uint64_t seed) {
  validate(config);
  if (n_traj == 0) throw std::invalid_argument("chain_generate: n_traj must be >= 1");
  Dataset ds;
  ds.env_name = ChainEnv(config).name();
  ds.behavior = "chain-behavior:lambda=" + format_double(config.lambda);
  ds.seed = seed;
  Rng rng(seed);
  std::bernoulli_distribution stay(config.lambda);
  for (std::size_t n = 0; n < n_traj; ++n) {
    Trajectory t;
    int pos = 0;
    t.states.push_back({0.0});
    while (pos < config.H) {
      const int a = stay(rng) ? kChainStay : kChainAdvance;
      if (a == kChainAdvance) ++pos;
      t.actions.push_back(a);
      t.rewards.push_back(pos == config.H ? 1.0 : 0.0);
      t.states.push_back({static_cast<double>(pos)});
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

// --------------------------------------------------------------------- maze

bool GridMaze::in_bounds(Cell c) const {
  return c.row >= 0 && c.row < height && c.col >= 0 && c.col < width;
}

bool GridMaze::is_wall(Cell c) const {
  return !in_bounds(c) || walls[static_cast<std::size_t>(c.row * width + c.col)];
}

std::vector<Cell> GridMaze::open_cells() const {
  std::vector<Cell> out;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      if (!is_wall({r, c})) out.push_back({r, c});
    }
  }
  return out;
}

GridMaze parse_maze(const std::vector<std::string>& rows, std::string name) {
  if (rows.empty()) throw std::invalid_argument("maze: empty layout");
  GridMaze m;
  m.name = std::move(name);
  m.height = static_cast<int>(rows.size());
  m.width = static_cast<int>(rows[0].size());
  bool has_start = false;
  bool has_target = false;
  for (int r = 0; r < m.height; ++r) {
    if (static_cast<int>(rows[static_cast<std::size_t>(r)].size()) != m.width) {
      throw std::invalid_argument("maze: ragged row " + std::to_string(r));
    }
    for (int c = 0; c < m.width; ++c) {
      const char ch = rows[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
      switch (ch) {
        case '#': m.walls.push_back(true); break;
        case '.': m.walls.push_back(false); break;
        case 'S': m.walls.push_back(false); m.start = {r, c}; has_start = true; break;
        case 'G': m.walls.push_back(false); m.target = {r, c}; has_target = true; break;
        default: throw std::invalid_argument(std::string("maze: unknown symbol '") + ch + "'");
      }
    }
  }
  if (!has_start || !has_target) throw std::invalid_argument("maze: missing S or G");
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      const bool border = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1;
      if (border && !m.is_wall({r, c})) throw std::invalid_argument("maze: open border cell");
    }
  }
  if (bfs_distance(m, m.start, m.target) < 0) {
    throw std::invalid_argument("maze: target unreachable from start");
  }
  return m;
}

GridMaze maze_layout(const std::string& name) {
  if (name == "stitch-7x9") {
    return parse_maze({"#########",
                       "#S....#.#",
                       "#.###.#.#",
                       "#.#.....#",
                       "#.#.###.#",
                       "#...#..G#",
                       "#########"},
                      name);
  }
  if (name == "open-5x5") {
    return parse_maze({"#####", "#S..#", "#...#", "#..G#", "#####"}, name);
  }
  throw std::invalid_argument("maze: unknown layout '" + name + "'");
}

std::vector<std::string> maze_rows(const GridMaze& maze) {
  std::vector<std::string> rows;
  for (int r = 0; r < maze.height; ++r) {
    std::string row;
    for (int c = 0; c < maze.width; ++c) {
      const Cell cell{r, c};
      row += cell == maze.start ? 'S' : cell == maze.target ? 'G' : maze.is_wall(cell) ? '#' : '.';
    }
    rows.push_back(row);
  }
  return rows;
}

Cell maze_step(const GridMaze& maze, Cell cell, int action) {
  if (maze.is_wall(cell)) {
    throw std::invalid_argument("maze_step: cell (" + std::to_string(cell.row) + "," +
                                std::to_string(cell.col) + ") is a wall");
  }
  Cell next = cell;
  switch (action) {
    case kUp: --next.row; break;
    case kDown: ++next.row; break;
    case kLeft: --next.col; break;
    case kRight: ++next.col; break;
    case kStay: break;
    default: throw std::invalid_argument("maze_step: invalid action " + std::to_string(action));
  }
  return maze.is_wall(next) ? cell : next;
}

std::vector<int> bfs_distances(const GridMaze& maze, Cell from) {
  std::vector<int> dist(static_cast<std::size_t>(maze.width * maze.height), -1);
  if (maze.is_wall(from)) return dist;
  auto index = [&](Cell c) { return static_cast<std::size_t>(c.row * maze.width + c.col); };
  std::deque<Cell> queue{from};
  dist[index(from)] = 0;
  while (!queue.empty()) {
    const Cell c = queue.front();
    queue.pop_front();
    for (int a = 0; a < 4; ++a) {
      const Cell n = maze_step(maze, c, a);
      if (dist[index(n)] < 0) {
        dist[index(n)] = dist[index(c)] + 1;
        queue.push_back(n);
      }
    }
  }
  return dist;
}

int bfs_distance(const GridMaze& maze, Cell from, Cell to) {
  return bfs_distances(maze, from)[static_cast<std::size_t>(to.row * maze.width + to.col)];
}

State encode_cell(const GridMaze& maze, Cell c) {
  return {static_cast<double>(c.row) / (maze.height - 1), static_cast<double>(c.col) / (maze.width - 1)};
}

Cell decode_cell(const GridMaze& maze, const State& s) {
  return {static_cast<int>(std::lround(s.at(0) * (maze.height - 1))),
          static_cast<int>(std::lround(s.at(1) * (maze.width - 1)))};
}

Quadrant quadrant_of(const GridMaze& maze, Cell c) {
  // Sign of the offset from the grid centre, per axis.
  auto side = [](int v, int extent) {
    const int twice = 2 * v - (extent - 1);
    return twice < 0 ? -1 : twice > 0 ? 1 : 0;
  };
  const int r = side(c.row, maze.height);
  const int k = side(c.col, maze.width);
  if (r == 0 || k == 0) return Quadrant::kNone;
  if (r == side(maze.start.row, maze.height) && k == side(maze.start.col, maze.width)) {
    return Quadrant::kStart;
  }
  if (r == side(maze.target.row, maze.height) && k == side(maze.target.col, maze.width)) {
    return Quadrant::kTarget;
  }
  return Quadrant::kNone;
}

bool spans_quadrants(const GridMaze& maze, const std::vector<Cell>& path) {
  bool start = false;
  bool target = false;
  for (const Cell& c : path) {
    const Quadrant q = quadrant_of(maze, c);
    start = start || q == Quadrant::kStart;
    target = target || q == Quadrant::kTarget;
  }
  return start && target;
}

bool spans_quadrants(const GridMaze& maze, const Trajectory& traj) {
  std::vector<Cell> path;
  for (const auto& s : traj.states) path.push_back(decode_cell(maze, s));
  return spans_quadrants(maze, path);
}

int shortest_path_action(const GridMaze& maze, const std::vector<int>& dist_to_dest, Cell from,
                         Rng& rng) {
  auto at = [&](Cell c) { return dist_to_dest[static_cast<std::size_t>(c.row * maze.width + c.col)]; };
  const int here = at(from);
  if (here <= 0) return kStay;
  std::vector<int> best;
  for (int a = 0; a < 4; ++a) {
    if (at(maze_step(maze, from, a)) == here - 1) best.push_back(a);
  }
  if (best.size() == 1) return best[0];
  std::uniform_int_distribution<std::size_t> pick(0, best.size() - 1);
  return best[pick(rng)];
}

MazeEnv::MazeEnv(GridMaze maze, std::size_t max_steps)
    : maze_(std::move(maze)), max_steps_(max_steps), to_target_(bfs_distances(maze_, maze_.target)),
      position_(maze_.start) {}

State MazeEnv::reset() {
  position_ = maze_.start;
  return encode_cell(maze_, position_);
}

StepResult MazeEnv::step(int action, Rng&) {
  position_ = maze_step(maze_, position_, action);
  StepResult r;
  r.state = encode_cell(maze_, position_);
  r.done = position_ == maze_.target;
  r.reward = r.done ? 1.0 : 0.0;
  return r;
}

bool MazeEnv::success(const Trajectory& traj) const {
  return !traj.states.empty() && decode_cell(maze_, traj.states.back()) == maze_.target;
}

int MazeEnv::expert_action(const State& state, Rng& rng) const {
  return shortest_path_action(maze_, to_target_, decode_cell(maze_, state), rng);
}

std::unique_ptr<Environment> MazeEnv::clone() const { return std::make_unique<MazeEnv>(*this); }

namespace {

int reverse_of(int action) {
  switch (action) {
    case kUp: return kDown;
    case kDown: return kUp;
    case kLeft: return kRight;
    case kRight: return kLeft;
    default: return -1;
  }
}

}  // namespace

constexpr int kStitchBand = 2;

Dataset maze_generate_play(const GridMaze& maze, std::size_t n_traj, const MazePlayConfig& config,
                           std::uint64_t seed) {
  if (n_traj == 0) throw std::invalid_argument("maze_generate_play: n_traj must be >= 1");
  if (config.span_fraction_cap < 0.0 || config.span_fraction_cap > 1.0) {
    throw std::invalid_argument("maze_generate_play: span_fraction_cap must lie in [0, 1]");
  }
  if (config.noise_prob < 0.0 || config.noise_prob > 1.0) {
    throw std::invalid_argument("maze_generate_play: noise_prob must lie in [0, 1]");
  }
  // Regions by path distance: each side keeps the cells nearer its own
  // endpoint, and both keep a shared band of cells about equally far from
  // the two (the stitching region).
  const std::vector<int> from_start = bfs_distances(maze, maze.start);
  const std::vector<int> from_target = bfs_distances(maze, maze.target);
  std::vector<Cell> start_pool;
  std::vector<Cell> target_pool;
  for (const Cell& c : maze.open_cells()) {
    const auto i = static_cast<std::size_t>(c.row * maze.width + c.col);
    if (from_start[i] < 0) continue;
    if (from_start[i] <= from_target[i] + kStitchBand) start_pool.push_back(c);
    if (from_target[i] <= from_start[i] + kStitchBand) target_pool.push_back(c);
  }
  if (start_pool.size() < 2 || target_pool.size() < 2) {
    throw std::invalid_argument("maze_generate_play: regional pools too small");
  }
  const auto span_budget =
      static_cast<std::size_t>(std::floor(config.span_fraction_cap * static_cast<double>(n_traj)));
  const std::size_t step_cap = static_cast<std::size_t>(20 * maze.width * maze.height);

  Dataset ds;
  ds.env_name = "maze:" + maze.name;
  {
    std::ostringstream os;
    os << "play:noise=" << format_double(config.noise_prob)
       << ",span_cap=" << format_double(config.span_fraction_cap);
    ds.behavior = os.str();
  }
  ds.seed = seed;
  Rng rng(seed);
  std::bernoulli_distribution coin(0.5);
  std::bernoulli_distribution noisy(config.noise_prob);
  std::uniform_int_distribution<int> any_action(0, kMazeActions - 1);
  std::size_t spans = 0;
  std::size_t rejections = 0;
  while (ds.trajectories.size() < n_traj) {
    const auto& pool = coin(rng) ? start_pool : target_pool;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    const Cell origin = pool[pick(rng)];
    const Cell dest = pool[pick(rng)];
    const std::vector<int> dist = bfs_distances(maze, dest);
    const bool reachable = dist[static_cast<std::size_t>(origin.row * maze.width + origin.col)] >= 0;
    bool accepted = false;
    Trajectory t;
    if (!(origin == dest) && reachable) {
      Cell cell = origin;
      int previous = -1;
      std::vector<Cell> path{cell};
      t.states.push_back(encode_cell(maze, cell));
      while (!(cell == dest) && t.actions.size() < step_cap) {
        int a = 0;
        if (noisy(rng)) {
          do {
            a = any_action(rng);
          } while (a == reverse_of(previous));
        } else {
          a = shortest_path_action(maze, dist, cell, rng);
        }
        cell = maze_step(maze, cell, a);
        if (a != kStay) previous = a;
        t.actions.push_back(a);
        t.rewards.push_back(cell == maze.target ? 1.0 : 0.0);
        t.states.push_back(encode_cell(maze, cell));
        path.push_back(cell);
      }
      const bool spanning = spans_quadrants(maze, path);
      accepted = cell == dest && (!spanning || spans < span_budget);
      if (accepted && spanning) ++spans;
    }
    if (!accepted) {
      if (++rejections > 100000) {
        throw std::runtime_error("maze_generate_play: more than 1e5 consecutive rejections");
      }
      continue;
    }
    rejections = 0;
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

// -------------------------------------------------------------- hazard walk

void validate(const HazardWalkConfig& config) {
  if (config.T < 1) throw std::invalid_argument("hazard: T must be >= 1");
  if (config.fast_termination_prob < 0.0 || config.fast_termination_prob > 1.0) {
    throw std::invalid_argument("hazard: fast_termination_prob must lie in [0, 1]");
  }
}

HazardEnv::HazardEnv(HazardWalkConfig config) : config_(config) { validate(config_); }

State HazardEnv::reset() {
  t_ = 0;
  finished_ = false;
  return {0.0};
}

StepResult HazardEnv::step(int action, Rng& rng) {
  if (action != kHazardSafe && action != kHazardFast) {
    throw std::invalid_argument("hazard: invalid action " + std::to_string(action));
  }
  StepResult r;
  if (action == kHazardFast) {
    r.reward = config_.fast_reward;
    std::bernoulli_distribution hit(config_.fast_termination_prob);
    r.terminated_early = hit(rng);
  } else {
    r.reward = config_.safe_reward;
  }
  ++t_;
  finished_ = r.terminated_early || t_ >= config_.T;
  r.done = finished_;
  r.state = {static_cast<double>(t_) / config_.T};
  return r;
}

bool HazardEnv::success(const Trajectory& traj) const {
  return !traj.terminated_early && static_cast<int>(traj.length()) == config_.T;
}

std::unique_ptr<Environment> HazardEnv::clone() const { return std::make_unique<HazardEnv>(*this); }

std::vector<MixtureComponent> parse_mixture(const std::string& text) {
  std::vector<MixtureComponent> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw std::invalid_argument("mixture: expected eps:weight in '" + item + "'");
    out.push_back({std::stod(item.substr(0, colon)), std::stod(item.substr(colon + 1))});
  }
  if (out.empty()) throw std::invalid_argument("mixture: empty");
  return out;
}

std::string format_mixture(const std::vector<MixtureComponent>& mixture) {
  std::string out;
  for (const auto& m : mixture) {
    if (!out.empty()) out += ",";
    out += format_double(m.epsilon) + ":" + format_double(m.weight);
  }
  return out;
}

Dataset hazard_generate(const HazardWalkConfig& config, const std::vector<MixtureComponent>& mixture,
                        std::size_t n_traj, std::uint64_t seed) {
  validate(config);
  if (mixture.empty()) throw std::invalid_argument("hazard_generate: empty mixture");
  double total_weight = 0.0;
  std::vector<double> weights;
  for (const auto& m : mixture) {
    if (m.weight <= 0.0) throw std::invalid_argument("hazard_generate: weights must be positive");
    if (m.epsilon < 0.0 || m.epsilon > 1.0) throw std::invalid_argument("hazard_generate: epsilon must lie in [0, 1]");
    total_weight += m.weight;
    weights.push_back(m.weight);
  }
  if (std::abs(total_weight - 1.0) > 1e-9) throw std::invalid_argument("hazard_generate: weights must sum to 1");
  if (n_traj == 0) throw std::invalid_argument("hazard_generate: n_traj must be >= 1");

  Dataset ds;
  ds.env_name = "hazard";
  ds.behavior = "mixture:" + format_mixture(mixture);
  ds.seed = seed;
  Rng rng(seed);
  std::discrete_distribution<std::size_t> component(weights.begin(), weights.end());
  HazardEnv env(config);
  for (std::size_t n = 0; n < n_traj; ++n) {
    const double eps = mixture[component(rng)].epsilon;
    std::bernoulli_distribution fast(eps);
    Trajectory t;
    t.states.push_back(env.reset());
    while (!env.done()) {
      const int a = fast(rng) ? kHazardFast : kHazardSafe;
      StepResult r = env.step(a, rng);
      t.actions.push_back(a);
      t.rewards.push_back(r.reward);
      t.states.push_back(std::move(r.state));
      t.terminated_early = r.terminated_early;
    }
    ds.trajectories.push_back(std::move(t));
  }
  return ds;
}

Dataset delay_rewards(const Dataset& dataset) {
  Dataset out = dataset;
  for (auto& t : out.trajectories) {
    if (t.rewards.empty()) continue;
    double total = 0.0;
    for (double r : t.rewards) total += r;
    std::fill(t.rewards.begin(), t.rewards.end(), 0.0);
    t.rewards.back() = total;
  }
  return out;
}

// ----------------------------------------------------------- registry/score

namespace {

std::map<std::string, std::string> parse_params(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("env: expected key=value in '" + item + "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

std::size_t maze_max_steps(const GridMaze& maze) {
  return static_cast<std::size_t>(2 * bfs_distance(maze, maze.start, maze.target));
}

}  // namespace

std::unique_ptr<Environment> make_env(const std::string& name) {
  const auto colon = name.find(':');
  const std::string kind = name.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : name.substr(colon + 1);
  if (kind == "chain") {
    ChainMdpConfig c;
    for (const auto& [k, v] : parse_params(rest)) {
      if (k == "H") c.H = std::stoi(v);
      else if (k == "lambda") c.lambda = std::stod(v);
      else throw std::invalid_argument("env: unknown chain parameter '" + k + "'");
    }
    return std::make_unique<ChainEnv>(c);
  }
  if (kind == "maze") {
    GridMaze m = maze_layout(rest.empty() ? "stitch-7x9" : rest);
    const std::size_t steps = maze_max_steps(m);
    return std::make_unique<MazeEnv>(std::move(m), steps);
  }
  if (kind == "hazard") {
    HazardWalkConfig c;
    for (const auto& [k, v] : parse_params(rest)) {
      if (k == "T") c.T = std::stoi(v);
      else throw std::invalid_argument("env: unknown hazard parameter '" + k + "'");
    }
    return std::make_unique<HazardEnv>(c);
  }
  throw std::invalid_argument("env: unknown environment '" + name + "'");
}

ScoreEndpoints compute_endpoints(const Environment& env, std::size_t episodes, std::uint64_t seed) {
  auto run = [&](bool expert, std::uint64_t stream) {
    auto e = env.clone();
    Rng rng(derive_seed(seed, stream));
    std::uniform_int_distribution<int> uniform(0, static_cast<int>(env.num_actions()) - 1);
    double total = 0.0;
    for (std::size_t n = 0; n < episodes; ++n) {
      State s = e->reset();
      for (std::size_t t = 0; t < env.default_max_steps() && !e->done(); ++t) {
        const int a = expert ? e->expert_action(s, rng) : uniform(rng);
        StepResult r = e->step(a, rng);
        total += r.reward;
        s = std::move(r.state);
      }
    }
    return total / static_cast<double>(episodes);
  };
  return {run(false, 0), run(true, 1)};
}

namespace {

std::mutex& registry_mutex() {
  static std::mutex m;
  return m;
}

std::map<std::string, ScoreEndpoints>& registry() {
  static std::map<std::string, ScoreEndpoints> r;
  return r;
}

}  // namespace

void register_endpoints(const std::string& env_name, ScoreEndpoints endpoints) {
  std::lock_guard lock(registry_mutex());
  registry()[env_name] = endpoints;
}

ScoreEndpoints endpoints_for(const std::string& env_name) {
  {
    std::lock_guard lock(registry_mutex());
    auto it = registry().find(env_name);
    if (it != registry().end()) return it->second;
  }
  std::unique_ptr<Environment> env;
  try {
    env = make_env(env_name);
  } catch (const std::invalid_argument&) {
    throw std::invalid_argument("normalized_score: unregistered environment '" + env_name + "'");
  }
  const ScoreEndpoints e = compute_endpoints(*env, 10000, 20240531);
  register_endpoints(env_name, e);
  if (env->name() != env_name) register_endpoints(env->name(), e);
  return e;
}

double normalized_score(const std::string& env_name, double raw_return) {
  const ScoreEndpoints e = endpoints_for(env_name);
  if (e.expert_return == e.random_return) {
    throw std::invalid_argument("normalized_score: degenerate endpoints for " + env_name);
  }
  return 100.0 * (raw_return - e.random_return) / (e.expert_return - e.random_return);
}

// ------------------------------------------------------------------- files

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_double(std::string_view s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw std::runtime_error("trajectory file: malformed number '" + std::string(s) + "'");
  }
  return v;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  if (s.empty()) return out;
  std::size_t pos = 0;
  while (true) {
    const std::size_t next = s.find(sep, pos);
    out.push_back(s.substr(pos, next == std::string_view::npos ? std::string_view::npos : next - pos));
    if (next == std::string_view::npos) break;
    pos = next + 1;
  }
  return out;
}

void check_token(const std::string& value, const char* what) {
  if (value.empty() || value.find_first_of(" \n\t") != std::string::npos) {
    throw std::invalid_argument(std::string("trajectory file: invalid ") + what + " '" + value + "'");
  }
}

}  // namespace

std::string serialize_dataset(const Dataset& dataset) {
  validate(dataset);
  check_token(dataset.env_name, "env name");
  std::string out = "WAYRVS-TRAJ v1 env=" + dataset.env_name + " seed=" + std::to_string(dataset.seed);
  if (!dataset.behavior.empty()) {
    check_token(dataset.behavior, "behavior tag");
    out += " behavior=" + dataset.behavior;
  }
  out += "\n";
  for (const auto& t : dataset.trajectories) {
    for (std::size_t i = 0; i < t.states.size(); ++i) {
      if (i > 0) out += ';';
      for (std::size_t k = 0; k < t.states[i].size(); ++k) {
        if (k > 0) out += ',';
        out += format_double(t.states[i][k]);
      }
    }
    out += '|';
    for (std::size_t i = 0; i < t.actions.size(); ++i) {
      if (i > 0) out += ';';
      out += std::to_string(t.actions[i]);
    }
    out += '|';
    for (std::size_t i = 0; i < t.rewards.size(); ++i) {
      if (i > 0) out += ';';
      out += format_double(t.rewards[i]);
    }
    out += t.terminated_early ? "|1\n" : "|0\n";
  }
  return out;
}

Dataset parse_dataset(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("trajectory file: empty");
  std::istringstream head(line);
  std::string magic;
  std::string version;
  head >> magic >> version;
  if (magic != "WAYRVS-TRAJ" || version != "v1") throw std::runtime_error("trajectory file: bad header");
  Dataset ds;
  std::string field;
  while (head >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw std::runtime_error("trajectory file: bad header field '" + field + "'");
    const std::string key = field.substr(0, eq);
    const std::string value = field.substr(eq + 1);
    if (key == "env") ds.env_name = value;
    else if (key == "seed") ds.seed = std::stoull(value);
    else if (key == "behavior") ds.behavior = value;
    else throw std::runtime_error("trajectory file: unknown header field '" + key + "'");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto parts = split(line, '|');
    if (parts.size() != 4) throw std::runtime_error("trajectory file: expected 4 fields per record");
    Trajectory t;
    for (auto step : split(parts[0], ';')) {
      State s;
      for (auto comp : split(step, ',')) s.push_back(parse_double(comp));
      t.states.push_back(std::move(s));
    }
    for (auto a : split(parts[1], ';')) t.actions.push_back(static_cast<int>(parse_double(a)));
    for (auto r : split(parts[2], ';')) t.rewards.push_back(parse_double(r));
    if (parts[3] != "0" && parts[3] != "1") throw std::runtime_error("trajectory file: bad terminated flag");
    t.terminated_early = parts[3] == "1";
    ds.trajectories.push_back(std::move(t));
  }
  validate(ds);
  return ds;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  write_file(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return parse_dataset(read_file(path)); }

}  // namespace wayrvs
