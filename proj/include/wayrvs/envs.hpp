#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "wayrvs/layers.hpp"

namespace wayrvs {

using State = std::vector<double>;

struct Trajectory {
  std::vector<State> states;  // length() + 1 entries
  std::vector<int> actions;
  std::vector<double> rewards;
  bool terminated_early = false;

  std::size_t length() const noexcept { return actions.size(); }
  double total_return(double gamma = 1.0) const;
  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct Dataset {
  std::vector<Trajectory> trajectories;
  std::string env_name;
  std::string behavior;
  std::uint64_t seed = 0;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

// Throws std::invalid_argument when a trajectory's sequences disagree in
// length or the dataset is empty.
void validate(const Dataset& dataset);

enum class TaskKind { kGoal, kReward };

struct StepResult {
  State state;
  double reward = 0.0;
  bool done = false;
  bool terminated_early = false;
};

// Stateful simulator used for rollouts. Goal tasks project states onto a
// goal space; reward tasks have no goal space.
class Environment {
 public:
  virtual ~Environment() = default;

  virtual std::string name() const = 0;
  virtual TaskKind task() const = 0;
  virtual std::size_t state_dim() const = 0;
  virtual std::size_t goal_dim() const = 0;
  virtual std::size_t num_actions() const = 0;
  virtual std::size_t default_max_steps() const = 0;

  virtual State reset() = 0;
  virtual StepResult step(int action, Rng& rng) = 0;
  virtual bool done() const = 0;

  virtual State goal_of(const State& state) const { return state; }
  // The evaluation goal (goal tasks) for rollouts from reset().
  virtual State eval_goal() const { return {}; }
  virtual bool success(const Trajectory& traj) const = 0;
  // Action of the reference expert used for the normalized-score endpoint.
  virtual int expert_action(const State& state, Rng& rng) const = 0;
  virtual std::unique_ptr<Environment> clone() const = 0;
};

// ---------------------------------------------------------------- chain MDP

struct ChainMdpConfig {
  int H = 10;
  double lambda = 0.5;
};
void validate(const ChainMdpConfig& config);

inline constexpr int kChainStay = 0;     // a(1)
inline constexpr int kChainAdvance = 1;  // a(2)

// States s(0)..s(H) encoded as the scalar index; an episode ends on s(H).
class ChainEnv final : public Environment {
 public:
  explicit ChainEnv(ChainMdpConfig config);

  std::string name() const override;
  TaskKind task() const override { return TaskKind::kGoal; }
  std::size_t state_dim() const override { return 1; }
  std::size_t goal_dim() const override { return 1; }
  std::size_t num_actions() const override { return 2; }
  std::size_t default_max_steps() const override { return static_cast<std::size_t>(2 * config_.H); }
  State reset() override;
  StepResult step(int action, Rng& rng) override;
  bool done() const override { return position_ == config_.H; }
  State eval_goal() const override { return {static_cast<double>(config_.H)}; }
  bool success(const Trajectory& traj) const override;
  int expert_action(const State&, Rng&) const override { return kChainAdvance; }
  std::unique_ptr<Environment> clone() const override;
  const ChainMdpConfig& config() const { return config_; }

 private:
  ChainMdpConfig config_;
  int position_ = 0;
};

Dataset chain_generate(const ChainMdpConfig& config, std::size_t n_traj, std::uint64_t seed);

// --------------------------------------------------------------------- maze

struct Cell {
  int row = 0;
  int col = 0;
  friend bool operator==(const Cell&, const Cell&) = default;
};

enum MazeAction : int { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };
inline constexpr int kMazeActions = 5;

struct GridMaze {
  int width = 0;
  int height = 0;
  std::vector<bool> walls;  // row-major, true = blocked
  Cell start;
  Cell target;
  std::string name;

  bool is_wall(Cell c) const;
  bool in_bounds(Cell c) const;
  std::vector<Cell> open_cells() const;
};

// Parses rows of '#', '.', 'S', 'G'. Validates the GridMaze invariants.
GridMaze parse_maze(const std::vector<std::string>& rows, std::string name);
GridMaze maze_layout(const std::string& name);  // "stitch-7x9", "open-5x5"
std::vector<std::string> maze_rows(const GridMaze& maze);

Cell maze_step(const GridMaze& maze, Cell cell, int action);
// Breadth-first distances from `from`; -1 marks unreachable or wall cells.
std::vector<int> bfs_distances(const GridMaze& maze, Cell from);
int bfs_distance(const GridMaze& maze, Cell from, Cell to);

State encode_cell(const GridMaze& maze, Cell c);
Cell decode_cell(const GridMaze& maze, const State& s);

enum class Quadrant { kNone, kStart, kTarget };
// Quadrant membership relative to the start and target corners: cells in the
// start cell's quadrant, the target cell's quadrant, or neither.
Quadrant quadrant_of(const GridMaze& maze, Cell c);
// True when the cell path visits both the start and target quadrants.
bool spans_quadrants(const GridMaze& maze, const std::vector<Cell>& path);
bool spans_quadrants(const GridMaze& maze, const Trajectory& traj);

struct MazePlayConfig {
  double span_fraction_cap = 0.05;
  double noise_prob = 0.2;
};

// Reward 1 on entering the target; the episode ends there.
class MazeEnv final : public Environment {
 public:
  MazeEnv(GridMaze maze, std::size_t max_steps);

  std::string name() const override { return "maze:" + maze_.name; }
  TaskKind task() const override { return TaskKind::kGoal; }
  std::size_t state_dim() const override { return 2; }
  std::size_t goal_dim() const override { return 2; }
  std::size_t num_actions() const override { return kMazeActions; }
  std::size_t default_max_steps() const override { return max_steps_; }
  State reset() override;
  StepResult step(int action, Rng& rng) override;
  bool done() const override { return position_ == maze_.target; }
  State eval_goal() const override { return encode_cell(maze_, maze_.target); }
  bool success(const Trajectory& traj) const override;
  int expert_action(const State& state, Rng& rng) const override;
  std::unique_ptr<Environment> clone() const override;
  const GridMaze& maze() const { return maze_; }

 private:
  GridMaze maze_;
  std::size_t max_steps_;
  std::vector<int> to_target_;
  Cell position_;
};

// Action moving one step closer to `dest` (ties broken by rng); kStay when
// already there.
int shortest_path_action(const GridMaze& maze, const std::vector<int>& dist_to_dest, Cell from,
                         Rng& rng);

Dataset maze_generate_play(const GridMaze& maze, std::size_t n_traj, const MazePlayConfig& config,
                           std::uint64_t seed);

// -------------------------------------------------------------- hazard walk

struct HazardWalkConfig {
  int T = 100;
  double fast_reward = 2.0;
  double safe_reward = 1.0;
  double fast_termination_prob = 0.1;
};
void validate(const HazardWalkConfig& config);

inline constexpr int kHazardSafe = 0;
inline constexpr int kHazardFast = 1;

struct MixtureComponent {
  double epsilon = 0.0;  // per-step probability of choosing fast
  double weight = 1.0;
};

// State is the step phase t / T.
class HazardEnv final : public Environment {
 public:
  explicit HazardEnv(HazardWalkConfig config);

  std::string name() const override { return "hazard"; }
  TaskKind task() const override { return TaskKind::kReward; }
  std::size_t state_dim() const override { return 1; }
  std::size_t goal_dim() const override { return 0; }
  std::size_t num_actions() const override { return 2; }
  std::size_t default_max_steps() const override { return static_cast<std::size_t>(config_.T); }
  State reset() override;
  StepResult step(int action, Rng& rng) override;
  bool done() const override { return finished_; }
  bool success(const Trajectory& traj) const override;
  int expert_action(const State&, Rng&) const override { return kHazardSafe; }
  std::unique_ptr<Environment> clone() const override;
  const HazardWalkConfig& config() const { return config_; }

 private:
  HazardWalkConfig config_;
  int t_ = 0;
  bool finished_ = false;
};

std::vector<MixtureComponent> parse_mixture(const std::string& text);  // "0:0.5,1:0.5"
std::string format_mixture(const std::vector<MixtureComponent>& mixture);

Dataset hazard_generate(const HazardWalkConfig& config, const std::vector<MixtureComponent>& mixture,
                        std::size_t n_traj, std::uint64_t seed);

// Moves every trajectory's return onto its final reward.
Dataset delay_rewards(const Dataset& dataset);

// ----------------------------------------------------------- registry/score

// Builds an environment from a name: "chain", "chain:H=<h>,lambda=<l>",
// "maze:<layout>", "hazard", "hazard:T=<t>".
std::unique_ptr<Environment> make_env(const std::string& name);

struct ScoreEndpoints {
  double random_return = 0.0;
  double expert_return = 0.0;
};

// Mean return of the uniform-random and expert policies over `episodes`
// rollouts of default_max_steps().
ScoreEndpoints compute_endpoints(const Environment& env, std::size_t episodes, std::uint64_t seed);

// Endpoints registered by name. Names accepted by make_env are registered on
// first use from 10^4 Monte-Carlo episodes each.
void register_endpoints(const std::string& env_name, ScoreEndpoints endpoints);
ScoreEndpoints endpoints_for(const std::string& env_name);
double normalized_score(const std::string& env_name, double raw_return);

// ------------------------------------------------------------------- files

std::string format_double(double v);
std::string serialize_dataset(const Dataset& dataset);
Dataset parse_dataset(const std::string& text);
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

}  // namespace wayrvs
