#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "wayrvs/checkpoint.hpp"
#include "wayrvs/envs.hpp"
#include "wayrvs/layers.hpp"

namespace wayrvs {

// How the goal-net training target omega is relabeled in hindsight.
enum class Hindsight { kUniformFuture, kFinalState };
std::string to_string(Hindsight h);
Hindsight parse_hindsight(const std::string& text);  // "uniform-future" | "final-state"

struct RewardTargetConfig {
  double gamma = 1.0;
};
void validate(const RewardTargetConfig& config);

struct GoalSample {
  State state;
  State omega;
  State target;
};

// Input (s_t, omega) and target s_{min(t+K, T)}. Goals are states: every
// goal task here projects states onto goals by identity.
GoalSample goal_targets(const Trajectory& traj, std::size_t t, std::size_t K, Rng& rng,
                        Hindsight hindsight = Hindsight::kUniformFuture);

struct RewardToGo {
  double artg = 0.0;
  double crtg = 0.0;
};

// CRTG = sum_{t'>=t} gamma^(t'-t) r_t'; ARTG = CRTG / max(T - t, 1).
RewardToGo reward_targets(const Trajectory& traj, std::size_t t, const RewardTargetConfig& config = {});

enum class WaypointKind { kGoal, kReward };

struct WaypointNetConfig {
  std::size_t hidden = 256;
  std::size_t hidden_layers = 3;
  std::size_t K = 1;  // goal nets only
  Hindsight hindsight = Hindsight::kUniformFuture;
  double gamma = 1.0;  // reward nets only
};

// Feed-forward W_phi with fixed input/output standardisation buffers. The
// buffers are fitted from the training data on the first training step and
// travel with the weights in checkpoints.
class WaypointNet {
 public:
  WaypointNet(WaypointKind kind, std::size_t state_dim, std::size_t omega_dim, WaypointNetConfig config,
              std::uint64_t seed);

  WaypointKind kind() const { return kind_; }
  const WaypointNetConfig& config() const { return config_; }
  std::size_t state_dim() const { return state_dim_; }
  std::size_t omega_dim() const { return omega_dim_; }
  std::size_t out_dim() const { return mlp_.out_features(); }
  std::string prefix() const { return kind_ == WaypointKind::kGoal ? "goalnet" : "rewardnet"; }

  // Pure evaluation-mode queries. Batch rows are concat(s, omega).
  Tensor predict(const Tensor& inputs) const;
  State predict(const State& s, const State& omega) const;

  // Graph forward in normalised output space, used by training.
  Var forward_normalized(Var inputs);
  Tensor normalize_inputs(const Tensor& inputs) const;
  Tensor normalize_outputs(const Tensor& outputs) const;
  void fit_normalization(const Tensor& inputs, const Tensor& outputs);

  std::vector<NamedParam> parameters();
  std::vector<NamedTensor> checkpoint() const;
  void load(const std::vector<NamedTensor>& tensors);
  std::size_t parameter_count();

 private:
  WaypointKind kind_;
  std::size_t state_dim_;
  std::size_t omega_dim_;
  WaypointNetConfig config_;
  Mlp mlp_;
  Tensor in_mean_;
  Tensor in_std_;
  Tensor out_mean_;
  Tensor out_std_;
};

struct WaypointTrainConfig {
  std::size_t steps = 3000;
  std::size_t batch = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t eval_every = 250;
  double holdout_fraction = 0.1;
};

struct RmsePoint {
  std::size_t step = 0;
  double rmse = 0.0;
};

struct WaypointTrainResult {
  std::vector<RmsePoint> curve;  // held-out RMSE in raw target units, from step 0
  double initial_rmse() const { return curve.front().rmse; }
  double final_rmse() const { return curve.back().rmse; }
};

// Train/held-out split by trajectory; returns (train indices, held-out indices).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_trajectories(std::size_t count, double holdout,
                                                                                 std::uint64_t seed);

WaypointTrainResult train_goal_net(const Dataset& dataset, WaypointNet& net, const WaypointTrainConfig& config);
WaypointTrainResult train_reward_net(const Dataset& dataset, WaypointNet& net, const WaypointTrainConfig& config);

// Nearest waypoint to s_t among those no farther from omega than s_t;
// omega itself when there is none.
State select_manual_waypoint(const std::vector<State>& waypoints, const State& s, const State& omega);
std::vector<State> load_manual_waypoints(const std::filesystem::path& path);
// Hand-picked turn and midpoint cells for a named maze layout, encoded.
std::vector<State> default_manual_waypoints(const GridMaze& maze);

double euclidean(const State& a, const State& b);

}  // namespace wayrvs
