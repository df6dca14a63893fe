#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "wayrvs/envs.hpp"
#include "wayrvs/policy.hpp"
#include "wayrvs/waypoints.hpp"

namespace wayrvs {

struct TrainConfig {
  std::size_t steps = 5000;
  std::size_t batch = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  std::size_t loss_every = 50;
  double clip_norm = 0.0;
};
void validate(const TrainConfig& config);

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
};

struct PolicyTrainResult {
  std::vector<LossPoint> loss_curve;
  double initial_loss = 0.0;  // mean NLL of the first batch before any update
};

// Task kind of a dataset, from its environment name.
TaskKind dataset_task(const Dataset& dataset);

// Pre-computed per-trajectory conditioning used for window sampling.
struct ConditionedData {
  std::vector<std::vector<State>> phis;  // per trajectory, one Phi per step
  std::size_t total_steps = 0;
};
ConditionedData condition_dataset(const Dataset& dataset, const ConditioningScheme& scheme, double gamma = 1.0);

// Window ending at step `end` of trajectory `traj`, at most `context` long.
struct WindowRef {
  std::size_t traj = 0;
  std::size_t end = 0;
};
WindowBatch pack_windows(const Dataset& dataset, const ConditionedData& data, const std::vector<WindowRef>& windows,
                         std::size_t context);
// Uniform over (trajectory, end index) pairs.
std::vector<WindowRef> sample_windows(const Dataset& dataset, std::size_t count, Rng& rng);

PolicyTrainResult train_policy(const Dataset& dataset, WaypointTransformer& model, const ConditioningScheme& scheme,
                               const TrainConfig& config, double gamma = 1.0);

struct ChainMle {
  double p_global = 0.0;    // 1 - lambda
  double p_waypoint = 0.0;  // 1 / K
  double empirical_global = 0.0;
  double empirical_waypoint = 0.0;
  std::size_t global_count = 0;
  std::size_t waypoint_count = 0;
};

// Closed forms plus conditional frequencies counted from generated data:
// P(a2 | s) over all visits and P(a2 | s_t, s_{t+K} = s_t + 1) over states
// s_t < H - 1 whose window ends inside the trajectory.
ChainMle exact_chain_mle(const ChainMdpConfig& config, std::size_t K, std::size_t n_traj = 100000,
                         std::uint64_t seed = 0);

struct PipelineConfig {
  std::string scheme = "waypoint-goal";  // see make_scheme
  std::size_t K = 1;
  double gamma = 1.0;
  WaypointNetConfig net;
  WaypointTrainConfig net_train;
  WTConfig wt;
  TrainConfig train;
  std::uint64_t seed = 0;
  std::vector<State> manual_waypoints;  // empty = layout defaults
  // Skips stage 1 and freezes this net instead (its kind must fit the scheme).
  std::shared_ptr<WaypointNet> pretrained_net;
  std::optional<std::filesystem::path> out_dir;
  std::string run_id = "run";
};

struct PipelineResult {
  std::shared_ptr<WaypointNet> net;  // null when the scheme needs none
  std::shared_ptr<WaypointTransformer> policy;
  ConditioningScheme scheme;
  WaypointTrainResult net_curve;
  PolicyTrainResult policy_curve;
  std::string net_bytes_before;  // waypoint checkpoint around policy training
  std::string net_bytes_after;
  std::vector<std::filesystem::path> written;
};

// Net a named scheme freezes into its policy, if any.
std::optional<WaypointKind> scheme_net_kind(const std::string& name);
// Builds the rollout-time scheme by name: waypoint-goal, global-goal,
// manual-waypoints, reward-waypoint, constant-artg, monte-carlo-crtg,
// oracle-future.
ConditioningScheme make_scheme(const std::string& name, const PipelineConfig& config, const Environment& env,
                               const std::shared_ptr<WaypointNet>& net);

PipelineResult pipeline(const Dataset& dataset, const PipelineConfig& config);

// Scheme to use at evaluation: reward-to-go constants set from omega.
ConditioningScheme evaluation_scheme(const ConditioningScheme& trained, const State& omega, std::size_t horizon,
                                     double gamma = 1.0);

}  // namespace wayrvs
