#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "wayrvs/checkpoint.hpp"
#include "wayrvs/envs.hpp"
#include "wayrvs/layers.hpp"
#include "wayrvs/waypoints.hpp"

namespace wayrvs {

struct WTConfig {
  std::size_t layers = 2;
  std::size_t heads = 16;
  std::size_t embed_dim = 128;
  std::size_t context = 20;
  double dropout_attn = 0.15;
  double dropout_resid = 0.15;
  double dropout_embd = 0.0;
  bool action_conditioning = false;
};
void validate(const WTConfig& config);

// Conditioning variants. Training-time Phi always comes from the stored
// trajectory; the theta constants only apply at evaluation.
struct WaypointGoalScheme {
  std::size_t K = 1;
  std::shared_ptr<const WaypointNet> net;
};
struct GlobalGoalScheme {};
struct ConstantArtgScheme {
  double theta_a = 1.0;
};
struct MonteCarloCrtgScheme {
  double theta_c = 0.0;
  double gamma = 1.0;
};
struct RewardWaypointScheme {
  std::shared_ptr<const WaypointNet> net;
};
struct ManualWaypointsScheme {
  std::vector<State> waypoints;
};
// Phi_t = s_{min(t+K, T)} read from the trajectory itself; a training-only
// probe (there is no future at evaluation time).
struct OracleFutureScheme {
  std::size_t K = 1;
};

using ConditioningScheme = std::variant<WaypointGoalScheme, GlobalGoalScheme, ConstantArtgScheme,
                                        MonteCarloCrtgScheme, RewardWaypointScheme, ManualWaypointsScheme,
                                        OracleFutureScheme>;

std::string scheme_name(const ConditioningScheme& scheme);
TaskKind scheme_task(const ConditioningScheme& scheme);
std::size_t phi_dim(const ConditioningScheme& scheme, std::size_t state_dim);
// Throws std::invalid_argument on a goal scheme for a reward task or back.
void check_scheme_task(const ConditioningScheme& scheme, TaskKind task);

// omega of a stored trajectory: final state for goal tasks, total return for
// reward tasks.
State training_omega(TaskKind task, const Trajectory& traj, double gamma = 1.0);

// Phi_0..Phi_{T-1} for a stored trajectory.
std::vector<State> phi_sequence(const ConditioningScheme& scheme, const Trajectory& traj, const State& omega);

// A live episode: states s_0..s_t, actions and rewards up to t-1, and the Phi
// already fed to the policy.
struct History {
  std::vector<State> states;
  std::vector<int> actions;
  std::vector<double> rewards;
  std::vector<State> phis;
};

// Evaluation-time Phi_t for the live history.
State make_phi(const ConditioningScheme& scheme, const History& history, std::size_t t, const State& omega);

// Windows packed for one forward pass; windows shorter than `len` are padded
// at the end and their padded targets are -1.
struct WindowBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<double> tokens;  // batch * len * (state_dim + phi_dim)
  std::vector<int> actions;    // batch * len, conditioning input (padding 0)
  std::vector<int> targets;    // batch * len, -1 = ignored
};

enum class ActMode { kSample, kArgmax };
ActMode parse_act_mode(const std::string& text);

class WaypointTransformer {
 public:
  WaypointTransformer(std::size_t state_dim, std::size_t phi_dim, std::size_t num_actions, WTConfig config,
                      std::uint64_t seed);

  const WTConfig& config() const { return config_; }
  std::size_t state_dim() const { return state_dim_; }
  std::size_t phi_dim() const { return phi_dim_; }
  std::size_t num_actions() const { return num_actions_; }

  // Logits (batch * positions, |A|). With action conditioning the stream
  // interleaves state and action tokens, so positions = 2 * len and only the
  // state-token rows carry targets.
  Var forward(Graph& g, const WindowBatch& batch);
  // Token-position targets matching forward()'s row layout.
  std::vector<int> expanded_targets(const WindowBatch& batch) const;

  // Evaluation-mode logits (len, |A|) for one window.
  Tensor window_logits(const std::vector<State>& states, const std::vector<State>& phis,
                       const std::vector<int>& actions = {});
  // Action distribution at the final position of a window.
  std::vector<double> action_probs(const std::vector<State>& states, const std::vector<State>& phis,
                                   const std::vector<int>& actions = {});

  void fit_normalization(const std::vector<double>& tokens);
  std::vector<NamedParam> parameters();
  std::vector<NamedTensor> checkpoint();
  void load(const std::vector<NamedTensor>& tensors);
  std::size_t parameter_count();

  Linear& head() { return head_; }

 private:
  struct Block {
    LayerNorm ln1;
    Linear qkv;
    Linear proj;
    LayerNorm ln2;
    Linear ff1;
    Linear ff2;
  };

  std::size_t state_dim_;
  std::size_t phi_dim_;
  std::size_t num_actions_;
  WTConfig config_;
  Linear in_proj_;
  Embedding positions_;
  Embedding action_embedding_;
  std::vector<Block> blocks_;
  LayerNorm ln_f_;
  Linear head_;
  Tensor in_mean_;
  Tensor in_std_;
};

// Action distribution at the newest step; appends Phi_t to the history when
// missing.
std::vector<double> act_probs(WaypointTransformer& model, const ConditioningScheme& scheme, History& history,
                              const State& omega);

// Computes Phi_t (appending it to history.phis), builds the last-k window and
// picks an action from the final position.
int act(WaypointTransformer& model, const ConditioningScheme& scheme, History& history, const State& omega,
        ActMode mode, Rng& rng);

}  // namespace wayrvs
