#include "wayrvs/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "wayrvs/optim.hpp"

namespace wayrvs {

void validate(const TrainConfig& c) {
  if (c.steps == 0 || c.batch == 0 || c.loss_every == 0) {
    throw std::invalid_argument("train: steps, batch and loss_every must be positive");
  }
  if (!(c.learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be positive");
}

TaskKind dataset_task(const Dataset& dataset) { return make_env(dataset.env_name)->task(); }

ConditionedData condition_dataset(const Dataset& dataset, const ConditioningScheme& scheme, double gamma) {
  const TaskKind task = dataset_task(dataset);
  check_scheme_task(scheme, task);
  ConditionedData out;
  for (const auto& traj : dataset.trajectories) {
    out.phis.push_back(phi_sequence(scheme, traj, training_omega(task, traj, gamma)));
    out.total_steps += traj.length();
  }
  return out;
}

std::vector<WindowRef> sample_windows(const Dataset& dataset, std::size_t count, Rng& rng) {
  // Cumulative step counts; a uniform draw over all steps picks the pair.
  std::vector<std::size_t> offsets;
  std::size_t total = 0;
  for (const auto& t : dataset.trajectories) {
    offsets.push_back(total);
    total += t.length();
  }
  if (total == 0) throw std::invalid_argument("sample_windows: dataset has no transitions");
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  std::vector<WindowRef> out(count);
  for (auto& w : out) {
    const std::size_t flat = pick(rng);
    const auto it = std::upper_bound(offsets.begin(), offsets.end(), flat) - 1;
    w.traj = static_cast<std::size_t>(it - offsets.begin());
    w.end = flat - *it;
  }
  return out;
}

WindowBatch pack_windows(const Dataset& dataset, const ConditionedData& data, const std::vector<WindowRef>& windows,
                         std::size_t context) {
  WindowBatch b;
  b.batch = windows.size();
  for (const auto& w : windows) b.len = std::max(b.len, std::min(w.end + 1, context));
  const std::size_t sdim = dataset.trajectories.at(0).states.at(0).size();
  const std::size_t pdim = data.phis.at(windows.at(0).traj).at(0).size();
  const std::size_t width = sdim + pdim;
  b.tokens.assign(b.batch * b.len * width, 0.0);
  b.actions.assign(b.batch * b.len, 0);
  b.targets.assign(b.batch * b.len, -1);
  for (std::size_t i = 0; i < windows.size(); ++i) {
    const Trajectory& traj = dataset.trajectories.at(windows[i].traj);
    const std::vector<State>& phis = data.phis.at(windows[i].traj);
    const std::size_t len = std::min(windows[i].end + 1, context);
    const std::size_t first = windows[i].end + 1 - len;
    for (std::size_t p = 0; p < len; ++p) {
      const std::size_t t = first + p;
      const std::size_t row = i * b.len + p;
      double* dst = b.tokens.data() + row * width;
      std::copy(traj.states[t].begin(), traj.states[t].end(), dst);
      std::copy(phis[t].begin(), phis[t].end(), dst + sdim);
      b.actions[row] = traj.actions[t];
      b.targets[row] = traj.actions[t];
    }
  }
  return b;
}

PolicyTrainResult train_policy(const Dataset& dataset, WaypointTransformer& model, const ConditioningScheme& scheme,
                               const TrainConfig& config, double gamma) {
  validate(config);
  validate(dataset);
  const ConditionedData data = condition_dataset(dataset, scheme, gamma);
  if (data.total_steps == 0) throw std::invalid_argument("train_policy: dataset has no transitions");
  const std::size_t sdim = dataset.trajectories[0].states[0].size();
  const std::size_t pdim = phi_dim(scheme, sdim);
  if (sdim != model.state_dim() || pdim != model.phi_dim()) {
    throw ShapeError("train_policy: model tokens (" + std::to_string(model.state_dim()) + ", " +
                     std::to_string(model.phi_dim()) + ") vs data (" + std::to_string(sdim) + ", " +
                     std::to_string(pdim) + ")");
  }

  std::vector<double> tokens;
  const std::size_t stride = std::max<std::size_t>(1, data.total_steps / 20000);
  std::size_t counter = 0;
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
    for (std::size_t t = 0; t < dataset.trajectories[i].length(); ++t) {
      if (counter++ % stride != 0) continue;
      tokens.insert(tokens.end(), dataset.trajectories[i].states[t].begin(), dataset.trajectories[i].states[t].end());
      tokens.insert(tokens.end(), data.phis[i][t].begin(), data.phis[i][t].end());
    }
  }
  model.fit_normalization(tokens);

  AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  adam_config.clip_norm = config.clip_norm;
  Adam adam(model.parameters(), adam_config);
  Rng rng(derive_seed(config.seed, 1));
  PolicyTrainResult result;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    const WindowBatch batch = pack_windows(dataset, data, sample_windows(dataset, config.batch, rng),
                                           model.config().context);
    Graph g(Mode::kTrain, derive_seed(config.seed, 1000 + step));
    const std::vector<int> targets = model.expanded_targets(batch);
    Var loss = nll(model.forward(g, batch), targets);
    const double value = loss.value().item();
    if (step == 1) result.initial_loss = value;
    g.backward(loss);
    adam.step();
    if (step % config.loss_every == 0 || step == config.steps) result.loss_curve.push_back({step, value});
  }
  return result;
}

// -------------------------------------------------------------------- chain

ChainMle exact_chain_mle(const ChainMdpConfig& config, std::size_t K, std::size_t n_traj, std::uint64_t seed) {
  validate(config);
  if (K == 0) throw std::invalid_argument("exact_chain_mle: K must be >= 1");
  ChainMle out;
  out.p_global = 1.0 - config.lambda;
  out.p_waypoint = 1.0 / static_cast<double>(K);
  const Dataset ds = chain_generate(config, n_traj, seed);
  std::size_t advance_all = 0;
  std::size_t advance_wp = 0;
  for (const auto& t : ds.trajectories) {
    for (std::size_t i = 0; i < t.length(); ++i) {
      const bool advance = t.actions[i] == kChainAdvance;
      ++out.global_count;
      advance_all += advance;
      // From s(H-1) an advance ends the episode before the K-step window
      // closes, so only interior states carry the closed form.
      const bool interior = t.states[i][0] + 1.0 < static_cast<double>(config.H);
      if (interior && i + K <= t.length() && t.states[i + K][0] == t.states[i][0] + 1.0) {
        ++out.waypoint_count;
        advance_wp += advance;
      }
    }
  }
  out.empirical_global = static_cast<double>(advance_all) / static_cast<double>(out.global_count);
  out.empirical_waypoint =
      out.waypoint_count == 0 ? 0.0 : static_cast<double>(advance_wp) / static_cast<double>(out.waypoint_count);
  return out;
}

// ----------------------------------------------------------------- pipeline

ConditioningScheme evaluation_scheme(const ConditioningScheme& trained, const State& omega, std::size_t horizon,
                                     double gamma) {
  if (const auto* c = std::get_if<ConstantArtgScheme>(&trained)) {
    (void)c;
    return ConstantArtgScheme{omega.at(0) / static_cast<double>(std::max<std::size_t>(horizon, 1))};
  }
  if (std::holds_alternative<MonteCarloCrtgScheme>(trained)) return MonteCarloCrtgScheme{omega.at(0), gamma};
  return trained;
}

namespace {

std::string csv_rmse(const WaypointTrainResult& r) {
  std::ostringstream os;
  os << "step,rmse\n";
  for (const auto& p : r.curve) os << p.step << ',' << format_double(p.rmse) << '\n';
  return os.str();
}

std::string csv_loss(const PolicyTrainResult& r) {
  std::ostringstream os;
  os << "step,loss\n";
  for (const auto& p : r.loss_curve) os << p.step << ',' << format_double(p.loss) << '\n';
  return os.str();
}

}  // namespace

std::optional<WaypointKind> scheme_net_kind(const std::string& name) {
  if (name == "waypoint-goal" || name == "manual-waypoints") return WaypointKind::kGoal;
  if (name == "reward-waypoint") return WaypointKind::kReward;
  return std::nullopt;
}

ConditioningScheme make_scheme(const std::string& name, const PipelineConfig& config, const Environment& env,
                               const std::shared_ptr<WaypointNet>& net) {
  if (scheme_net_kind(name) && !net) throw std::invalid_argument("scheme " + name + " needs a waypoint net");
  if (name == "waypoint-goal") return WaypointGoalScheme{config.K, net};
  if (name == "global-goal") return GlobalGoalScheme{};
  if (name == "manual-waypoints") {
    std::vector<State> w = config.manual_waypoints;
    if (w.empty()) {
      const auto* maze_env = dynamic_cast<const MazeEnv*>(&env);
      if (maze_env == nullptr) throw std::invalid_argument("manual-waypoints needs a maze or a waypoint file");
      w = default_manual_waypoints(maze_env->maze());
    }
    return ManualWaypointsScheme{std::move(w)};
  }
  if (name == "reward-waypoint") return RewardWaypointScheme{net};
  if (name == "constant-artg") return ConstantArtgScheme{};
  if (name == "monte-carlo-crtg") return MonteCarloCrtgScheme{0.0, config.gamma};
  if (name == "oracle-future") return OracleFutureScheme{std::max<std::size_t>(config.K, 1)};
  throw std::invalid_argument("unknown scheme '" + name + "'");
}

PipelineResult pipeline(const Dataset& dataset, const PipelineConfig& config) {
  validate(dataset);
  auto env = make_env(dataset.env_name);
  const TaskKind task = env->task();
  const std::size_t sdim = env->state_dim();
  PipelineResult result;

  // Stage 1: the waypoint net, when the scheme uses one.
  const std::string& name = config.scheme;
  // Manual waypoints reuse the waypoint-goal policy and only replace the net
  // at rollout time.
  const bool manual = name == "manual-waypoints";
  const bool goal_net = name == "waypoint-goal" || manual;
  const bool reward_net = name == "reward-waypoint";
  if (goal_net && config.K == 0) throw std::invalid_argument(name + " needs K >= 1");
  if (goal_net || reward_net) {
    if ((goal_net && task != TaskKind::kGoal) || (reward_net && task != TaskKind::kReward)) {
      throw std::invalid_argument("scheme " + name + " does not fit environment " + dataset.env_name);
    }
    if (config.pretrained_net) {
      const WaypointKind want = goal_net ? WaypointKind::kGoal : WaypointKind::kReward;
      if (config.pretrained_net->kind() != want) throw std::invalid_argument("pretrained net does not fit " + name);
      result.net = config.pretrained_net;
    }
  }
  if ((goal_net || reward_net) && !result.net) {
    WaypointNetConfig nc = config.net;
    nc.K = config.K;
    nc.gamma = config.gamma;
    WaypointTrainConfig tc = config.net_train;
    tc.seed = derive_seed(config.seed, 11);
    if (goal_net) {
      result.net = std::make_shared<WaypointNet>(WaypointKind::kGoal, sdim, sdim, nc, derive_seed(config.seed, 10));
      result.net_curve = train_goal_net(dataset, *result.net, tc);
    } else {
      result.net = std::make_shared<WaypointNet>(WaypointKind::kReward, sdim, 1, nc, derive_seed(config.seed, 10));
      result.net_curve = train_reward_net(dataset, *result.net, tc);
    }
  }

  result.scheme = make_scheme(name, config, *env, result.net);
  check_scheme_task(result.scheme, task);

  // Stage 2: the policy against the frozen net.
  if (result.net) result.net_bytes_before = encode_checkpoint(result.net->checkpoint());
  result.policy = std::make_shared<WaypointTransformer>(sdim, phi_dim(result.scheme, sdim), env->num_actions(),
                                                        config.wt, derive_seed(config.seed, 12));
  TrainConfig train = config.train;
  train.seed = derive_seed(config.seed, 13);
  const ConditioningScheme trained =
      manual ? ConditioningScheme{WaypointGoalScheme{config.K, result.net}} : result.scheme;
  result.policy_curve = train_policy(dataset, *result.policy, trained, train, config.gamma);
  if (result.net) {
    result.net_bytes_after = encode_checkpoint(result.net->checkpoint());
    if (result.net_bytes_after != result.net_bytes_before) {
      throw std::logic_error("pipeline: waypoint net changed during policy training");
    }
  }

  if (config.out_dir) {
    const auto& dir = *config.out_dir;
    const std::string& id = config.run_id;
    if (result.net) {
      const auto path = dir / (id + "." + result.net->prefix() + ".ckpt");
      write_file(path, result.net_bytes_after);
      result.written.push_back(path);
      const auto rmse_path = dir / "metrics" / (id + ".rmse.csv");
      write_file(rmse_path, csv_rmse(result.net_curve));
      result.written.push_back(rmse_path);
    }
    const auto policy_path = dir / (id + ".policy.ckpt");
    save_checkpoint(policy_path, result.policy->checkpoint());
    result.written.push_back(policy_path);
    const auto loss_path = dir / "metrics" / (id + ".loss.csv");
    write_file(loss_path, csv_loss(result.policy_curve));
    result.written.push_back(loss_path);
  }
  return result;
}

}  // namespace wayrvs
