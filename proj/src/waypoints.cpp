#include "wayrvs/waypoints.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "wayrvs/optim.hpp"

namespace wayrvs {

std::string to_string(Hindsight h) {
  return h == Hindsight::kUniformFuture ? "uniform-future" : "final-state";
}

Hindsight parse_hindsight(const std::string& text) {
  if (text == "uniform-future") return Hindsight::kUniformFuture;
  if (text == "final-state") return Hindsight::kFinalState;
  throw std::invalid_argument("unknown hindsight mode '" + text + "'");
}

void validate(const RewardTargetConfig& config) {
  if (!(config.gamma > 0.0 && config.gamma <= 1.0)) throw std::invalid_argument("gamma must lie in (0, 1]");
}

GoalSample goal_targets(const Trajectory& traj, std::size_t t, std::size_t K, Rng& rng, Hindsight hindsight) {
  const std::size_t T = traj.length();
  if (t > T || (t == T && T > 0)) {
    throw std::out_of_range("goal_targets: t=" + std::to_string(t) + " outside trajectory of length " +
                            std::to_string(T));
  }
  const std::size_t ahead = std::min(t + K, T);
  std::size_t h = T;
  if (hindsight == Hindsight::kUniformFuture) {
    std::uniform_int_distribution<std::size_t> pick(ahead, T);
    h = pick(rng);
  }
  return {traj.states[t], traj.states[h], traj.states[ahead]};
}

RewardToGo reward_targets(const Trajectory& traj, std::size_t t, const RewardTargetConfig& config) {
  validate(config);
  const std::size_t T = traj.length();
  if (t > T) throw std::out_of_range("reward_targets: t beyond the trajectory");
  double crtg = 0.0;
  double discount = 1.0;
  for (std::size_t k = t; k < T; ++k) {
    crtg += discount * traj.rewards[k];
    discount *= config.gamma;
  }
  return {crtg / static_cast<double>(std::max<std::size_t>(T - t, 1)), crtg};
}

// ------------------------------------------------------------------ network

WaypointNet::WaypointNet(WaypointKind kind, std::size_t state_dim, std::size_t omega_dim, WaypointNetConfig config,
                         std::uint64_t seed)
    : kind_(kind), state_dim_(state_dim), omega_dim_(omega_dim), config_(config) {
  if (config_.K == 0 && kind_ == WaypointKind::kGoal) throw std::invalid_argument("goal net: K must be >= 1");
  if (config_.hidden == 0) throw std::invalid_argument("waypoint net: hidden width must be >= 1");
  const std::size_t out = kind_ == WaypointKind::kGoal ? state_dim : 2;
  Rng rng(seed);
  mlp_ = Mlp(state_dim + omega_dim, config_.hidden, config_.hidden_layers, out, rng);
  in_mean_ = Tensor(Shape{state_dim + omega_dim}, 0.0);
  in_std_ = Tensor(Shape{state_dim + omega_dim}, 1.0);
  out_mean_ = Tensor(Shape{out}, 0.0);
  out_std_ = Tensor(Shape{out}, 1.0);
}

namespace {

void standardize(Tensor& x, const Tensor& mean, const Tensor& std) {
  for (std::size_t r = 0; r < x.rows(); ++r) {
    for (std::size_t c = 0; c < x.cols(); ++c) x.at(r, c) = (x.at(r, c) - mean[c]) / std[c];
  }
}

void column_stats(const Tensor& x, Tensor& mean, Tensor& std) {
  const auto n = static_cast<double>(x.rows());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) m += x.at(r, c);
    m /= n;
    double v = 0.0;
    for (std::size_t r = 0; r < x.rows(); ++r) v += (x.at(r, c) - m) * (x.at(r, c) - m);
    const double s = std::sqrt(v / n);
    mean[c] = m;
    std[c] = s > 1e-8 ? s : 1.0;  // constant features pass through unscaled
  }
}

}  // namespace

Tensor WaypointNet::normalize_inputs(const Tensor& inputs) const {
  Tensor x = inputs;
  standardize(x, in_mean_, in_std_);
  return x;
}

Tensor WaypointNet::normalize_outputs(const Tensor& outputs) const {
  Tensor y = outputs;
  standardize(y, out_mean_, out_std_);
  return y;
}

void WaypointNet::fit_normalization(const Tensor& inputs, const Tensor& outputs) {
  column_stats(inputs, in_mean_, in_std_);
  column_stats(outputs, out_mean_, out_std_);
}

Tensor WaypointNet::predict(const Tensor& inputs) const {
  if (inputs.cols() != state_dim_ + omega_dim_) {
    throw ShapeError(prefix() + ": input shape " + shape_str(inputs.shape()) + " vs expected width " +
                     std::to_string(state_dim_ + omega_dim_));
  }
  Tensor y = mlp_.infer(normalize_inputs(inputs));
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t c = 0; c < y.cols(); ++c) y.at(r, c) = y.at(r, c) * out_std_[c] + out_mean_[c];
  }
  return y;
}

State WaypointNet::predict(const State& s, const State& omega) const {
  if (s.size() != state_dim_ || omega.size() != omega_dim_) {
    throw ShapeError(prefix() + ": query dims (" + std::to_string(s.size()) + ", " + std::to_string(omega.size()) +
                     ") vs (" + std::to_string(state_dim_) + ", " + std::to_string(omega_dim_) + ")");
  }
  std::vector<double> row(s);
  row.insert(row.end(), omega.begin(), omega.end());
  const std::size_t width = row.size();
  const Tensor y = predict(Tensor(Shape{1, width}, std::move(row)));
  return {y.values().begin(), y.values().end()};
}

Var WaypointNet::forward_normalized(Var inputs) { return mlp_(inputs); }

std::vector<NamedParam> WaypointNet::parameters() {
  std::vector<NamedParam> out;
  mlp_.collect(prefix(), out);
  return out;
}

std::vector<NamedTensor> WaypointNet::checkpoint() const {
  std::vector<NamedTensor> out;
  const auto& layers = mlp_.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string base = prefix() + ".fc" + std::to_string(i);
    out.push_back({base + ".weight", layers[i].weight()});
    out.push_back({base + ".bias", layers[i].bias()});
  }
  out.push_back({prefix() + ".in_mean", in_mean_});
  out.push_back({prefix() + ".in_std", in_std_});
  out.push_back({prefix() + ".out_mean", out_mean_});
  out.push_back({prefix() + ".out_std", out_std_});
  for (auto& t : out) t.tensor.clear_grad();
  return out;
}

void WaypointNet::load(const std::vector<NamedTensor>& tensors) {
  std::vector<NamedParam> dest = parameters();
  dest.push_back({prefix() + ".in_mean", &in_mean_});
  dest.push_back({prefix() + ".in_std", &in_std_});
  dest.push_back({prefix() + ".out_mean", &out_mean_});
  dest.push_back({prefix() + ".out_std", &out_std_});
  assign_parameters(tensors, dest);
}

std::size_t WaypointNet::parameter_count() { return count_parameters(parameters()); }

// ----------------------------------------------------------------- training

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_trajectories(std::size_t count, double holdout,
                                                                                 std::uint64_t seed) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5917));
  std::shuffle(order.begin(), order.end(), rng);
  auto held = static_cast<std::size_t>(std::round(holdout * static_cast<double>(count)));
  if (count >= 2) held = std::clamp<std::size_t>(held, 1, count - 1);
  else held = 0;
  std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(held));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(held), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  // A single trajectory is both trained on and evaluated.
  if (test.empty()) test = train;
  return {train, test};
}

namespace {

struct Pair {
  std::size_t traj;
  std::size_t t;
};

std::vector<Pair> step_pairs(const Dataset& ds, const std::vector<std::size_t>& trajs) {
  std::vector<Pair> out;
  for (std::size_t i : trajs) {
    for (std::size_t t = 0; t < ds.trajectories[i].length(); ++t) out.push_back({i, t});
  }
  return out;
}

// Produces one (input row, target row) for a step pair.
using SampleFn = std::function<void(const Pair&, Rng&, std::vector<double>&, std::vector<double>&)>;

void build_batch(const std::vector<Pair>& pairs, std::span<const std::size_t> picks, const SampleFn& sample, Rng& rng,
                 std::size_t in_dim, std::size_t out_dim, Tensor& x, Tensor& y) {
  x = Tensor(Shape{picks.size(), in_dim});
  y = Tensor(Shape{picks.size(), out_dim});
  std::vector<double> in;
  std::vector<double> out;
  for (std::size_t b = 0; b < picks.size(); ++b) {
    in.clear();
    out.clear();
    sample(pairs[picks[b]], rng, in, out);
    std::copy(in.begin(), in.end(), x.data() + b * in_dim);
    std::copy(out.begin(), out.end(), y.data() + b * out_dim);
  }
}

double rmse(const WaypointNet& net, const Tensor& x, const Tensor& y) {
  const Tensor p = net.predict(x);
  double total = 0.0;
  for (std::size_t i = 0; i < p.numel(); ++i) total += (p[i] - y[i]) * (p[i] - y[i]);
  return std::sqrt(total / static_cast<double>(p.numel()));
}

WaypointTrainResult train_net(const Dataset& dataset, WaypointNet& net, const WaypointTrainConfig& config,
                              const SampleFn& sample) {
  if (dataset.trajectories.empty()) throw std::invalid_argument(net.prefix() + ": empty dataset");
  if (config.batch == 0) throw std::invalid_argument(net.prefix() + ": batch must be >= 1");
  const std::size_t in_dim = net.state_dim() + net.omega_dim();
  const std::size_t out_dim = net.out_dim();
  auto [train, test] = split_trajectories(dataset.trajectories.size(), config.holdout_fraction, config.seed);
  const std::vector<Pair> train_pairs = step_pairs(dataset, train);
  std::vector<Pair> test_pairs = step_pairs(dataset, test);
  if (train_pairs.empty()) throw std::invalid_argument(net.prefix() + ": dataset has no transitions");

  Rng rng(derive_seed(config.seed, 1));
  Rng eval_rng(derive_seed(config.seed, 2));
  constexpr std::size_t kMaxEval = 4000;
  if (test_pairs.size() > kMaxEval) {
    std::shuffle(test_pairs.begin(), test_pairs.end(), eval_rng);
    test_pairs.resize(kMaxEval);
  }
  std::vector<std::size_t> all_test(test_pairs.size());
  std::iota(all_test.begin(), all_test.end(), std::size_t{0});
  Tensor test_x;
  Tensor test_y;
  build_batch(test_pairs, all_test, sample, eval_rng, in_dim, out_dim, test_x, test_y);

  WaypointTrainResult result;
  if (config.steps == 0) {
    result.curve.push_back({0, rmse(net, test_x, test_y)});
    return result;
  }

  std::uniform_int_distribution<std::size_t> pick(0, train_pairs.size() - 1);
  {
    std::vector<std::size_t> fit(std::min<std::size_t>(4096, std::max<std::size_t>(train_pairs.size(), 256)));
    for (auto& f : fit) f = pick(rng);
    Tensor fx;
    Tensor fy;
    build_batch(train_pairs, fit, sample, rng, in_dim, out_dim, fx, fy);
    net.fit_normalization(fx, fy);
  }
  result.curve.push_back({0, rmse(net, test_x, test_y)});

  AdamConfig adam_config;
  adam_config.learning_rate = config.learning_rate;
  Adam adam(net.parameters(), adam_config);
  std::vector<std::size_t> picks(config.batch);
  Tensor x;
  Tensor y;
  for (std::size_t step = 1; step <= config.steps; ++step) {
    for (auto& p : picks) p = pick(rng);
    build_batch(train_pairs, picks, sample, rng, in_dim, out_dim, x, y);
    Graph g(Mode::kTrain);
    Var loss = mse(net.forward_normalized(g.constant(net.normalize_inputs(x))), g.constant(net.normalize_outputs(y)));
    g.backward(loss);
    adam.step();
    if (step % config.eval_every == 0 || step == config.steps) {
      result.curve.push_back({step, rmse(net, test_x, test_y)});
    }
  }
  return result;
}

}  // namespace

WaypointTrainResult train_goal_net(const Dataset& dataset, WaypointNet& net, const WaypointTrainConfig& config) {
  if (net.kind() != WaypointKind::kGoal) throw std::invalid_argument("train_goal_net: not a goal net");
  if (!dataset.trajectories.empty() && dataset.trajectories[0].states[0].size() != net.state_dim()) {
    throw ShapeError("train_goal_net: dataset state dim differs from the net");
  }
  const std::size_t K = net.config().K;
  const Hindsight hindsight = net.config().hindsight;
  auto sample = [&](const Pair& p, Rng& rng, std::vector<double>& in, std::vector<double>& out) {
    const GoalSample g = goal_targets(dataset.trajectories[p.traj], p.t, K, rng, hindsight);
    in.insert(in.end(), g.state.begin(), g.state.end());
    in.insert(in.end(), g.omega.begin(), g.omega.end());
    out.insert(out.end(), g.target.begin(), g.target.end());
  };
  return train_net(dataset, net, config, sample);
}

WaypointTrainResult train_reward_net(const Dataset& dataset, WaypointNet& net, const WaypointTrainConfig& config) {
  if (net.kind() != WaypointKind::kReward) throw std::invalid_argument("train_reward_net: not a reward net");
  if (net.omega_dim() != 1) throw ShapeError("train_reward_net: omega must be the scalar return");
  if (!dataset.trajectories.empty() && dataset.trajectories[0].states[0].size() != net.state_dim()) {
    throw ShapeError("train_reward_net: dataset state dim differs from the net");
  }
  const RewardTargetConfig rc{net.config().gamma};
  std::vector<double> omegas;
  for (const auto& t : dataset.trajectories) omegas.push_back(t.total_return(rc.gamma));
  auto sample = [&](const Pair& p, Rng&, std::vector<double>& in, std::vector<double>& out) {
    const Trajectory& traj = dataset.trajectories[p.traj];
    const RewardToGo r = reward_targets(traj, p.t, rc);
    in.insert(in.end(), traj.states[p.t].begin(), traj.states[p.t].end());
    in.push_back(omegas[p.traj]);
    out.push_back(r.artg);
    out.push_back(r.crtg);
  };
  return train_net(dataset, net, config, sample);
}

// ---------------------------------------------------------------- manual

double euclidean(const State& a, const State& b) {
  if (a.size() != b.size()) throw ShapeError("euclidean: dimension mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

State select_manual_waypoint(const std::vector<State>& waypoints, const State& s, const State& omega) {
  if (waypoints.empty()) throw std::invalid_argument("select_manual_waypoint: empty waypoint set");
  const double limit = euclidean(s, omega);
  const State* best = nullptr;
  double best_dist = 0.0;
  for (const State& w : waypoints) {
    if (euclidean(w, omega) > limit) continue;
    const double d = euclidean(w, s);
    if (best == nullptr || d < best_dist) {
      best = &w;
      best_dist = d;
    }
  }
  return best == nullptr ? omega : *best;
}

std::vector<State> load_manual_waypoints(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open waypoint file " + path.string());
  std::vector<State> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::stringstream ss(line);
    std::string field;
    State w;
    while (std::getline(ss, field, ',')) w.push_back(std::stod(field));
    if (w.size() != 2) throw std::runtime_error("waypoint file: expected x,y in '" + line + "'");
    out.push_back(std::move(w));
  }
  if (out.empty()) throw std::runtime_error("waypoint file: no waypoints");
  return out;
}

std::vector<State> default_manual_waypoints(const GridMaze& maze) {
  // Points sit half a cell past each turn so no cell centre coincides with
  // one; an agent standing on a waypoint would otherwise be handed its own
  // position as the target.
  std::vector<std::pair<double, double>> points;
  if (maze.name == "stitch-7x9") {
    points = {{1.0, 3.5}, {1.5, 5.0}, {3.0, 5.5}, {3.5, 7.0}};
  } else if (maze.name == "open-5x5") {
    points = {{2.5, 2.5}};
  } else {
    throw std::invalid_argument("no manual waypoints for layout '" + maze.name + "'");
  }
  std::vector<State> out;
  for (const auto& [r, c] : points) out.push_back({r / (maze.height - 1), c / (maze.width - 1)});
  return out;
}

}  // namespace wayrvs
