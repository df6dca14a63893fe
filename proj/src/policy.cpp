#include "wayrvs/policy.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace wayrvs {

void validate(const WTConfig& c) {
  if (c.layers == 0) throw std::invalid_argument("wt: layers must be >= 1");
  if (c.heads == 0 || c.embed_dim == 0 || c.embed_dim % c.heads != 0) {
    throw std::invalid_argument("wt: embed_dim must be a positive multiple of heads");
  }
  if (c.context == 0) throw std::invalid_argument("wt: context must be >= 1");
  for (double p : {c.dropout_attn, c.dropout_resid, c.dropout_embd}) {
    if (p < 0.0 || p >= 1.0) throw std::invalid_argument("wt: dropout must lie in [0, 1)");
  }
}

// ------------------------------------------------------------------ schemes

namespace {

template <class... Fs>
struct Overload : Fs... {
  using Fs::operator()...;
};
template <class... Fs>
Overload(Fs...) -> Overload<Fs...>;

State net_query(const WaypointNet& net, const State& s, const State& omega) { return net.predict(s, omega); }

const WaypointNet& require_net(const std::shared_ptr<const WaypointNet>& net, const char* who) {
  if (!net) throw std::invalid_argument(std::string(who) + ": waypoint net missing");
  return *net;
}

double attained(const std::vector<double>& rewards, std::size_t t, double gamma) {
  double total = 0.0;
  double discount = 1.0;
  for (std::size_t k = 0; k < t; ++k) {
    total += discount * rewards[k];
    discount *= gamma;
  }
  return total;
}

}  // namespace

std::string scheme_name(const ConditioningScheme& scheme) {
  return std::visit(Overload{
                        [](const WaypointGoalScheme& s) { return "waypoint-goal:K=" + std::to_string(s.K); },
                        [](const GlobalGoalScheme&) { return std::string("global-goal"); },
                        [](const ConstantArtgScheme&) { return std::string("constant-artg"); },
                        [](const MonteCarloCrtgScheme&) { return std::string("monte-carlo-crtg"); },
                        [](const RewardWaypointScheme&) { return std::string("reward-waypoint"); },
                        [](const ManualWaypointsScheme&) { return std::string("manual-waypoints"); },
                        [](const OracleFutureScheme& s) { return "oracle-future:K=" + std::to_string(s.K); },
                    },
                    scheme);
}

TaskKind scheme_task(const ConditioningScheme& scheme) {
  switch (scheme.index()) {
    case 2:
    case 3:
    case 4:
      return TaskKind::kReward;
    default:
      return TaskKind::kGoal;
  }
}

std::size_t phi_dim(const ConditioningScheme& scheme, std::size_t state_dim) {
  if (std::holds_alternative<RewardWaypointScheme>(scheme)) return 2;
  return scheme_task(scheme) == TaskKind::kReward ? 1 : state_dim;
}

void check_scheme_task(const ConditioningScheme& scheme, TaskKind task) {
  if (scheme_task(scheme) != task) {
    throw std::invalid_argument("scheme " + scheme_name(scheme) + " does not fit a " +
                                (task == TaskKind::kGoal ? "goal" : "reward") + " task");
  }
}

State training_omega(TaskKind task, const Trajectory& traj, double gamma) {
  if (task == TaskKind::kGoal) return traj.states.back();
  return {traj.total_return(gamma)};
}

std::vector<State> phi_sequence(const ConditioningScheme& scheme, const Trajectory& traj, const State& omega) {
  const std::size_t T = traj.length();
  std::vector<State> out;
  out.reserve(T);
  auto batch_net = [&](const WaypointNet& net) {
    if (T == 0) return;
    const std::size_t width = net.state_dim() + net.omega_dim();
    Tensor rows(Shape{T, width});
    for (std::size_t t = 0; t < T; ++t) {
      if (traj.states[t].size() + omega.size() != width) throw ShapeError("phi_sequence: query width mismatch");
      std::copy(traj.states[t].begin(), traj.states[t].end(), rows.data() + t * width);
      std::copy(omega.begin(), omega.end(), rows.data() + t * width + traj.states[t].size());
    }
    const Tensor y = net.predict(rows);
    for (std::size_t t = 0; t < T; ++t) {
      out.emplace_back(y.data() + t * y.cols(), y.data() + (t + 1) * y.cols());
    }
  };
  std::visit(Overload{
                 [&](const WaypointGoalScheme& s) { batch_net(require_net(s.net, "waypoint-goal")); },
                 [&](const GlobalGoalScheme&) { out.assign(T, omega); },
                 [&](const ConstantArtgScheme&) {
                   for (std::size_t t = 0; t < T; ++t) out.push_back({reward_targets(traj, t).artg});
                 },
                 [&](const MonteCarloCrtgScheme& s) {
                   for (std::size_t t = 0; t < T; ++t) out.push_back({omega.at(0) - attained(traj.rewards, t, s.gamma)});
                 },
                 [&](const RewardWaypointScheme& s) { batch_net(require_net(s.net, "reward-waypoint")); },
                 [&](const ManualWaypointsScheme& s) {
                   for (std::size_t t = 0; t < T; ++t) out.push_back(select_manual_waypoint(s.waypoints, traj.states[t], omega));
                 },
                 [&](const OracleFutureScheme& s) {
                   for (std::size_t t = 0; t < T; ++t) out.push_back(traj.states[std::min(t + s.K, T)]);
                 },
             },
             scheme);
  return out;
}

State make_phi(const ConditioningScheme& scheme, const History& history, std::size_t t, const State& omega) {
  if (t >= history.states.size()) throw std::out_of_range("make_phi: t beyond the history");
  if (history.rewards.size() < t) throw std::invalid_argument("make_phi: rewards up to t are required");
  const State& s = history.states[t];
  return std::visit(Overload{
                        [&](const WaypointGoalScheme& w) { return net_query(require_net(w.net, "waypoint-goal"), s, omega); },
                        [&](const GlobalGoalScheme&) { return omega; },
                        [&](const ConstantArtgScheme& c) { return State{c.theta_a}; },
                        [&](const MonteCarloCrtgScheme& m) {
                          return State{m.theta_c - attained(history.rewards, t, m.gamma)};
                        },
                        [&](const RewardWaypointScheme& r) { return net_query(require_net(r.net, "reward-waypoint"), s, omega); },
                        [&](const ManualWaypointsScheme& m) { return select_manual_waypoint(m.waypoints, s, omega); },
                        [&](const OracleFutureScheme&) -> State {
                          throw std::invalid_argument("oracle-future: no future states at evaluation time");
                        },
                    },
                    scheme);
}

ActMode parse_act_mode(const std::string& text) {
  if (text == "sample") return ActMode::kSample;
  if (text == "argmax") return ActMode::kArgmax;
  throw std::invalid_argument("unknown action mode '" + text + "'");
}

// -------------------------------------------------------------- transformer

WaypointTransformer::WaypointTransformer(std::size_t state_dim, std::size_t phi_dim, std::size_t num_actions,
                                         WTConfig config, std::uint64_t seed)
    : state_dim_(state_dim), phi_dim_(phi_dim), num_actions_(num_actions), config_(config) {
  validate(config_);
  if (num_actions_ < 2) throw std::invalid_argument("wt: need at least two actions");
  Rng rng(seed);
  const std::size_t d = config_.embed_dim;
  const std::size_t positions = config_.action_conditioning ? 2 * config_.context : config_.context;
  in_proj_ = Linear(state_dim + phi_dim, d, rng);
  positions_ = Embedding(positions, d, rng);
  if (config_.action_conditioning) action_embedding_ = Embedding(num_actions, d, rng);
  for (std::size_t i = 0; i < config_.layers; ++i) {
    blocks_.push_back(Block{LayerNorm(d), Linear(d, 3 * d, rng), Linear(d, d, rng), LayerNorm(d),
                            Linear(d, 4 * d, rng), Linear(4 * d, d, rng)});
  }
  ln_f_ = LayerNorm(d);
  head_ = Linear(d, num_actions, rng);
  in_mean_ = Tensor(Shape{state_dim + phi_dim}, 0.0);
  in_std_ = Tensor(Shape{state_dim + phi_dim}, 1.0);
}

std::vector<int> WaypointTransformer::expanded_targets(const WindowBatch& batch) const {
  if (!config_.action_conditioning) return batch.targets;
  std::vector<int> out(2 * batch.targets.size(), -1);
  for (std::size_t i = 0; i < batch.targets.size(); ++i) out[2 * i] = batch.targets[i];
  return out;
}

Var WaypointTransformer::forward(Graph& g, const WindowBatch& batch) {
  const std::size_t width = state_dim_ + phi_dim_;
  if (batch.len == 0 || batch.len > config_.context) {
    throw std::invalid_argument("wt: window length " + std::to_string(batch.len) + " outside [1, " +
                                std::to_string(config_.context) + "]");
  }
  if (batch.tokens.size() != batch.batch * batch.len * width) {
    throw ShapeError("wt: token buffer of " + std::to_string(batch.tokens.size()) + " values vs [" +
                     std::to_string(batch.batch) + ", " + std::to_string(batch.len) + ", " + std::to_string(width) +
                     "]");
  }
  const std::size_t rows = batch.batch * batch.len;
  Tensor x(Shape{rows, width}, batch.tokens);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < width; ++c) x.at(r, c) = (x.at(r, c) - in_mean_[c]) / in_std_[c];
  }
  const std::size_t d = config_.embed_dim;
  Var h = in_proj_(g.constant(std::move(x)));
  std::size_t seq = batch.len;
  if (config_.action_conditioning) {
    if (batch.actions.size() != rows) throw ShapeError("wt: action buffer does not match the windows");
    std::vector<std::size_t> ids(rows);
    for (std::size_t i = 0; i < rows; ++i) {
      if (batch.actions[i] < 0 || static_cast<std::size_t>(batch.actions[i]) >= num_actions_) {
        throw std::invalid_argument("wt: action index out of range");
      }
      ids[i] = static_cast<std::size_t>(batch.actions[i]);
    }
    // Row-major [h_i | e_i] viewed as two rows interleaves the streams.
    std::vector<Var> parts{h, action_embedding_(g, ids)};
    h = reshape(concat(parts), Shape{2 * rows, d});
    seq = 2 * batch.len;
  }
  std::vector<std::size_t> pos(batch.batch * seq);
  for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i % seq;
  h = dropout(add(h, positions_(g, pos)), config_.dropout_embd);
  for (Block& b : blocks_) {
    Var a = causal_attention(b.qkv(b.ln1(h)), batch.batch, seq, config_.heads, config_.dropout_attn);
    h = add(h, dropout(b.proj(a), config_.dropout_resid));
    Var f = b.ff2(relu(b.ff1(b.ln2(h))));
    h = add(h, dropout(f, config_.dropout_resid));
  }
  return head_(ln_f_(h));
}

Tensor WaypointTransformer::window_logits(const std::vector<State>& states, const std::vector<State>& phis,
                                          const std::vector<int>& actions) {
  if (states.size() != phis.size()) throw ShapeError("wt: state and phi windows differ in length");
  WindowBatch b;
  b.batch = 1;
  b.len = states.size();
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (states[i].size() != state_dim_ || phis[i].size() != phi_dim_) {
      throw ShapeError("wt: token (" + std::to_string(states[i].size()) + ", " + std::to_string(phis[i].size()) +
                       ") vs (" + std::to_string(state_dim_) + ", " + std::to_string(phi_dim_) + ")");
    }
    b.tokens.insert(b.tokens.end(), states[i].begin(), states[i].end());
    b.tokens.insert(b.tokens.end(), phis[i].begin(), phis[i].end());
  }
  if (config_.action_conditioning) {
    // The action after the final state is unknown; its slot follows every
    // state token and causality keeps it invisible.
    b.actions.assign(b.len, 0);
    for (std::size_t i = 0; i < std::min(actions.size(), b.len); ++i) b.actions[i] = actions[i];
  }
  Graph g(Mode::kEval);
  const Tensor& all = forward(g, b).value();
  if (!config_.action_conditioning) return all;
  Tensor out(Shape{b.len, num_actions_});
  for (std::size_t i = 0; i < b.len; ++i) {
    std::copy(all.data() + 2 * i * num_actions_, all.data() + (2 * i + 1) * num_actions_, out.data() + i * num_actions_);
  }
  return out;
}

std::vector<double> WaypointTransformer::action_probs(const std::vector<State>& states, const std::vector<State>& phis,
                                                      const std::vector<int>& actions) {
  const Tensor logits = window_logits(states, phis, actions);
  const std::size_t last = logits.rows() - 1;
  std::vector<double> p(num_actions_);
  double top = logits.at(last, 0);
  for (std::size_t a = 1; a < num_actions_; ++a) top = std::max(top, logits.at(last, a));
  double z = 0.0;
  for (std::size_t a = 0; a < num_actions_; ++a) z += p[a] = std::exp(logits.at(last, a) - top);
  for (double& v : p) v /= z;
  return p;
}

void WaypointTransformer::fit_normalization(const std::vector<double>& tokens) {
  const std::size_t width = state_dim_ + phi_dim_;
  if (tokens.empty() || tokens.size() % width != 0) throw ShapeError("wt: normalisation tokens malformed");
  const std::size_t n = tokens.size() / width;
  for (std::size_t c = 0; c < width; ++c) {
    double m = 0.0;
    for (std::size_t r = 0; r < n; ++r) m += tokens[r * width + c];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t r = 0; r < n; ++r) v += (tokens[r * width + c] - m) * (tokens[r * width + c] - m);
    const double s = std::sqrt(v / static_cast<double>(n));
    in_mean_[c] = m;
    in_std_[c] = s > 1e-8 ? s : 1.0;
  }
}

std::vector<NamedParam> WaypointTransformer::parameters() {
  std::vector<NamedParam> out;
  in_proj_.collect("wt.in_proj", out);
  positions_.collect("wt.pos", out);
  if (config_.action_conditioning) action_embedding_.collect("wt.action", out);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string p = "wt.block" + std::to_string(i);
    blocks_[i].ln1.collect(p + ".ln1", out);
    blocks_[i].qkv.collect(p + ".qkv", out);
    blocks_[i].proj.collect(p + ".proj", out);
    blocks_[i].ln2.collect(p + ".ln2", out);
    blocks_[i].ff1.collect(p + ".ff1", out);
    blocks_[i].ff2.collect(p + ".ff2", out);
  }
  ln_f_.collect("wt.ln_f", out);
  head_.collect("wt.head", out);
  return out;
}

std::vector<NamedTensor> WaypointTransformer::checkpoint() {
  std::vector<NamedTensor> out = snapshot_parameters(parameters());
  out.push_back({"wt.in_mean", in_mean_});
  out.push_back({"wt.in_std", in_std_});
  return out;
}

void WaypointTransformer::load(const std::vector<NamedTensor>& tensors) {
  std::vector<NamedParam> dest = parameters();
  dest.push_back({"wt.in_mean", &in_mean_});
  dest.push_back({"wt.in_std", &in_std_});
  assign_parameters(tensors, dest);
}

std::size_t WaypointTransformer::parameter_count() { return count_parameters(parameters()); }

// --------------------------------------------------------------------- act

std::vector<double> act_probs(WaypointTransformer& model, const ConditioningScheme& scheme, History& history,
                              const State& omega) {
  if (history.states.empty()) throw std::invalid_argument("act: empty history");
  const std::size_t t = history.states.size() - 1;
  if (history.phis.size() == t) history.phis.push_back(make_phi(scheme, history, t, omega));
  if (history.phis.size() != t + 1) throw std::invalid_argument("act: phi history out of step with states");
  const std::size_t len = std::min(t + 1, model.config().context);
  const std::size_t first = t + 1 - len;
  const std::vector<State> states(history.states.begin() + static_cast<std::ptrdiff_t>(first), history.states.end());
  const std::vector<State> phis(history.phis.begin() + static_cast<std::ptrdiff_t>(first), history.phis.end());
  std::vector<int> actions;
  if (model.config().action_conditioning) {
    actions.assign(history.actions.begin() + static_cast<std::ptrdiff_t>(first), history.actions.end());
  }
  return model.action_probs(states, phis, actions);
}

int act(WaypointTransformer& model, const ConditioningScheme& scheme, History& history, const State& omega,
        ActMode mode, Rng& rng) {
  const std::vector<double> p = act_probs(model, scheme, history, omega);
  if (mode == ActMode::kArgmax) {
    return static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin());
  }
  std::discrete_distribution<int> pick(p.begin(), p.end());
  return pick(rng);
}

}  // namespace wayrvs
