#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "wayrvs/checkpoint.hpp"
#include "wayrvs/gradcheck.hpp"
#include "wayrvs/policy.hpp"

using namespace wayrvs;

namespace {

WTConfig tiny(std::size_t context = 6, bool action_conditioning = false) {
  WTConfig c;
  c.layers = 2;
  c.heads = 2;
  c.embed_dim = 8;
  c.context = context;
  c.action_conditioning = action_conditioning;
  return c;
}

struct Window {
  std::vector<State> states;
  std::vector<State> phis;
  std::vector<int> actions;
};

Window random_window(std::size_t len, Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Window w;
  for (std::size_t i = 0; i < len; ++i) {
    w.states.push_back({n(rng), n(rng)});
    w.phis.push_back({n(rng), n(rng)});
    w.actions.push_back(static_cast<int>(i % 5));
  }
  return w;
}

std::vector<double> row(const Tensor& t, std::size_t r) {
  return {t.data() + r * t.cols(), t.data() + (r + 1) * t.cols()};
}

// Analytic parameter count of the architecture: input projection, position
// table, L blocks, final norm and head.
std::size_t expected_count(std::size_t in, std::size_t d, std::size_t k, std::size_t L, std::size_t A) {
  const std::size_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
  return (in * d + d) + k * d + L * block + 2 * d + (d * A + A);
}

}  // namespace

TEST(WTConfig, Validation) {
  WTConfig c;
  EXPECT_NO_THROW(validate(c));
  c.heads = 5;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = WTConfig{};
  c.context = 0;
  EXPECT_THROW(validate(c), std::invalid_argument);
  c = WTConfig{};
  c.dropout_attn = 1.0;
  EXPECT_THROW(validate(c), std::invalid_argument);
}

TEST(Transformer, LogitsShape) {
  WaypointTransformer m(2, 2, 5, tiny(), 1);
  Rng rng(2);
  const Window w = random_window(4, rng);
  const Tensor logits = m.window_logits(w.states, w.phis);
  EXPECT_EQ(logits.rows(), 4u);
  EXPECT_EQ(logits.cols(), 5u);
}

TEST(Transformer, CausalMaskIsExact) {
  for (bool ac : {false, true}) {
    WaypointTransformer m(2, 2, 5, tiny(6, ac), 3);
    Rng rng(4);
    const Window base = random_window(6, rng);
    const Tensor ref = m.window_logits(base.states, base.phis, base.actions);
    for (std::size_t i = 0; i < 6; ++i) {
      Window changed = base;
      for (std::size_t j = i + 1; j < 6; ++j) {
        changed.states[j] = {100.0 + j, -50.0};
        changed.phis[j] = {-3.0, 7.0 * j};
      }
      // Action i is the one taken after state i, so it is future to position i.
      for (std::size_t j = i; j < 6; ++j) changed.actions[j] = 4 - changed.actions[j] % 5;
      const Tensor out = m.window_logits(changed.states, changed.phis, changed.actions);
      for (std::size_t r = 0; r <= i; ++r) EXPECT_EQ(row(out, r), row(ref, r)) << "ac=" << ac << " i=" << i;
    }
  }
}

TEST(Transformer, SingleTokenWindowMatchesPrefix) {
  WaypointTransformer m(2, 2, 5, tiny(), 5);
  Rng rng(6);
  const Window w = random_window(5, rng);
  const Tensor full = m.window_logits(w.states, w.phis);
  const Tensor one = m.window_logits({w.states[0]}, {w.phis[0]});
  // Different row counts take different matmul kernel paths, so the last
  // bits may differ; same-length windows are compared exactly above.
  for (std::size_t a = 0; a < 5; ++a) EXPECT_NEAR(one.at(0, a), full.at(0, a), 1e-12);
}

TEST(Transformer, DeterministicAcrossConstruction) {
  Rng rng(7);
  const Window w = random_window(3, rng);
  WaypointTransformer a(2, 2, 5, tiny(), 8);
  WaypointTransformer b(2, 2, 5, tiny(), 8);
  EXPECT_EQ(a.window_logits(w.states, w.phis), b.window_logits(w.states, w.phis));
  EXPECT_EQ(encode_checkpoint(a.checkpoint()), encode_checkpoint(b.checkpoint()));
}

TEST(Transformer, RejectsBadWindows) {
  WaypointTransformer m(2, 2, 5, tiny(3), 9);
  Rng rng(10);
  const Window w = random_window(4, rng);
  EXPECT_THROW(m.window_logits(w.states, w.phis), std::invalid_argument);
  EXPECT_THROW(m.window_logits({{0.0, 0.0}}, {{0.0}}), ShapeError);
  EXPECT_THROW(m.window_logits({{0.0, 0.0}}, {}), ShapeError);
}

TEST(Transformer, SoftmaxSumsToOne) {
  WaypointTransformer m(2, 2, 5, tiny(), 11);
  Rng rng(12);
  for (std::size_t len = 1; len <= 6; ++len) {
    const Window w = random_window(len, rng);
    const auto p = m.action_probs(w.states, w.phis);
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(Transformer, ParameterCountAtDefaults) {
  // Maze tokens: state 2, waypoint 2, five actions; default width 128, k 20.
  WaypointTransformer two(2, 2, 5, WTConfig{}, 0);
  EXPECT_EQ(two.parameter_count(), expected_count(4, 128, 20, 2, 5));
  EXPECT_EQ(two.parameter_count(), 400645u);
  WTConfig three_layers;
  three_layers.layers = 3;
  WaypointTransformer three(2, 2, 5, three_layers, 0);
  EXPECT_EQ(three.parameter_count() - two.parameter_count(), 198272u);
}

TEST(Transformer, OneBlockGradCheck) {
  WTConfig c = tiny(4);
  c.layers = 1;
  c.dropout_attn = c.dropout_resid = 0.0;
  WaypointTransformer m(2, 2, 3, c, 13);
  Rng rng(14);
  std::normal_distribution<double> n(0.0, 1.0);
  WindowBatch b;
  b.batch = 2;
  b.len = 4;
  for (std::size_t i = 0; i < 2 * 4 * 4; ++i) b.tokens.push_back(n(rng));
  b.actions.assign(8, 0);
  b.targets = {0, 1, 2, 0, 1, -1, 2, 1};
  auto loss = [&](Graph& g) { return nll(m.forward(g, b), b.targets); };
  const auto report = finite_diff_check(loss, m.parameters());
  EXPECT_TRUE(report.passed()) << report.max_rel_error();
}

TEST(MakePhi, Examples) {
  History h;
  h.states = {{0.0}, {0.1}, {0.2}};
  h.actions = {0, 1};
  h.rewards = {1.0, 2.0};
  EXPECT_EQ(make_phi(MonteCarloCrtgScheme{10.0, 1.0}, h, 2, {10.0}), (State{7.0}));
  EXPECT_EQ(make_phi(MonteCarloCrtgScheme{10.0, 1.0}, h, 0, {10.0}), (State{10.0}));
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(make_phi(GlobalGoalScheme{}, h, t, {0.5, 0.5}), (State{0.5, 0.5}));
    EXPECT_EQ(make_phi(ConstantArtgScheme{1.25}, h, t, {100.0}), (State{1.25}));
  }
  EXPECT_THROW(make_phi(OracleFutureScheme{1}, h, 0, {0.0}), std::invalid_argument);
  EXPECT_THROW(make_phi(GlobalGoalScheme{}, h, 3, {0.0}), std::out_of_range);
}

TEST(MakePhi, SchemeTaskMismatch) {
  EXPECT_THROW(check_scheme_task(GlobalGoalScheme{}, TaskKind::kReward), std::invalid_argument);
  EXPECT_THROW(check_scheme_task(ConstantArtgScheme{}, TaskKind::kGoal), std::invalid_argument);
  EXPECT_NO_THROW(check_scheme_task(MonteCarloCrtgScheme{}, TaskKind::kReward));
  EXPECT_EQ(phi_dim(GlobalGoalScheme{}, 2), 2u);
  EXPECT_EQ(phi_dim(ConstantArtgScheme{}, 1), 1u);
}

TEST(MakePhi, PhiSequenceMatchesLiveHistory) {
  Trajectory traj;
  traj.states = {{0.0}, {0.01}, {0.02}, {0.03}};
  traj.actions = {1, 0, 1};
  traj.rewards = {2.0, 1.0, 2.0};
  const auto seq = phi_sequence(MonteCarloCrtgScheme{5.0, 1.0}, traj, {5.0});
  History h;
  h.states = traj.states;
  h.actions = traj.actions;
  h.rewards = traj.rewards;
  for (std::size_t t = 0; t < 3; ++t) EXPECT_EQ(seq[t], make_phi(MonteCarloCrtgScheme{5.0, 1.0}, h, t, {5.0}));
  const auto artg = phi_sequence(ConstantArtgScheme{}, traj, {5.0});
  EXPECT_NEAR(artg[0][0], 5.0 / 3.0, 1e-12);
  EXPECT_EQ(phi_sequence(OracleFutureScheme{2}, traj, {0.0})[2], (State{0.03}));
}

TEST(Act, SaturatedHeadPicksThatAction) {
  WaypointTransformer m(2, 2, 5, tiny(), 15);
  Tensor& w = m.head().weight();
  for (auto& v : w.values()) v = 0.0;
  auto& b = m.head().bias();
  for (auto& v : b.values()) v = 0.0;
  b[3] = 1e3;
  History h;
  h.states = {{0.1, 0.2}};
  Rng rng(16);
  EXPECT_EQ(act(m, GlobalGoalScheme{}, h, {0.9, 0.9}, ActMode::kArgmax, rng), 3);
  EXPECT_EQ(h.phis.size(), 1u);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(act(m, GlobalGoalScheme{}, h, {0.9, 0.9}, ActMode::kSample, rng), 3);
}

TEST(Act, ModesAreReproducible) {
  WaypointTransformer m(2, 2, 5, tiny(), 17);
  auto run = [&](ActMode mode, std::uint64_t seed) {
    History h;
    h.states = {{0.1, 0.2}};
    Rng rng(seed);
    std::vector<int> out;
    for (int step = 0; step < 10; ++step) {
      out.push_back(act(m, GlobalGoalScheme{}, h, {0.9, 0.9}, mode, rng));
      h.actions.push_back(out.back());
      h.rewards.push_back(0.0);
      h.states.push_back({0.1 * step, 0.05 * step});
    }
    return out;
  };
  EXPECT_EQ(run(ActMode::kArgmax, 1), run(ActMode::kArgmax, 2));
  EXPECT_EQ(run(ActMode::kSample, 3), run(ActMode::kSample, 3));
  EXPECT_EQ(parse_act_mode("argmax"), ActMode::kArgmax);
  EXPECT_THROW(parse_act_mode("greedy"), std::invalid_argument);
}

TEST(Act, LongHistoryUsesLastContext) {
  WaypointTransformer m(2, 2, 5, tiny(4), 18);
  Rng rng(19);
  const Window w = random_window(9, rng);
  History h;
  h.states = w.states;
  h.phis = w.phis;
  h.actions.assign(w.actions.begin(), w.actions.begin() + 8);
  h.rewards.assign(8, 0.0);
  const auto p = act_probs(m, GlobalGoalScheme{}, h, {0.0, 0.0});
  const std::vector<State> s(w.states.end() - 4, w.states.end());
  const std::vector<State> f(w.phis.end() - 4, w.phis.end());
  EXPECT_EQ(p, m.action_probs(s, f));
}
