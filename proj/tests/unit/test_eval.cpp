#include <gtest/gtest.h>

#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>

#include "wayrvs/eval.hpp"

using namespace wayrvs;

namespace {

MazeEnv stitch_env() { return MazeEnv(maze_layout("stitch-7x9"), 60); }

Trajectory cell_path(const GridMaze& maze, const std::vector<Cell>& cells) {
  Trajectory t;
  for (const Cell& c : cells) t.states.push_back(encode_cell(maze, c));
  t.actions.assign(cells.size() - 1, kStay);
  t.rewards.assign(cells.size() - 1, 0.0);
  return t;
}

RolloutResult with_phis(std::vector<State> phis, double ret) {
  RolloutResult r;
  r.phis = std::move(phis);
  r.ret = ret;
  return r;
}

PipelineConfig tiny_pipeline(const std::string& scheme) {
  PipelineConfig c;
  c.scheme = scheme;
  c.K = 2;
  c.net.hidden = 16;
  c.net_train.steps = 20;
  c.net_train.batch = 32;
  c.wt.layers = 1;
  c.wt.heads = 2;
  c.wt.embed_dim = 8;
  c.wt.context = 3;
  c.train.steps = 10;
  c.train.batch = 16;
  return c;
}

}  // namespace

TEST(Rollout, ShortestPathControllerReachesTarget) {
  const MazeEnv env = stitch_env();
  auto expert = expert_agent(env);
  const RolloutResult r = rollout(env, *expert, env.eval_goal(), 60, 1);
  EXPECT_TRUE(r.success);
  const GridMaze& m = env.maze();
  EXPECT_EQ(r.traj.length(), static_cast<std::size_t>(bfs_distance(m, m.start, m.target)));
  EXPECT_EQ(r.ret, 1.0);
  EXPECT_TRUE(r.phis.empty());
}

TEST(Rollout, ZeroStepsAndDeterminism) {
  const MazeEnv env = stitch_env();
  auto random = random_agent(env);
  const RolloutResult none = rollout(env, *random, env.eval_goal(), 0, 2);
  EXPECT_EQ(none.traj.length(), 0u);
  EXPECT_EQ(none.traj.states.size(), 1u);
  EXPECT_EQ(none.ret, 0.0);
  const RolloutResult a = rollout(env, *random, env.eval_goal(), 40, 3);
  const RolloutResult b = rollout(env, *random, env.eval_goal(), 40, 3);
  EXPECT_EQ(a.traj, b.traj);
  EXPECT_NE(a.traj, rollout(env, *random, env.eval_goal(), 40, 4).traj);
}

TEST(Evaluate, EndpointsNormalize) {
  const MazeEnv env = stitch_env();
  auto expert = expert_agent(env);
  const EvalReport perfect = evaluate(env, *expert, env.eval_goal(), 20, {0, 1, 2});
  EXPECT_EQ(perfect.mean, 100.0);
  EXPECT_EQ(perfect.std, 0.0);
  EXPECT_EQ(perfect.success_rate, 1.0);
  EXPECT_EQ(perfect.episodes.size(), 60u);
  EXPECT_EQ(perfect.completion_times.size(), 60u);

  auto random = random_agent(env);
  const EvalReport chance = evaluate(env, *random, env.eval_goal(), 300, {0, 1});
  EXPECT_NEAR(chance.mean, 0.0, 5.0);
  EXPECT_THROW(evaluate(env, *random, env.eval_goal(), 0, {0}), std::invalid_argument);
}

TEST(Evaluate, AlwaysSafeHazardReturns100) {
  const HazardEnv env({});
  FunctionAgent safe([](const History&, const State&, Rng&) { return kHazardSafe; });
  const EvalReport r = evaluate(env, safe, {100.0}, 10, {0, 1});
  for (const auto& e : r.episodes) {
    EXPECT_EQ(e.raw_return, 100.0);
    EXPECT_TRUE(e.success);
    EXPECT_EQ(e.length, 100u);
  }
  EXPECT_NEAR(r.mean, 100.0, 1e-9);
  EXPECT_EQ(episodes_csv(r).rfind("seed,raw_return,normalized,success,length\n", 0), 0u);
}

TEST(Evaluate, CombinedReportsUseRunMeans) {
  EvalReport a;
  a.mean = 40.0;
  a.episodes.resize(2);
  a.success_rate = 0.5;
  EvalReport b;
  b.mean = 60.0;
  b.episodes.resize(2);
  b.success_rate = 1.0;
  const EvalReport c = combine_reports({a, b});
  EXPECT_EQ(c.mean, 50.0);
  EXPECT_EQ(c.std, 10.0);
  EXPECT_EQ(c.success_rate, 0.75);
  EXPECT_EQ(mean_std({1.0, 3.0}).std, 1.0);
}

TEST(Spatial, SinglePathAndConservation) {
  const GridMaze m = maze_layout("stitch-7x9");
  const std::vector<Cell> path{{1, 1}, {1, 2}, {1, 3}, {1, 2}, {1, 1}};
  const SpatialGrids one = spatial_export(m, {cell_path(m, path)});
  std::vector<int> expect(static_cast<std::size_t>(m.width * m.height), 0);
  for (const Cell& c : path) ++expect[static_cast<std::size_t>(c.row * m.width + c.col)];
  EXPECT_EQ(one.visits, expect);
  EXPECT_EQ(one.ends[static_cast<std::size_t>(1 * m.width + 1)], 1);

  const MazeEnv env = stitch_env();
  auto random = random_agent(env);
  std::vector<Trajectory> rollouts;
  std::size_t steps = 0;
  for (std::uint64_t s = 0; s < 25; ++s) {
    rollouts.push_back(rollout(env, *random, env.eval_goal(), 30, s).traj);
    steps += rollouts.back().length();
  }
  const SpatialGrids g = spatial_export(m, rollouts);
  EXPECT_EQ(std::accumulate(g.ends.begin(), g.ends.end(), 0), 25);
  EXPECT_EQ(static_cast<std::size_t>(std::accumulate(g.visits.begin(), g.visits.end(), 0)), steps + 25);
  EXPECT_EQ(grid_csv(g, true).rfind("row,col,count\n", 0), 0u);
}

TEST(Spatial, FailuresAtOneCell) {
  const GridMaze m = maze_layout("stitch-7x9");
  std::vector<Trajectory> stuck(7, cell_path(m, {{1, 1}, {1, 2}, {1, 2}}));
  const SpatialGrids g = spatial_export(m, stuck);
  EXPECT_EQ(std::count_if(g.ends.begin(), g.ends.end(), [](int v) { return v != 0; }), 1);
  EXPECT_EQ(g.ends[static_cast<std::size_t>(1 * m.width + 2)], 7);
  EXPECT_EQ(g.span_fraction, 0.0);
  const MazeEnv env = stitch_env();
  auto expert = expert_agent(env);
  EXPECT_EQ(spatial_export(m, {rollout(env, *expert, env.eval_goal(), 60, 0).traj}).span_fraction, 1.0);
}

TEST(Profile, ExamplesAndMonotone) {
  const auto p = performance_profile({50.0, 50.0}, {51.0, 49.0});
  ASSERT_EQ(p.size(), 2u);
  EXPECT_EQ(p[0].tau, 49.0);
  EXPECT_EQ(p[0].fraction, 1.0);
  EXPECT_EQ(p[1].fraction, 0.0);
  const std::vector<double> scores{3.0, 90.0, 45.0, 45.0, 12.0, 70.0};
  std::vector<double> taus{-std::numeric_limits<double>::infinity()};
  for (int t = 0; t <= 100; t += 5) taus.push_back(t);
  const auto curve = performance_profile(scores, taus);
  EXPECT_EQ(curve.front().fraction, 1.0);
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LE(curve[i].fraction, curve[i - 1].fraction);
  EXPECT_THROW(performance_profile({}, {0.0}), std::invalid_argument);
  EXPECT_EQ(profile_csv(p).rfind("tau,fraction\n", 0), 0u);
}

TEST(BiasVariance, Examples) {
  const std::vector<double> R{1.0, -2.0, 5.5, 0.25};
  const BiasVariance same = bias_variance_identity(R, R);
  EXPECT_EQ(same.lhs, 0.0);
  EXPECT_EQ(same.rhs, 0.0);
  std::vector<double> shifted = R;
  for (double& v : shifted) v += 3.0;
  const BiasVariance c = bias_variance_identity(R, shifted);
  EXPECT_NEAR(c.lhs, 9.0, 1e-12);
  EXPECT_NEAR(c.bias_sq, 9.0, 1e-12);
  EXPECT_NEAR(c.variance, 0.0, 1e-12);
  EXPECT_THROW(bias_variance_identity({}, {}), std::invalid_argument);
  EXPECT_THROW(bias_variance_identity({1.0}, {1.0, 2.0}), std::invalid_argument);
}

TEST(BiasVariance, IdentityOnRandomSamples) {
  Rng rng(5);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int set = 0; set < 10; ++set) {
    std::vector<double> R(10000);
    std::vector<double> Rhat(10000);
    for (std::size_t i = 0; i < R.size(); ++i) {
      R[i] = 100.0 * n(rng);
      Rhat[i] = R[i] + 3.0 * set + (1.0 + set) * n(rng);
    }
    EXPECT_LT(bias_variance_identity(R, Rhat).gap, 1e-10);
  }
}

TEST(CrtgVariance, DeterministicRolloutsGiveZeroCurves) {
  std::vector<RolloutResult> mc(4, with_phis({{10.0}, {8.0}, {6.0}}, 6.0));
  std::vector<RolloutResult> wp(4, with_phis({{2.0, 9.0}, {2.0, 7.0}, {2.0, 5.0}}, 6.0));
  const auto rows = crtg_variance_curves(mc, wp);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.std_mc, 0.0);
    EXPECT_EQ(r.std_wp, 0.0);
  }
  EXPECT_EQ(final_quartile_ratio(rows), 1.0);
  EXPECT_EQ(variance_csv(rows).rfind("t,std_mc,std_wp\n", 0), 0u);
}

TEST(CrtgVariance, MonteCarloStartsAtTheta) {
  const HazardEnv env({});
  FunctionAgent coin([](const History&, const State&, Rng& rng) { return static_cast<int>(rng() % 2); });
  // The agent never reads Phi, so Phi is filled by the Monte-Carlo rule here.
  std::vector<RolloutResult> mc;
  std::vector<RolloutResult> wp;
  for (std::uint64_t s = 0; s < 40; ++s) {
    RolloutResult r = rollout(env, coin, {60.0}, 100, s);
    History h;
    h.states = r.traj.states;
    h.rewards = r.traj.rewards;
    for (std::size_t t = 0; t < r.traj.length(); ++t) {
      r.phis.push_back(make_phi(MonteCarloCrtgScheme{60.0, 1.0}, h, t, {60.0}));
    }
    RolloutResult w = r;
    for (auto& p : w.phis) p = {1.0, 60.0 - 0.5 * p[0]};
    mc.push_back(r);
    wp.push_back(w);
  }
  const auto rows = crtg_variance_curves(mc, wp);
  EXPECT_EQ(rows.front().std_mc, 0.0);
  EXPECT_GT(rows[5].std_mc, 0.0);
  EXPECT_NEAR(final_quartile_ratio(rows), 2.0, 1e-9);
}

TEST(CrtgVariance, MatchingTrimsOrReportsGap) {
  const auto [ka, kb] = match_performance({10, 11, 12, 40}, {11, 12, 11, 12}, 0.02);
  double ma = 0.0;
  for (std::size_t i : ka) ma += std::vector<double>{10, 11, 12, 40}[i];
  ma /= static_cast<double>(ka.size());
  EXPECT_NEAR(ma, 11.5, 11.5 * 0.02 + 1e-9);
  EXPECT_EQ(kb.size(), 4u);
  try {
    match_performance({1, 1, 1, 1}, {100, 100, 100, 100}, 0.02);
    FAIL() << "expected infeasible matching";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("best relative gap"), std::string::npos);
  }
}

TEST(ArtgTrace, SafeRolloutHasZeroDeviation) {
  const HazardEnv env({});
  FunctionAgent safe([](const History&, const State&, Rng&) { return kHazardSafe; });
  const auto traces = artg_trace({rollout(env, safe, {100.0}, 100, 1)}, 1.0);
  ASSERT_EQ(traces.size(), 1u);
  EXPECT_EQ(traces[0].artg.size(), 100u);
  for (double d : traces[0].deviation) EXPECT_EQ(d, 0.0);
  EXPECT_TRUE(traces[0].success);

  RolloutResult cut;
  cut.traj.states = {{0.0}, {0.01}};
  cut.traj.actions = {kHazardFast};
  cut.traj.rewards = {2.0};
  cut.traj.terminated_early = true;
  const auto short_trace = artg_trace({cut}, 1.0);
  EXPECT_EQ(short_trace[0].artg.size(), 1u);
  EXPECT_EQ(short_trace[0].deviation[0], 1.0);
  EXPECT_EQ(artg_csv(short_trace).rfind("rollout,t,artg,deviation,success\n", 0), 0u);
}

TEST(TargetSweep, DominantModeIsReached) {
  const Dataset ds = hazard_generate({}, {{0.0, 0.5}, {1.0, 0.5}}, 400, 3);
  PipelineConfig c = tiny_pipeline("reward-waypoint");
  c.net.hidden = 32;
  c.net_train.steps = 600;
  c.net_train.batch = 128;
  c.wt.embed_dim = 16;
  c.wt.context = 5;
  c.train.steps = 300;
  c.train.batch = 32;
  const PipelineResult trained = pipeline(ds, c);
  const HazardEnv env({});
  const auto rows = target_sweep(env, trained.policy, trained.scheme, {20.0, 100.0}, 20, 4);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NEAR(rows[1].mean_achieved, 100.0, 10.0);
  EXPECT_LT(rows[0].mean_achieved, rows[1].mean_achieved);
  EXPECT_EQ(target_csv(rows).rfind("omega,mean_achieved,std\n", 0), 0u);
}

TEST(Sweeps, RowShapesAndRepeatability) {
  const Dataset ds = maze_generate_play(maze_layout("stitch-7x9"), 40, {}, 5);
  const PipelineConfig base = tiny_pipeline("waypoint-goal");
  const auto rows = scheme_compare(ds, {"global-goal"}, base, {0}, 2);
  EXPECT_EQ(rows.size(), 1u);
  const auto twice = scheme_compare(ds, {"waypoint-goal", "waypoint-goal"}, base, {1, 2}, 2);
  ASSERT_EQ(twice.size(), 2u);
  EXPECT_EQ(twice[0].seed_scores, twice[1].seed_scores);
  EXPECT_EQ(scheme_csv(twice).rfind("scheme,mean,std\n", 0), 0u);

  const auto ks = k_sweep(ds, {0, 1, 3}, base, {0, 1}, 2, 2);
  ASSERT_EQ(ks.size(), 3u);
  for (const auto& r : ks) EXPECT_EQ(r.seed_scores.size(), 2u);
  EXPECT_EQ(k_sweep_csv(ks), "K,mean,std\n" + std::string("0,") + format_double(ks[0].mean) + "," +
                                 format_double(ks[0].std) + "\n1," + format_double(ks[1].mean) + "," +
                                 format_double(ks[1].std) + "\n3," + format_double(ks[2].mean) + "," +
                                 format_double(ks[2].std) + "\n");
}

TEST(Parallel, KeepsIndexOrderAndRethrows) {
  const auto v = parallel_map(10, 3, [](std::size_t i) { return static_cast<double>(i * i); });
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(v[i], static_cast<double>(i * i));
  EXPECT_THROW(parallel_map(4, 2, [](std::size_t i) -> double {
                 if (i == 2) throw std::runtime_error("boom");
                 return 0.0;
               }),
               std::runtime_error);
}

TEST(DefaultOmega, ByTask) {
  const MazeEnv maze = stitch_env();
  EXPECT_EQ(default_omega(maze), maze.eval_goal());
  EXPECT_EQ(default_omega(HazardEnv({})), (State{endpoints_for("hazard").expert_return}));
}
