#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "wayrvs/envs.hpp"

using namespace wayrvs;

namespace {

double mean_length(const Dataset& ds) {
  double total = 0.0;
  for (const auto& t : ds.trajectories) total += static_cast<double>(t.length());
  return total / static_cast<double>(ds.trajectories.size());
}

}  // namespace

TEST(Chain, MeanLengthMatchesClosedForm) {
  const Dataset ds = chain_generate({10, 0.5}, 10000, 1);
  EXPECT_NEAR(mean_length(ds), 10.0 / (1.0 - 0.5), 0.5);
  const Dataset near_zero = chain_generate({5, 0.01}, 10000, 2);
  EXPECT_NEAR(mean_length(near_zero), 5.0 / 0.99, 0.05);
}

TEST(Chain, EveryTrajectoryEndsAtH) {
  const Dataset ds = chain_generate({6, 0.7}, 500, 3);
  for (const auto& t : ds.trajectories) {
    EXPECT_EQ(t.states.front()[0], 0.0);
    EXPECT_EQ(t.states.back()[0], 6.0);
    EXPECT_EQ(t.total_return(), 1.0);
  }
}

TEST(Chain, ActionFrequencyWithinBinomialBound) {
  const double lambda = 0.6;
  const Dataset ds = chain_generate({8, lambda}, 5000, 4);
  double stays = 0.0;
  double visits = 0.0;
  for (const auto& t : ds.trajectories) {
    for (int a : t.actions) {
      stays += a == kChainStay;
      visits += 1.0;
    }
  }
  const double sigma = std::sqrt(lambda * (1.0 - lambda) / visits);
  EXPECT_NEAR(stays / visits, lambda, 3.0 * sigma);
}

TEST(Chain, RejectsInvalidConfig) {
  EXPECT_THROW(chain_generate({1, 0.5}, 1, 0), std::invalid_argument);
  EXPECT_THROW(chain_generate({5, 1.0}, 1, 0), std::invalid_argument);
  EXPECT_THROW(chain_generate({5, 0.5}, 0, 0), std::invalid_argument);
}

TEST(Maze, LayoutInvariants) {
  const GridMaze m = maze_layout("stitch-7x9");
  EXPECT_EQ(m.height, 7);
  EXPECT_EQ(m.width, 9);
  EXPECT_EQ(m.start, (Cell{1, 1}));
  EXPECT_EQ(m.target, (Cell{5, 7}));
  EXPECT_EQ(bfs_distance(m, m.start, m.target), 10);
  EXPECT_EQ(quadrant_of(m, m.start), Quadrant::kStart);
  EXPECT_EQ(quadrant_of(m, m.target), Quadrant::kTarget);
  EXPECT_EQ(quadrant_of(m, {3, 4}), Quadrant::kNone);
  EXPECT_THROW(parse_maze({"###", "#S#", "###"}, "x"), std::invalid_argument);
  EXPECT_THROW(parse_maze({"#####", "#S#G#", "#####"}, "x"), std::invalid_argument);
}

TEST(Maze, StepRules) {
  const GridMaze m = maze_layout("stitch-7x9");
  EXPECT_EQ(maze_step(m, {1, 1}, kRight), (Cell{1, 2}));
  EXPECT_EQ(maze_step(m, {1, 1}, kUp), (Cell{1, 1}));
  EXPECT_EQ(maze_step(m, {1, 1}, kStay), (Cell{1, 1}));
  EXPECT_THROW(maze_step(m, {0, 0}, kRight), std::invalid_argument);
  EXPECT_THROW(maze_step(m, {1, 1}, 7), std::invalid_argument);
}

TEST(Maze, CellEncodingRoundTrips) {
  const GridMaze m = maze_layout("stitch-7x9");
  for (const Cell& c : m.open_cells()) {
    const State s = encode_cell(m, c);
    EXPECT_GE(s[0], 0.0);
    EXPECT_LE(s[1], 1.0);
    EXPECT_EQ(decode_cell(m, s), c);
  }
}

TEST(Maze, PlayDataRespectsSpanCapAndDynamics) {
  const GridMaze m = maze_layout("stitch-7x9");
  const Dataset ds = maze_generate_play(m, 1000, {}, 5);
  std::size_t spans = 0;
  for (const auto& t : ds.trajectories) {
    spans += spans_quadrants(m, t);
    for (std::size_t i = 0; i < t.length(); ++i) {
      EXPECT_EQ(maze_step(m, decode_cell(m, t.states[i]), t.actions[i]), decode_cell(m, t.states[i + 1]));
    }
  }
  EXPECT_LE(static_cast<double>(spans) / 1000.0, 0.05);
}

TEST(Maze, NoiselessPlayFollowsShortestPaths) {
  const GridMaze m = maze_layout("stitch-7x9");
  const Dataset ds = maze_generate_play(m, 300, {0.05, 0.0}, 6);
  for (const auto& t : ds.trajectories) {
    const Cell a = decode_cell(m, t.states.front());
    const Cell b = decode_cell(m, t.states.back());
    EXPECT_EQ(static_cast<int>(t.length()), bfs_distance(m, a, b));
  }
}

TEST(Maze, ZeroSpanCapStillGenerates) {
  const GridMaze m = maze_layout("stitch-7x9");
  const Dataset ds = maze_generate_play(m, 200, {0.0, 0.2}, 8);
  for (const auto& t : ds.trajectories) EXPECT_FALSE(spans_quadrants(m, t));
}

TEST(Hazard, AlwaysSafeReturnsHorizon) {
  const Dataset ds = hazard_generate({}, {{0.0, 1.0}}, 50, 1);
  for (const auto& t : ds.trajectories) {
    EXPECT_EQ(t.total_return(), 100.0);
    EXPECT_FALSE(t.terminated_early);
  }
}

TEST(Hazard, AlwaysFastMatchesGeometricSeries) {
  const Dataset ds = hazard_generate({}, {{1.0, 1.0}}, 10000, 2);
  double total = 0.0;
  for (const auto& t : ds.trajectories) total += t.total_return();
  const double oracle = 2.0 * (1.0 - std::pow(0.9, 100)) / 0.1;
  EXPECT_NEAR(total / 1e4, oracle, 0.6);
}

TEST(Hazard, MixtureIsBimodal) {
  const Dataset ds = hazard_generate({}, parse_mixture("0:0.5,1:0.5"), 4000, 3);
  double high = 0.0;
  double low_sum = 0.0;
  double low = 0.0;
  double between = 0.0;
  for (const auto& t : ds.trajectories) {
    const double r = t.total_return();
    if (r == 100.0) {
      ++high;
      continue;
    }
    low_sum += r;
    ++low;
    between += r > 60.0 && r < 100.0;
  }
  EXPECT_NEAR(high / 4000.0, 0.5, 0.04);
  EXPECT_NEAR(low_sum / low, 2.0 * (1.0 - std::pow(0.9, 100)) / 0.1, 1.0);
  // Fast episodes survive 30 steps with probability 0.9^30, about 4%.
  EXPECT_LT(between / 4000.0, 0.05);
}

TEST(Hazard, RejectsBadMixture) {
  EXPECT_THROW(hazard_generate({}, {{0.0, 0.4}}, 10, 0), std::invalid_argument);
  EXPECT_THROW(hazard_generate({}, {{1.5, 1.0}}, 10, 0), std::invalid_argument);
  EXPECT_THROW(parse_mixture("0.5"), std::invalid_argument);
}

TEST(DelayRewards, MovesReturnToFinalStep) {
  Dataset ds;
  ds.env_name = "hazard";
  ds.trajectories.push_back({{{0.0}, {0.01}, {0.02}, {0.03}}, {0, 0, 0}, {1, 1, 1}, false});
  const Dataset delayed = delay_rewards(ds);
  EXPECT_EQ(delayed.trajectories[0].rewards, (std::vector<double>{0, 0, 3}));
  EXPECT_EQ(delay_rewards(delayed), delayed);

  const Dataset random = hazard_generate({}, parse_mixture("0.3:0.5,0.8:0.5"), 200, 4);
  const Dataset moved = delay_rewards(random);
  for (std::size_t i = 0; i < random.trajectories.size(); ++i) {
    EXPECT_DOUBLE_EQ(moved.trajectories[i].total_return(), random.trajectories[i].total_return());
  }
}

TEST(Score, EndpointsMapTo0And100) {
  register_endpoints("unit-env", {10.0, 30.0});
  EXPECT_DOUBLE_EQ(normalized_score("unit-env", 30.0), 100.0);
  EXPECT_DOUBLE_EQ(normalized_score("unit-env", 10.0), 0.0);
  EXPECT_THROW(normalized_score("nope", 1.0), std::invalid_argument);
}

TEST(Score, HazardEndpointsFromMonteCarlo) {
  const ScoreEndpoints e = endpoints_for("hazard");
  EXPECT_DOUBLE_EQ(e.expert_return, 100.0);
  // Uniform random: each step pays 1.5 on average and survives with 0.95,
  // so the expected return is 1.5 * (1 - 0.95^100) / 0.05.
  EXPECT_NEAR(e.random_return, 1.5 * (1.0 - std::pow(0.95, 100)) / 0.05, 0.3);
  const double at60 = normalized_score("hazard", 60.0);
  EXPECT_NEAR(at60, 100.0 * (60.0 - e.random_return) / (100.0 - e.random_return), 1e-12);
}

TEST(Score, MazeAndChainExpertsSucceed) {
  EXPECT_DOUBLE_EQ(endpoints_for("maze:stitch-7x9").expert_return, 1.0);
  EXPECT_DOUBLE_EQ(endpoints_for("chain").expert_return, 1.0);
}

TEST(Files, RoundTripAndDeterminism) {
  const GridMaze m = maze_layout("stitch-7x9");
  const Dataset a = maze_generate_play(m, 100, {}, 9);
  const Dataset b = maze_generate_play(m, 100, {}, 9);
  EXPECT_EQ(serialize_dataset(a), serialize_dataset(b));
  EXPECT_EQ(parse_dataset(serialize_dataset(a)), a);

  const Dataset h = hazard_generate({}, parse_mixture("0.1:0.25,0.9:0.75"), 50, 10);
  const auto path = std::filesystem::temp_directory_path() / "wayrvs_envs_test" / "h.traj";
  write_dataset(path, h);
  EXPECT_EQ(read_dataset(path), h);
  std::filesystem::remove_all(path.parent_path());

  const std::string text = serialize_dataset(chain_generate({3, 0.5}, 2, 0));
  EXPECT_EQ(text.rfind("WAYRVS-TRAJ v1 env=chain:H=3,lambda=0.5 seed=0", 0), 0u);
  EXPECT_THROW(parse_dataset("WAYRVS-TRAJ v1 env=x seed=0\n0;1|0|0\n"), std::runtime_error);
}

TEST(Env, MakeEnvParsesNames) {
  EXPECT_EQ(make_env("chain:H=4,lambda=0.25")->name(), "chain:H=4,lambda=0.25");
  EXPECT_EQ(make_env("maze:open-5x5")->num_actions(), 5u);
  EXPECT_EQ(make_env("hazard:T=10")->default_max_steps(), 10u);
  EXPECT_THROW(make_env("ant"), std::invalid_argument);
  EXPECT_THROW(make_env("chain:mu=3"), std::invalid_argument);
}
