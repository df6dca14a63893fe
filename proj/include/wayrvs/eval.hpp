#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "wayrvs/envs.hpp"
#include "wayrvs/policy.hpp"
#include "wayrvs/training.hpp"

namespace wayrvs {

// Anything that picks actions from a live history.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual int act(History& history, const State& omega, Rng& rng) = 0;
};

class TransformerAgent final : public Agent {
 public:
  TransformerAgent(std::shared_ptr<WaypointTransformer> model, ConditioningScheme scheme,
                   ActMode mode = ActMode::kSample);
  int act(History& history, const State& omega, Rng& rng) override;

 private:
  std::shared_ptr<WaypointTransformer> model_;
  ConditioningScheme scheme_;
  ActMode mode_;
};

class FunctionAgent final : public Agent {
 public:
  using Fn = std::function<int(const History&, const State&, Rng&)>;
  explicit FunctionAgent(Fn fn) : fn_(std::move(fn)) {}
  int act(History& history, const State& omega, Rng& rng) override { return fn_(history, omega, rng); }

 private:
  Fn fn_;
};

// Reference controllers wrapped as agents.
std::unique_ptr<Agent> expert_agent(const Environment& env);
std::unique_ptr<Agent> random_agent(const Environment& env);

struct RolloutResult {
  Trajectory traj;
  std::vector<State> phis;  // conditioning fed at each step (empty for non-transformer agents)
  double ret = 0.0;
  bool success = false;
};

// Resets a clone of env and steps the agent until the episode ends or
// max_steps elapse.
RolloutResult rollout(const Environment& env, Agent& agent, const State& omega, std::size_t max_steps,
                      std::uint64_t seed);

struct EpisodeRecord {
  std::uint64_t seed = 0;
  double raw_return = 0.0;
  double normalized = 0.0;
  bool success = false;
  std::size_t length = 0;
};

struct EvalReport {
  std::vector<EpisodeRecord> episodes;
  std::vector<double> seed_means;  // normalized mean per seed
  double mean = 0.0;               // over seed means
  double std = 0.0;                // population formula over seed means
  double success_rate = 0.0;
  std::vector<std::size_t> completion_times;  // lengths of successful episodes
};

// n_episodes rollouts per seed; max_steps 0 uses the environment default.
EvalReport evaluate(const Environment& env, Agent& agent, const State& omega, std::size_t n_episodes,
                    const std::vector<std::uint64_t>& seeds, std::size_t max_steps = 0);
// Joins reports of separately trained policies: each report's mean is one
// seed score.
EvalReport combine_reports(const std::vector<EvalReport>& reports);
std::string episodes_csv(const EvalReport& report);

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};
MeanStd mean_std(const std::vector<double>& values);  // population std

struct SpatialGrids {
  int height = 0;
  int width = 0;
  std::vector<int> visits;  // row-major counts
  std::vector<int> ends;
  double span_fraction = 0.0;  // rollouts reaching the target quadrant from the start quadrant
};
SpatialGrids spatial_export(const GridMaze& maze, const std::vector<Trajectory>& rollouts);
std::string grid_csv(const SpatialGrids& grids, bool ends);

struct KSweepRow {
  std::size_t K = 0;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> seed_scores;
};
// One pipeline per (K, seed); K = 0 trains the global-goal scheme.
std::vector<KSweepRow> k_sweep(const Dataset& dataset, const std::vector<std::size_t>& K_values,
                               const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                               std::size_t n_episodes, std::size_t jobs = 1);
std::string k_sweep_csv(const std::vector<KSweepRow>& rows);

struct ProfilePoint {
  double tau = 0.0;
  double fraction = 0.0;
};
// Fraction of scores >= tau.
std::vector<ProfilePoint> performance_profile(const std::vector<double>& scores, const std::vector<double>& thresholds);
std::string profile_csv(const std::vector<ProfilePoint>& profile);

struct BiasVariance {
  double lhs = 0.0;       // E[(R - Rhat)^2]
  double bias_sq = 0.0;   // E[R - Rhat]^2
  double variance = 0.0;  // Var[Rhat - R]
  double rhs = 0.0;
  double gap = 0.0;
};
BiasVariance bias_variance_identity(const std::vector<double>& returns, const std::vector<double>& estimates);

struct VarianceRow {
  std::size_t t = 0;
  double std_mc = 0.0;
  double std_wp = 0.0;
  std::size_t alive_mc = 0;
  std::size_t alive_wp = 0;
};

// Drops extreme-return rollouts from either side until the mean returns
// agree within `tolerance` (relative); returns the kept indices of each.
// Throws std::runtime_error with the best achievable gap when impossible.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> match_performance(const std::vector<double>& a,
                                                                                const std::vector<double>& b,
                                                                                double tolerance = 0.02);

// Per-timestep population std of the CRTG fed to each policy, over rollouts
// still alive at t, after performance matching. The Monte-Carlo CRTG is
// phis[t][0]; the waypoint CRTG is phis[t][1].
std::vector<VarianceRow> crtg_variance_curves(const std::vector<RolloutResult>& monte_carlo,
                                              const std::vector<RolloutResult>& waypoint, double tolerance = 0.02);
std::string variance_csv(const std::vector<VarianceRow>& rows);
// Ratio of the mean std_mc to the mean std_wp over the last quarter of
// timesteps at which both sets still have two or more live rollouts; +inf
// when std_wp is zero there and std_mc is not.
double final_quartile_ratio(const std::vector<VarianceRow>& rows);

struct ArtgTrace {
  std::vector<double> artg;  // true ARTG R_a(tau, t)
  std::vector<double> deviation;
  bool success = false;
};
std::vector<ArtgTrace> artg_trace(const std::vector<RolloutResult>& rollouts, double theta_a);
std::string artg_csv(const std::vector<ArtgTrace>& traces);

struct TargetRow {
  double omega = 0.0;
  double mean_achieved = 0.0;
  double std = 0.0;
};
// Raw returns achieved when conditioning on each omega.
std::vector<TargetRow> target_sweep(const Environment& env, const std::shared_ptr<WaypointTransformer>& model,
                                    const ConditioningScheme& trained, const std::vector<double>& omegas,
                                    std::size_t n_episodes, std::uint64_t seed, double gamma = 1.0);
std::string target_csv(const std::vector<TargetRow>& rows);

struct SchemeRow {
  std::string scheme;
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> seed_scores;
};
// Trains every named scheme with the shared config per seed and evaluates
// it on omega (the environment's evaluation goal when empty).
std::vector<SchemeRow> scheme_compare(const Dataset& dataset, const std::vector<std::string>& schemes,
                                      const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                                      std::size_t n_episodes, const State& omega = {}, std::size_t jobs = 1);
std::string scheme_csv(const std::vector<SchemeRow>& rows);

// Evaluation target when none is given: the goal for goal tasks, the
// expert return for reward tasks.
State default_omega(const Environment& env);

// Runs fn(0..n-1) on up to `jobs` threads; results keep index order.
std::vector<double> parallel_map(std::size_t n, std::size_t jobs, const std::function<double(std::size_t)>& fn);

// Normalized evaluation of one trained pipeline over n_episodes.
EvalReport evaluate_pipeline(const Environment& env, const PipelineResult& trained, const State& omega,
                             std::size_t n_episodes, std::uint64_t seed, double gamma = 1.0,
                             ActMode mode = ActMode::kSample);

}  // namespace wayrvs
