#include "wayrvs/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <atomic>
#include <exception>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace wayrvs {

TransformerAgent::TransformerAgent(std::shared_ptr<WaypointTransformer> model, ConditioningScheme scheme, ActMode mode)
    : model_(std::move(model)), scheme_(std::move(scheme)), mode_(mode) {
  if (!model_) throw std::invalid_argument("TransformerAgent: null model");
}

int TransformerAgent::act(History& history, const State& omega, Rng& rng) {
  return wayrvs::act(*model_, scheme_, history, omega, mode_, rng);
}

std::unique_ptr<Agent> expert_agent(const Environment& env) {
  std::shared_ptr<const Environment> copy = env.clone();
  return std::make_unique<FunctionAgent>(
      [copy](const History& h, const State&, Rng& rng) { return copy->expert_action(h.states.back(), rng); });
}

std::unique_ptr<Agent> random_agent(const Environment& env) {
  const int n = static_cast<int>(env.num_actions());
  return std::make_unique<FunctionAgent>([n](const History&, const State&, Rng& rng) {
    std::uniform_int_distribution<int> pick(0, n - 1);
    return pick(rng);
  });
}

RolloutResult rollout(const Environment& env, Agent& agent, const State& omega, std::size_t max_steps,
                      std::uint64_t seed) {
  auto live = env.clone();
  Rng env_rng(derive_seed(seed, 0xE));
  Rng agent_rng(derive_seed(seed, 0xA));
  History h;
  h.states.push_back(live->reset());
  RolloutResult out;
  while (h.actions.size() < max_steps && !live->done()) {
    const int a = agent.act(h, omega, agent_rng);
    StepResult r = live->step(a, env_rng);
    h.actions.push_back(a);
    h.rewards.push_back(r.reward);
    h.states.push_back(std::move(r.state));
    out.traj.terminated_early = r.terminated_early;
  }
  out.traj.states = std::move(h.states);
  out.traj.actions = std::move(h.actions);
  out.traj.rewards = std::move(h.rewards);
  out.phis = std::move(h.phis);
  out.ret = out.traj.total_return();
  out.success = env.success(out.traj);
  return out;
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) return {};
  const double n = static_cast<double>(values.size());
  const double m = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double v = 0.0;
  for (double x : values) v += (x - m) * (x - m);
  return {m, std::sqrt(v / n)};
}

EvalReport evaluate(const Environment& env, Agent& agent, const State& omega, std::size_t n_episodes,
                    const std::vector<std::uint64_t>& seeds, std::size_t max_steps) {
  if (seeds.empty() || n_episodes == 0) throw std::invalid_argument("evaluate: need seeds and episodes");
  const std::size_t cap = max_steps == 0 ? env.default_max_steps() : max_steps;
  const std::string name = env.name();
  EvalReport report;
  std::size_t successes = 0;
  for (std::uint64_t seed : seeds) {
    double total = 0.0;
    for (std::size_t e = 0; e < n_episodes; ++e) {
      const RolloutResult r = rollout(env, agent, omega, cap, derive_seed(seed, e));
      EpisodeRecord rec{seed, r.ret, normalized_score(name, r.ret), r.success, r.traj.length()};
      total += rec.normalized;
      if (r.success) {
        ++successes;
        report.completion_times.push_back(rec.length);
      }
      report.episodes.push_back(rec);
    }
    report.seed_means.push_back(total / static_cast<double>(n_episodes));
  }
  const MeanStd ms = mean_std(report.seed_means);
  report.mean = ms.mean;
  report.std = ms.std;
  report.success_rate = static_cast<double>(successes) / static_cast<double>(report.episodes.size());
  return report;
}

EvalReport combine_reports(const std::vector<EvalReport>& reports) {
  EvalReport out;
  double successes = 0.0;
  for (const auto& r : reports) {
    out.episodes.insert(out.episodes.end(), r.episodes.begin(), r.episodes.end());
    out.completion_times.insert(out.completion_times.end(), r.completion_times.begin(), r.completion_times.end());
    out.seed_means.push_back(r.mean);
    successes += r.success_rate * static_cast<double>(r.episodes.size());
  }
  const MeanStd ms = mean_std(out.seed_means);
  out.mean = ms.mean;
  out.std = ms.std;
  out.success_rate = out.episodes.empty() ? 0.0 : successes / static_cast<double>(out.episodes.size());
  return out;
}

std::string episodes_csv(const EvalReport& report) {
  std::ostringstream os;
  os << "seed,raw_return,normalized,success,length\n";
  for (const auto& e : report.episodes) {
    os << e.seed << ',' << format_double(e.raw_return) << ',' << format_double(e.normalized) << ','
       << (e.success ? 1 : 0) << ',' << e.length << '\n';
  }
  return os.str();
}

EvalReport evaluate_pipeline(const Environment& env, const PipelineResult& trained, const State& omega,
                             std::size_t n_episodes, std::uint64_t seed, double gamma, ActMode mode) {
  TransformerAgent agent(trained.policy, evaluation_scheme(trained.scheme, omega, env.default_max_steps(), gamma),
                         mode);
  return evaluate(env, agent, omega, n_episodes, {seed});
}

State default_omega(const Environment& env) {
  if (env.task() == TaskKind::kGoal) return env.eval_goal();
  return {endpoints_for(env.name()).expert_return};
}

std::vector<double> parallel_map(std::size_t n, std::size_t jobs, const std::function<double(std::size_t)>& fn) {
  std::vector<double> out(n, 0.0);
  const std::size_t workers = std::max<std::size_t>(1, std::min(jobs, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) out[i] = fn(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          out[i] = fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ------------------------------------------------------------------ spatial

SpatialGrids spatial_export(const GridMaze& maze, const std::vector<Trajectory>& rollouts) {
  SpatialGrids g;
  g.height = maze.height;
  g.width = maze.width;
  g.visits.assign(static_cast<std::size_t>(maze.height * maze.width), 0);
  g.ends.assign(g.visits.size(), 0);
  std::size_t spans = 0;
  for (const auto& t : rollouts) {
    if (t.states.empty()) continue;
    bool seen_start = false;
    bool crossed = false;
    for (const auto& s : t.states) {
      const Cell c = decode_cell(maze, s);
      ++g.visits[static_cast<std::size_t>(c.row * maze.width + c.col)];
      const Quadrant q = quadrant_of(maze, c);
      seen_start = seen_start || q == Quadrant::kStart;
      crossed = crossed || (seen_start && q == Quadrant::kTarget);
    }
    const Cell end = decode_cell(maze, t.states.back());
    ++g.ends[static_cast<std::size_t>(end.row * maze.width + end.col)];
    spans += crossed;
  }
  g.span_fraction = rollouts.empty() ? 0.0 : static_cast<double>(spans) / static_cast<double>(rollouts.size());
  return g;
}

std::string grid_csv(const SpatialGrids& grids, bool ends) {
  const auto& counts = ends ? grids.ends : grids.visits;
  std::ostringstream os;
  os << "row,col,count\n";
  for (int r = 0; r < grids.height; ++r) {
    for (int c = 0; c < grids.width; ++c) os << r << ',' << c << ',' << counts[static_cast<std::size_t>(r * grids.width + c)] << '\n';
  }
  return os.str();
}

// ------------------------------------------------------------------ sweeps

namespace {

double train_and_score(const Dataset& dataset, const PipelineConfig& config, std::size_t n_episodes,
                       const State& omega_in) {
  const auto env = make_env(dataset.env_name);
  const PipelineResult trained = pipeline(dataset, config);
  const State omega = omega_in.empty() ? default_omega(*env) : omega_in;
  return evaluate_pipeline(*env, trained, omega, n_episodes, derive_seed(config.seed, 0xEE), config.gamma).mean;
}

}  // namespace

std::vector<KSweepRow> k_sweep(const Dataset& dataset, const std::vector<std::size_t>& K_values,
                               const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                               std::size_t n_episodes, std::size_t jobs) {
  if (K_values.empty() || seeds.empty()) throw std::invalid_argument("k_sweep: need K values and seeds");
  std::vector<KSweepRow> rows;
  for (std::size_t K : K_values) {
    KSweepRow row;
    row.K = K;
    row.seed_scores = parallel_map(seeds.size(), jobs, [&](std::size_t i) {
      PipelineConfig c = base;
      c.seed = seeds[i];
      c.K = K;
      c.scheme = K == 0 ? "global-goal" : "waypoint-goal";
      c.out_dir.reset();
      return train_and_score(dataset, c, n_episodes, {});
    });
    const MeanStd ms = mean_std(row.seed_scores);
    row.mean = ms.mean;
    row.std = ms.std;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string k_sweep_csv(const std::vector<KSweepRow>& rows) {
  std::ostringstream os;
  os << "K,mean,std\n";
  for (const auto& r : rows) os << r.K << ',' << format_double(r.mean) << ',' << format_double(r.std) << '\n';
  return os.str();
}

std::vector<ProfilePoint> performance_profile(const std::vector<double>& scores, const std::vector<double>& thresholds) {
  if (scores.empty()) throw std::invalid_argument("performance_profile: no scores");
  std::vector<double> sorted = scores;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> taus = thresholds;
  std::sort(taus.begin(), taus.end());
  std::vector<ProfilePoint> out;
  for (double tau : taus) {
    const auto below = std::lower_bound(sorted.begin(), sorted.end(), tau) - sorted.begin();
    out.push_back({tau, static_cast<double>(sorted.size() - static_cast<std::size_t>(below)) /
                            static_cast<double>(sorted.size())});
  }
  return out;
}

std::string profile_csv(const std::vector<ProfilePoint>& profile) {
  std::ostringstream os;
  os << "tau,fraction\n";
  for (const auto& p : profile) os << format_double(p.tau) << ',' << format_double(p.fraction) << '\n';
  return os.str();
}

BiasVariance bias_variance_identity(const std::vector<double>& returns, const std::vector<double>& estimates) {
  if (returns.empty()) throw std::invalid_argument("bias_variance_identity: no samples");
  if (returns.size() != estimates.size()) throw std::invalid_argument("bias_variance_identity: unpaired samples");
  const double n = static_cast<double>(returns.size());
  double lhs = 0.0;
  double mean_d = 0.0;
  for (std::size_t i = 0; i < returns.size(); ++i) {
    const double d = returns[i] - estimates[i];
    lhs += d * d;
    mean_d += d;
  }
  lhs /= n;
  mean_d /= n;
  double var = 0.0;
  for (std::size_t i = 0; i < returns.size(); ++i) {
    const double e = (estimates[i] - returns[i]) + mean_d;
    var += e * e;
  }
  var /= n;
  BiasVariance out;
  out.lhs = lhs;
  out.bias_sq = mean_d * mean_d;
  out.variance = var;
  out.rhs = out.bias_sq + var;
  out.gap = std::abs(out.lhs - out.rhs);
  return out;
}

// ---------------------------------------------------------------- variance

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> match_performance(const std::vector<double>& a,
                                                                                const std::vector<double>& b,
                                                                                double tolerance) {
  if (a.empty() || b.empty()) throw std::invalid_argument("match_performance: empty rollout set");
  auto sorted_idx = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return v[i] < v[j]; });
    return idx;
  };
  const auto ia = sorted_idx(a);
  const auto ib = sorted_idx(b);
  // Keep contiguous windows [lo, hi) of each sorted set; at least half of each.
  std::size_t alo = 0, ahi = a.size(), blo = 0, bhi = b.size();
  double asum = std::accumulate(a.begin(), a.end(), 0.0);
  double bsum = std::accumulate(b.begin(), b.end(), 0.0);
  const std::size_t amin = std::max<std::size_t>(1, (a.size() + 1) / 2);
  const std::size_t bmin = std::max<std::size_t>(1, (b.size() + 1) / 2);
  auto gap = [&] {
    const double ma = asum / static_cast<double>(ahi - alo);
    const double mb = bsum / static_cast<double>(bhi - blo);
    return std::abs(ma - mb) / std::max({std::abs(ma), std::abs(mb), 1e-12});
  };
  while (gap() > tolerance) {
    const double ma = asum / static_cast<double>(ahi - alo);
    const double mb = bsum / static_cast<double>(bhi - blo);
    const bool a_high = ma > mb;
    // Trim the top of the higher set or the bottom of the lower one,
    // whichever closes more of the gap.
    double best = std::numeric_limits<double>::infinity();
    int move = -1;
    auto consider = [&](int which, bool ok, double new_gap) {
      if (ok && new_gap < best) {
        best = new_gap;
        move = which;
      }
    };
    if (a_high) {
      if (ahi - alo > amin) {
        const double s = asum - a[ia[ahi - 1]];
        consider(0, true, std::abs(s / static_cast<double>(ahi - alo - 1) - mb));
      }
      if (bhi - blo > bmin) {
        const double s = bsum - b[ib[blo]];
        consider(1, true, std::abs(ma - s / static_cast<double>(bhi - blo - 1)));
      }
    } else {
      if (bhi - blo > bmin) {
        const double s = bsum - b[ib[bhi - 1]];
        consider(2, true, std::abs(ma - s / static_cast<double>(bhi - blo - 1)));
      }
      if (ahi - alo > amin) {
        const double s = asum - a[ia[alo]];
        consider(3, true, std::abs(s / static_cast<double>(ahi - alo - 1) - mb));
      }
    }
    if (move < 0 || best >= std::abs(ma - mb)) {
      std::ostringstream os;
      os << "performance matching infeasible: best relative gap " << gap() << " exceeds " << tolerance;
      throw std::runtime_error(os.str());
    }
    switch (move) {
      case 0: asum -= a[ia[--ahi]]; break;
      case 1: bsum -= b[ib[blo++]]; break;
      case 2: bsum -= b[ib[--bhi]]; break;
      default: asum -= a[ia[alo++]]; break;
    }
  }
  std::vector<std::size_t> ka(ia.begin() + static_cast<std::ptrdiff_t>(alo), ia.begin() + static_cast<std::ptrdiff_t>(ahi));
  std::vector<std::size_t> kb(ib.begin() + static_cast<std::ptrdiff_t>(blo), ib.begin() + static_cast<std::ptrdiff_t>(bhi));
  std::sort(ka.begin(), ka.end());
  std::sort(kb.begin(), kb.end());
  return {ka, kb};
}

namespace {

double population_std(const std::vector<double>& v) { return mean_std(v).std; }

}  // namespace

std::vector<VarianceRow> crtg_variance_curves(const std::vector<RolloutResult>& monte_carlo,
                                              const std::vector<RolloutResult>& waypoint, double tolerance) {
  std::vector<double> ra;
  std::vector<double> rb;
  for (const auto& r : monte_carlo) ra.push_back(r.ret);
  for (const auto& r : waypoint) rb.push_back(r.ret);
  const auto [ka, kb] = match_performance(ra, rb, tolerance);
  std::size_t horizon = 0;
  for (std::size_t i : ka) horizon = std::max(horizon, monte_carlo[i].phis.size());
  for (std::size_t i : kb) horizon = std::max(horizon, waypoint[i].phis.size());
  std::vector<VarianceRow> rows;
  for (std::size_t t = 0; t < horizon; ++t) {
    std::vector<double> mc;
    std::vector<double> wp;
    for (std::size_t i : ka) {
      if (t < monte_carlo[i].phis.size()) mc.push_back(monte_carlo[i].phis[t].at(0));
    }
    for (std::size_t i : kb) {
      if (t < waypoint[i].phis.size()) wp.push_back(waypoint[i].phis[t].at(1));
    }
    rows.push_back({t, population_std(mc), population_std(wp), mc.size(), wp.size()});
  }
  return rows;
}

std::string variance_csv(const std::vector<VarianceRow>& rows) {
  std::ostringstream os;
  os << "t,std_mc,std_wp\n";
  for (const auto& r : rows) os << r.t << ',' << format_double(r.std_mc) << ',' << format_double(r.std_wp) << '\n';
  return os.str();
}

double final_quartile_ratio(const std::vector<VarianceRow>& rows) {
  std::vector<const VarianceRow*> live;
  for (const auto& r : rows) {
    if (r.alive_mc >= 2 && r.alive_wp >= 2) live.push_back(&r);
  }
  if (live.empty()) throw std::runtime_error("final_quartile_ratio: no timestep with live rollouts in both sets");
  const std::size_t start = live.size() - std::max<std::size_t>(1, live.size() / 4);
  double mc = 0.0;
  double wp = 0.0;
  for (std::size_t i = start; i < live.size(); ++i) {
    mc += live[i]->std_mc;
    wp += live[i]->std_wp;
  }
  if (wp == 0.0) return mc == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
  return mc / wp;
}

std::vector<ArtgTrace> artg_trace(const std::vector<RolloutResult>& rollouts, double theta_a) {
  std::vector<ArtgTrace> out;
  for (const auto& r : rollouts) {
    ArtgTrace tr;
    tr.success = r.success;
    for (std::size_t t = 0; t < r.traj.length(); ++t) {
      const double a = reward_targets(r.traj, t).artg;
      tr.artg.push_back(a);
      tr.deviation.push_back(std::abs(a - theta_a));
    }
    out.push_back(std::move(tr));
  }
  return out;
}

std::string artg_csv(const std::vector<ArtgTrace>& traces) {
  std::ostringstream os;
  os << "rollout,t,artg,deviation,success\n";
  for (std::size_t i = 0; i < traces.size(); ++i) {
    for (std::size_t t = 0; t < traces[i].artg.size(); ++t) {
      os << i << ',' << t << ',' << format_double(traces[i].artg[t]) << ',' << format_double(traces[i].deviation[t])
         << ',' << (traces[i].success ? 1 : 0) << '\n';
    }
  }
  return os.str();
}

std::vector<TargetRow> target_sweep(const Environment& env, const std::shared_ptr<WaypointTransformer>& model,
                                    const ConditioningScheme& trained, const std::vector<double>& omegas,
                                    std::size_t n_episodes, std::uint64_t seed, double gamma) {
  if (n_episodes == 0) throw std::invalid_argument("target_sweep: need episodes");
  std::vector<TargetRow> rows;
  for (double w : omegas) {
    const State omega{w};
    TransformerAgent agent(model, evaluation_scheme(trained, omega, env.default_max_steps(), gamma));
    std::vector<double> achieved;
    for (std::size_t e = 0; e < n_episodes; ++e) {
      achieved.push_back(rollout(env, agent, omega, env.default_max_steps(), derive_seed(seed, e)).ret);
    }
    const MeanStd ms = mean_std(achieved);
    rows.push_back({w, ms.mean, ms.std});
  }
  return rows;
}

std::string target_csv(const std::vector<TargetRow>& rows) {
  std::ostringstream os;
  os << "omega,mean_achieved,std\n";
  for (const auto& r : rows) {
    os << format_double(r.omega) << ',' << format_double(r.mean_achieved) << ',' << format_double(r.std) << '\n';
  }
  return os.str();
}

std::vector<SchemeRow> scheme_compare(const Dataset& dataset, const std::vector<std::string>& schemes,
                                      const PipelineConfig& base, const std::vector<std::uint64_t>& seeds,
                                      std::size_t n_episodes, const State& omega, std::size_t jobs) {
  if (schemes.empty() || seeds.empty()) throw std::invalid_argument("scheme_compare: need schemes and seeds");
  std::vector<SchemeRow> rows;
  for (const auto& name : schemes) {
    SchemeRow row;
    row.scheme = name;
    row.seed_scores = parallel_map(seeds.size(), jobs, [&](std::size_t i) {
      PipelineConfig c = base;
      c.seed = seeds[i];
      c.scheme = name;
      c.out_dir.reset();
      return train_and_score(dataset, c, n_episodes, omega);
    });
    const MeanStd ms = mean_std(row.seed_scores);
    row.mean = ms.mean;
    row.std = ms.std;
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string scheme_csv(const std::vector<SchemeRow>& rows) {
  std::ostringstream os;
  os << "scheme,mean,std\n";
  for (const auto& r : rows) os << r.scheme << ',' << format_double(r.mean) << ',' << format_double(r.std) << '\n';
  return os.str();
}

}  // namespace wayrvs
