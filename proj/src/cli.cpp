#include "wayrvs/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "wayrvs/checkpoint.hpp"
#include "wayrvs/eval.hpp"

namespace wayrvs {

namespace fs = std::filesystem;

// ------------------------------------------------------------------ schema

const std::vector<ConfigKey>& config_schema() {
  using K = KeyType;
  static const std::vector<std::string> kSchemes{"waypoint-goal",    "global-goal",      "manual-waypoints",
                                                 "reward-waypoint",  "constant-artg",    "monte-carlo-crtg",
                                                 "oracle-future"};
  static const std::vector<ConfigKey> schema{
      {"profile", K::kText, "desk", "paper", "default set: desk (minutes on one core) or paper (full-scale sizes)",
       {"desk", "paper"}},
      {"seed", K::kInt, "0", "0", "base seed; every random stream derives from it", {}},
      {"seeds", K::kInt, "5", "5", "consecutive seeds from --seed for multi-seed commands", {}},
      {"jobs", K::kInt, "1", "1", "threads across seeds", {}},
      {"out", K::kText, "run", "run", "run directory; nothing is written outside it", {}},

      {"env", K::kText, "maze:stitch-7x9", "maze:stitch-7x9",
       "chain[:H=,lambda=] | maze:<stitch-7x9|open-5x5> | hazard[:T=]", {}},
      {"n", K::kInt, "2000", "2000", "trajectories to generate", {}},
      {"data", K::kText, "", "", "existing .traj file instead of generating", {}},
      {"delay", K::kBool, "false", "false", "move every return onto the final reward", {}},
      {"noise", K::kReal, "0.2", "0.2", "maze play noise probability", {}},
      {"span_cap", K::kReal, "0.05", "0.05", "maze cap on start-to-target spanning trajectories", {}},
      {"mixture", K::kText, "0:0.5,1:0.5", "0:0.5,1:0.5", "hazard behaviour mixture epsilon:weight,...", {}},

      {"lambda", K::kReal, "0.5", "0.5", "chain behaviour probability of the stay action", {}},
      {"H", K::kInt, "10", "10", "chain length", {}},
      {"chain_traj", K::kInt, "100000", "100000", "chain trajectories for the closed-form check", {}},

      {"scheme", K::kText, "waypoint-goal", "waypoint-goal", "conditioning scheme", kSchemes},
      {"K", K::kInt, "3", "3", "goal waypoint horizon", {}},
      {"gamma", K::kReal, "1", "1", "discount for reward targets", {}},
      {"hindsight", K::kText, "uniform-future", "uniform-future", "goal relabelling", {"uniform-future", "final-state"}},
      {"waypoints", K::kText, "", "", "manual waypoint file of x,y lines (layout defaults when empty)", {}},
      {"net_ckpt", K::kText, "", "", "frozen waypoint checkpoint for train-policy", {}},

      {"net.hidden", K::kInt, "64", "256", "waypoint MLP width", {}},
      {"net.layers", K::kInt, "3", "3", "waypoint MLP hidden layers", {}},
      {"net.steps", K::kInt, "1500", "40000", "waypoint gradient steps", {}},
      {"net.batch", K::kInt, "256", "1024", "waypoint batch size", {}},
      {"net.lr", K::kReal, "0.001", "0.001", "waypoint learning rate", {}},
      {"net.eval_every", K::kInt, "250", "250", "steps between held-out RMSE points", {}},
      {"net.holdout", K::kReal, "0.1", "0.1", "held-out trajectory fraction", {}},

      {"wt.layers", K::kInt, "2", "2", "transformer blocks", {}},
      {"wt.heads", K::kInt, "4", "16", "attention heads", {}},
      {"wt.embed_dim", K::kInt, "32", "128", "model width", {}},
      {"wt.context", K::kInt, "10", "20", "context window k", {}},
      {"wt.dropout_attn", K::kReal, "0.15", "0.15", "attention dropout", {}},
      {"wt.dropout_resid", K::kReal, "0.15", "0.15", "residual dropout", {}},
      {"wt.dropout_embd", K::kReal, "0", "0", "embedding dropout", {}},
      {"wt.action_conditioning", K::kBool, "false", "false", "interleave action tokens", {}},

      {"train.steps", K::kInt, "1000", "30000", "policy gradient steps", {}},
      {"train.batch", K::kInt, "64", "1024", "windows per step", {}},
      {"train.lr", K::kReal, "0.001", "0.001", "policy learning rate", {}},
      {"train.loss_every", K::kInt, "50", "50", "steps between loss points", {}},
      {"train.clip_norm", K::kReal, "0", "0", "global gradient clip (0 = off)", {}},

      {"episodes", K::kInt, "100", "100", "evaluation rollouts per policy", {}},
      {"omega", K::kRealList, "", "", "evaluation target (goal coordinates or return); empty = environment default",
       {}},
      {"act_mode", K::kText, "sample", "sample", "action selection", {"sample", "argmax"}},
      {"run", K::kText, "", "", "trained run directory to evaluate", {}},

      {"Ks", K::kIntList, "0,1,2,3,4,6", "0,1,2,3,4,6", "K values for the sweep (0 = global goal)", {}},
      {"schemes", K::kTextList, "global-goal,manual-waypoints,waypoint-goal",
       "global-goal,manual-waypoints,waypoint-goal", "schemes to compare", {}},
      {"taus", K::kRealList, "0,10,20,30,40,50,60,70,80,90,100", "0,10,20,30,40,50,60,70,80,90,100",
       "profile thresholds", {}},
      {"omegas", K::kRealList, "10,20,40,60,80,100,120", "10,20,40,60,80,100,120", "target returns to sweep", {}},
      {"scores", K::kText, "", "", "score file for profile (one per line, or a CSV with a normalized/mean column)",
       {}},

      {"bv.sets", K::kInt, "100", "100", "random paired sample sets for the identity check", {}},
      {"bv.size", K::kInt, "10000", "10000", "samples per set", {}},
      {"tolerance", K::kReal, "0.02", "0.02", "relative performance-matching tolerance", {}},
      {"crtg", K::kBool, "true", "true", "also train policies for the CRTG variance study", {}},
  };
  return schema;
}

namespace {

const ConfigKey& schema_key(const std::string& name) {
  for (const auto& k : config_schema()) {
    if (k.name == name) return k;
  }
  throw ConfigError(name, "unknown key");
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  return out;
}

bool parse_integer(const std::string& s, long long& v) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  return ec == std::errc() && p == end && !s.empty();
}

bool parse_real(const std::string& s, double& v) {
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  return ec == std::errc() && p == end && !s.empty() && std::isfinite(v);
}

bool parse_bool(const std::string& s, bool& v) {
  if (s == "true" || s == "1") {
    v = true;
    return true;
  }
  if (s == "false" || s == "0") {
    v = false;
    return true;
  }
  return false;
}

void check_value(const ConfigKey& key, const std::string& value) {
  long long i = 0;
  double r = 0.0;
  bool b = false;
  switch (key.type) {
    case KeyType::kInt:
      if (!parse_integer(value, i)) throw ConfigError(key.name, "expected an integer, got '" + value + "'");
      break;
    case KeyType::kReal:
      if (!parse_real(value, r)) throw ConfigError(key.name, "expected a number, got '" + value + "'");
      break;
    case KeyType::kBool:
      if (!parse_bool(value, b)) throw ConfigError(key.name, "expected true or false, got '" + value + "'");
      break;
    case KeyType::kIntList:
      for (const auto& item : split(value, ',')) {
        if (!parse_integer(item, i)) throw ConfigError(key.name, "expected integers, got '" + item + "'");
      }
      break;
    case KeyType::kRealList:
      for (const auto& item : split(value, ',')) {
        if (!parse_real(item, r)) throw ConfigError(key.name, "expected numbers, got '" + item + "'");
      }
      break;
    case KeyType::kText:
    case KeyType::kTextList:
      break;
  }
  if (!key.choices.empty()) {
    const auto items = key.type == KeyType::kTextList ? split(value, ',') : std::vector<std::string>{value};
    for (const auto& item : items) {
      if (std::find(key.choices.begin(), key.choices.end(), item) == key.choices.end()) {
        throw ConfigError(key.name, "'" + item + "' is not one of the allowed values");
      }
    }
  }
}

}  // namespace

// ----------------------------------------------------------------- RunConfig

const std::string& RunConfig::text(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError(key, "not set");
  return it->second;
}

long long RunConfig::integer(const std::string& key) const {
  long long v = 0;
  if (!parse_integer(text(key), v)) throw ConfigError(key, "expected an integer");
  return v;
}

std::size_t RunConfig::count(const std::string& key) const {
  const long long v = integer(key);
  if (v < 0) throw ConfigError(key, "must be non-negative");
  return static_cast<std::size_t>(v);
}

double RunConfig::real(const std::string& key) const {
  double v = 0.0;
  if (!parse_real(text(key), v)) throw ConfigError(key, "expected a number");
  return v;
}

bool RunConfig::flag(const std::string& key) const {
  bool v = false;
  if (!parse_bool(text(key), v)) throw ConfigError(key, "expected true or false");
  return v;
}

std::vector<long long> RunConfig::integers(const std::string& key) const {
  std::vector<long long> out;
  for (const auto& item : split(text(key), ',')) {
    long long v = 0;
    if (!parse_integer(item, v)) throw ConfigError(key, "expected integers");
    out.push_back(v);
  }
  return out;
}

std::vector<double> RunConfig::reals(const std::string& key) const {
  std::vector<double> out;
  for (const auto& item : split(text(key), ',')) {
    double v = 0.0;
    if (!parse_real(item, v)) throw ConfigError(key, "expected numbers");
    out.push_back(v);
  }
  return out;
}

std::vector<std::string> RunConfig::texts(const std::string& key) const { return split(text(key), ','); }

std::map<std::string, std::string> parse_config_text(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(ss, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number), "expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    schema_key(key);
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

RunConfig resolve_config(const std::optional<fs::path>& file, const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> from_file;
  if (file) {
    std::ifstream in(*file);
    if (!in) throw ConfigError("config", "cannot read " + file->string());
    std::stringstream buf;
    buf << in.rdbuf();
    from_file = parse_config_text(buf.str());
  }
  for (const auto& [k, v] : overrides) schema_key(k);

  std::string profile = "desk";
  if (auto it = from_file.find("profile"); it != from_file.end()) profile = it->second;
  if (auto it = overrides.find("profile"); it != overrides.end()) profile = it->second;
  check_value(schema_key("profile"), profile);

  RunConfig config;
  for (const auto& key : config_schema()) config.values()[key.name] = profile == "paper" ? key.paper : key.desk;
  for (const auto& [k, v] : from_file) config.values()[k] = v;
  for (const auto& [k, v] : overrides) config.values()[k] = v;
  config.values()["profile"] = profile;
  for (const auto& key : config_schema()) check_value(key, config.values().at(key.name));
  return config;
}

std::string format_config(const RunConfig& config) {
  std::ostringstream os;
  for (const auto& [k, v] : config.values()) os << k << " = " << v << '\n';
  return os.str();
}

// ------------------------------------------------------------------ builders

PipelineConfig pipeline_config(const RunConfig& c) {
  PipelineConfig p;
  p.scheme = c.text("scheme");
  p.K = c.count("K");
  p.gamma = c.real("gamma");
  p.seed = static_cast<std::uint64_t>(c.integer("seed"));
  p.net.hidden = c.count("net.hidden");
  p.net.hidden_layers = c.count("net.layers");
  p.net.hindsight = parse_hindsight(c.text("hindsight"));
  p.net_train.steps = c.count("net.steps");
  p.net_train.batch = c.count("net.batch");
  p.net_train.learning_rate = c.real("net.lr");
  p.net_train.eval_every = c.count("net.eval_every");
  p.net_train.holdout_fraction = c.real("net.holdout");
  p.wt.layers = c.count("wt.layers");
  p.wt.heads = c.count("wt.heads");
  p.wt.embed_dim = c.count("wt.embed_dim");
  p.wt.context = c.count("wt.context");
  p.wt.dropout_attn = c.real("wt.dropout_attn");
  p.wt.dropout_resid = c.real("wt.dropout_resid");
  p.wt.dropout_embd = c.real("wt.dropout_embd");
  p.wt.action_conditioning = c.flag("wt.action_conditioning");
  p.train.steps = c.count("train.steps");
  p.train.batch = c.count("train.batch");
  p.train.learning_rate = c.real("train.lr");
  p.train.loss_every = c.count("train.loss_every");
  p.train.clip_norm = c.real("train.clip_norm");
  if (!c.text("waypoints").empty()) p.manual_waypoints = load_manual_waypoints(c.text("waypoints"));
  validate(p.wt);
  validate(p.train);
  return p;
}

Dataset dataset_from_config(const RunConfig& c) {
  Dataset ds;
  if (!c.text("data").empty()) {
    ds = read_dataset(c.text("data"));
  } else {
    const auto env = make_env(c.text("env"));
    const std::size_t n = c.count("n");
    const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
    if (const auto* chain = dynamic_cast<const ChainEnv*>(env.get())) {
      ds = chain_generate(chain->config(), n, seed);
    } else if (const auto* maze = dynamic_cast<const MazeEnv*>(env.get())) {
      ds = maze_generate_play(maze->maze(), n, {c.real("span_cap"), c.real("noise")}, seed);
    } else if (const auto* hazard = dynamic_cast<const HazardEnv*>(env.get())) {
      ds = hazard_generate(hazard->config(), parse_mixture(c.text("mixture")), n, seed);
    } else {
      throw std::invalid_argument("no generator for " + c.text("env"));
    }
    ds.env_name = env->name();
  }
  if (c.flag("delay")) ds = delay_rewards(ds);
  return ds;
}

namespace {

// ------------------------------------------------------------ command glue

struct Command {
  std::string name;
  std::string help;
  std::vector<std::string> keys;
  std::map<std::string, std::string> defaults;  // command-specific defaults
};

const std::vector<std::string> kData{"env", "n", "data", "delay", "noise", "span_cap", "mixture"};
const std::vector<std::string> kNet{"net.hidden", "net.layers",       "net.steps",  "net.batch",
                                    "net.lr",     "net.eval_every",   "net.holdout"};
const std::vector<std::string> kWt{"wt.layers",         "wt.heads",        "wt.embed_dim",
                                   "wt.context",        "wt.dropout_attn", "wt.dropout_resid",
                                   "wt.dropout_embd",   "wt.action_conditioning"};
const std::vector<std::string> kTrain{"train.steps", "train.batch", "train.lr", "train.loss_every",
                                      "train.clip_norm"};
const std::vector<std::string> kScheme{"scheme", "K", "gamma", "hindsight", "waypoints"};
const std::vector<std::string> kEval{"episodes", "omega", "act_mode"};

std::vector<std::string> join(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out{"profile", "seed", "out", "jobs"};
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

const std::map<std::string, std::string> kHazardDefaults{{"env", "hazard"}, {"scheme", "reward-waypoint"}};

std::vector<Command> commands() {
  return {
      {"gen-data", "generate an offline dataset into datasets/", join({kData}), {}},
      {"train-waypoints", "train the waypoint net the environment calls for", join({kData, {"K", "gamma", "hindsight"}, kNet}),
       {}},
      {"train-policy", "train a policy against a frozen waypoint checkpoint", join({kData, kScheme, {"net_ckpt"}, kNet, kWt, kTrain}),
       {}},
      {"pipeline", "two-stage training followed by evaluation", join({kData, kScheme, kNet, kWt, kTrain, kEval}), {}},
      {"eval", "evaluate a trained run directory", join({{"run"}, kEval}), {{"out", "eval"}}},
      {"ablate-k", "score versus K sweep (K = 0 is the global goal)",
       join({{"seeds", "Ks", "gamma", "hindsight"}, kData, kNet, kWt, kTrain, {"episodes", "omega"}}), {}},
      {"scheme-compare", "train and score several conditioning schemes",
       join({{"seeds", "schemes", "K", "gamma", "hindsight", "waypoints", "taus"}, kData, kNet, kWt, kTrain,
             {"episodes", "omega"}}),
       {}},
      {"chain-verify", "closed-form chain conditionals against counted frequencies",
       join({{"lambda", "H", "K", "chain_traj"}}), {}},
      {"analyze-bias-variance", "squared-error identity check and CRTG variance curves",
       join({{"seeds", "bv.sets", "bv.size", "tolerance", "crtg", "gamma"}, kData, kNet, kWt, kTrain,
             {"episodes", "omega"}}),
       {{"env", "hazard"}, {"mixture", "0:0.3,0.05:0.4,1:0.3"}}},
      {"target-sweep", "achieved return versus conditioning target", join({kData, kScheme, kNet, kWt, kTrain, {"episodes", "omegas"}}),
       kHazardDefaults},
      {"profile", "performance profile of a score list", join({{"scores", "taus"}}), {}},
  };
}

std::string with_point(double v) {
  std::string s = format_double(v);
  if (s.find_first_of(".eE") == std::string::npos && s.find("inf") == std::string::npos &&
      s.find("nan") == std::string::npos) {
    s += ".0";
  }
  return s;
}

std::vector<std::uint64_t> seed_list(const RunConfig& c) {
  std::vector<std::uint64_t> out;
  const auto base = static_cast<std::uint64_t>(c.integer("seed"));
  const std::size_t n = c.count("seeds");
  if (n == 0) throw ConfigError("seeds", "must be positive");
  for (std::size_t i = 0; i < n; ++i) out.push_back(base + i);
  return out;
}

State omega_of(const RunConfig& c, const Environment& env) {
  const std::vector<double> w = c.reals("omega");
  return w.empty() ? default_omega(env) : State(w.begin(), w.end());
}

Dataset prepare_dataset(const RunConfig& c, const fs::path& out) {
  Dataset ds = dataset_from_config(c);
  write_dataset(out / "datasets" / "dataset.traj", ds);
  return ds;
}

// Rebuilds the trained policy and scheme of a pipeline run directory.
struct LoadedRun {
  std::unique_ptr<Environment> env;
  std::shared_ptr<WaypointTransformer> policy;
  ConditioningScheme scheme;
};

LoadedRun load_run(const RunConfig& run_cfg, const fs::path& dir) {
  LoadedRun r;
  const Dataset header = read_dataset(dir / "datasets" / "dataset.traj");
  r.env = make_env(header.env_name);
  const PipelineConfig p = pipeline_config(run_cfg);
  const std::size_t sdim = r.env->state_dim();
  std::shared_ptr<WaypointNet> net;
  if (const auto kind = scheme_net_kind(p.scheme)) {
    WaypointNetConfig nc = p.net;
    nc.K = p.K;
    nc.gamma = p.gamma;
    net = std::make_shared<WaypointNet>(*kind, sdim, *kind == WaypointKind::kGoal ? sdim : 1, nc, 0);
    net->load(load_checkpoint(dir / ("run." + net->prefix() + ".ckpt")));
  }
  r.scheme = make_scheme(p.scheme, p, *r.env, net);
  // Manual waypoints ride on a waypoint-goal policy, so the token width is
  // that of the goal scheme.
  const std::size_t pdim = phi_dim(r.scheme, sdim);
  r.policy = std::make_shared<WaypointTransformer>(sdim, pdim, r.env->num_actions(), p.wt, 0);
  r.policy->load(load_checkpoint(dir / "run.policy.ckpt"));
  return r;
}

void write_text(const fs::path& path, const std::string& text) { write_file(path, text); }

// ------------------------------------------------------------- subcommands

int cmd_gen_data(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  std::size_t steps = 0;
  for (const auto& t : ds.trajectories) steps += t.length();
  os << "wrote " << ds.trajectories.size() << " trajectories (" << steps << " steps) to "
     << (out / "datasets" / "dataset.traj").string() << '\n';
  return 0;
}

int cmd_train_waypoints(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  PipelineConfig p = pipeline_config(c);
  WaypointNetConfig nc = p.net;
  nc.K = p.K;
  nc.gamma = p.gamma;
  WaypointTrainConfig tc = p.net_train;
  tc.seed = derive_seed(p.seed, 11);
  const std::size_t sdim = env->state_dim();
  const bool goal = env->task() == TaskKind::kGoal;
  WaypointNet net(goal ? WaypointKind::kGoal : WaypointKind::kReward, sdim, goal ? sdim : 1, nc,
                  derive_seed(p.seed, 10));
  const WaypointTrainResult r = goal ? train_goal_net(ds, net, tc) : train_reward_net(ds, net, tc);
  save_checkpoint(out / ("run." + net.prefix() + ".ckpt"), net.checkpoint());
  std::ostringstream csv;
  csv << "step,rmse\n";
  for (const auto& point : r.curve) csv << point.step << ',' << format_double(point.rmse) << '\n';
  write_text(out / "metrics" / "run.rmse.csv", csv.str());
  os << net.prefix() << " held-out rmse " << format_double(r.initial_rmse()) << " -> " << format_double(r.final_rmse())
     << '\n';
  return 0;
}

int cmd_train_policy(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  PipelineConfig p = pipeline_config(c);
  if (const auto kind = scheme_net_kind(p.scheme)) {
    if (c.text("net_ckpt").empty()) throw ConfigError("net_ckpt", "scheme " + p.scheme + " needs a waypoint checkpoint");
    WaypointNetConfig nc = p.net;
    nc.K = p.K;
    nc.gamma = p.gamma;
    const std::size_t sdim = env->state_dim();
    p.pretrained_net = std::make_shared<WaypointNet>(*kind, sdim, *kind == WaypointKind::kGoal ? sdim : 1, nc, 0);
    p.pretrained_net->load(load_checkpoint(c.text("net_ckpt")));
  }
  p.out_dir = out;
  const PipelineResult r = pipeline(ds, p);
  os << "policy loss " << format_double(r.policy_curve.initial_loss) << " -> "
     << format_double(r.policy_curve.loss_curve.back().loss) << '\n';
  return 0;
}

int cmd_pipeline(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  PipelineConfig p = pipeline_config(c);
  p.out_dir = out;
  const PipelineResult r = pipeline(ds, p);
  const EvalReport report = evaluate_pipeline(*env, r, omega_of(c, *env), c.count("episodes"),
                                              derive_seed(p.seed, 0xEE), p.gamma, parse_act_mode(c.text("act_mode")));
  write_text(out / "metrics" / "episodes.csv", episodes_csv(report));
  os << p.scheme << " normalized score " << format_double(report.mean) << " (success rate "
     << format_double(report.success_rate) << ")\n";
  return 0;
}

int cmd_eval(const RunConfig& c, const fs::path& out, std::ostream& os) {
  if (c.text("run").empty()) throw ConfigError("run", "eval needs --run <directory>");
  const fs::path dir = c.text("run");
  const RunConfig run_cfg = resolve_config(dir / "resolved.cfg", {});
  const LoadedRun r = load_run(run_cfg, dir);
  const State omega = omega_of(c, *r.env);
  TransformerAgent agent(r.policy,
                         evaluation_scheme(r.scheme, omega, r.env->default_max_steps(), run_cfg.real("gamma")),
                         parse_act_mode(c.text("act_mode")));
  const EvalReport report = evaluate(*r.env, agent, omega, c.count("episodes"),
                                     {derive_seed(static_cast<std::uint64_t>(c.integer("seed")), 0xEE)});
  write_text(out / "metrics" / "episodes.csv", episodes_csv(report));
  os << "normalized score " << format_double(report.mean) << " (success rate " << format_double(report.success_rate)
     << ")\n";
  return 0;
}

int cmd_ablate_k(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  std::vector<std::size_t> Ks;
  for (long long k : c.integers("Ks")) {
    if (k < 0) throw ConfigError("Ks", "K values must be non-negative");
    Ks.push_back(static_cast<std::size_t>(k));
  }
  if (Ks.empty()) throw ConfigError("Ks", "empty sweep");
  PipelineConfig base = pipeline_config(c);
  const auto rows = k_sweep(ds, Ks, base, seed_list(c), c.count("episodes"), c.count("jobs"));
  write_text(out / "metrics" / "k_sweep.csv", k_sweep_csv(rows));
  for (const auto& r : rows) os << "K=" << r.K << ' ' << format_double(r.mean) << " +- " << format_double(r.std) << '\n';
  return 0;
}

int cmd_scheme_compare(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  const auto schemes = c.texts("schemes");
  if (schemes.empty()) throw ConfigError("schemes", "empty list");
  PipelineConfig base = pipeline_config(c);
  const std::vector<double> w = c.reals("omega");
  const auto rows = scheme_compare(ds, schemes, base, seed_list(c), c.count("episodes"), State(w.begin(), w.end()),
                                   c.count("jobs"));
  write_text(out / "metrics" / "schemes.csv", scheme_csv(rows));
  for (const auto& r : rows) {
    write_text(out / "metrics" / ("profile." + r.scheme + ".csv"),
               profile_csv(performance_profile(r.seed_scores, c.reals("taus"))));
    os << r.scheme << ' ' << format_double(r.mean) << " +- " << format_double(r.std) << '\n';
  }
  return 0;
}

int cmd_chain_verify(const RunConfig& c, const fs::path& out, std::ostream& os) {
  ChainMdpConfig cfg;
  cfg.H = static_cast<int>(c.integer("H"));
  cfg.lambda = c.real("lambda");
  const std::size_t K = c.count("K");
  const ChainMle m = exact_chain_mle(cfg, K, c.count("chain_traj"), static_cast<std::uint64_t>(c.integer("seed")));
  os << "p_waypoint = " << with_point(m.p_waypoint) << '\n';
  os << "p_global = " << with_point(m.p_global) << '\n';
  os << "empirical_waypoint = " << format_double(m.empirical_waypoint) << " over " << m.waypoint_count
     << " steps\n";
  os << "empirical_global = " << format_double(m.empirical_global) << " over " << m.global_count << " steps\n";
  std::ostringstream csv;
  csv << "quantity,closed_form,empirical,count\n";
  csv << "p_waypoint," << format_double(m.p_waypoint) << ',' << format_double(m.empirical_waypoint) << ','
      << m.waypoint_count << '\n';
  csv << "p_global," << format_double(m.p_global) << ',' << format_double(m.empirical_global) << ',' << m.global_count
      << '\n';
  write_text(out / "metrics" / "chain_verify.csv", csv.str());
  return 0;
}

int cmd_bias_variance(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const auto seed = static_cast<std::uint64_t>(c.integer("seed"));
  const std::size_t sets = c.count("bv.sets");
  const std::size_t size = c.count("bv.size");
  Rng rng(derive_seed(seed, 0xB1A5));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(-5.0, 5.0);
  std::ostringstream csv;
  csv << "set,lhs,bias_sq,variance,rhs,gap\n";
  double worst = 0.0;
  for (std::size_t s = 0; s < sets; ++s) {
    const double bias = uniform(rng);
    const double scale = std::exp(uniform(rng) / 2.0);
    std::vector<double> R(size);
    std::vector<double> Rhat(size);
    for (std::size_t i = 0; i < size; ++i) {
      R[i] = 100.0 * normal(rng);
      Rhat[i] = R[i] + bias + scale * normal(rng);
    }
    const BiasVariance bv = bias_variance_identity(R, Rhat);
    worst = std::max(worst, bv.gap);
    csv << s << ',' << format_double(bv.lhs) << ',' << format_double(bv.bias_sq) << ',' << format_double(bv.variance)
        << ',' << format_double(bv.rhs) << ',' << format_double(bv.gap) << '\n';
  }
  write_text(out / "metrics" / "bias_variance.csv", csv.str());
  os << "identity: max gap " << format_double(worst) << " over " << sets << " sets\n";
  if (!c.flag("crtg")) return 0;

  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  if (env->task() != TaskKind::kReward) throw ConfigError("env", "the CRTG study needs a reward environment");
  const State omega = omega_of(c, *env);
  const std::size_t episodes = c.count("episodes");
  const PipelineConfig base = pipeline_config(c);
  const auto seeds = seed_list(c);

  auto rollouts_for = [&](const std::string& scheme, std::uint64_t s) {
    PipelineConfig p = base;
    p.scheme = scheme;
    p.seed = s;
    const PipelineResult r = pipeline(ds, p);
    TransformerAgent agent(r.policy, evaluation_scheme(r.scheme, omega, env->default_max_steps(), p.gamma));
    std::vector<RolloutResult> out_rolls;
    for (std::size_t e = 0; e < episodes; ++e) {
      out_rolls.push_back(rollout(*env, agent, omega, env->default_max_steps(), derive_seed(s, 0xC0 + e)));
    }
    return out_rolls;
  };

  const std::vector<double> ratios = parallel_map(seeds.size(), c.count("jobs"), [&](std::size_t i) {
    const auto mc = rollouts_for("monte-carlo-crtg", seeds[i]);
    const auto wp = rollouts_for("reward-waypoint", seeds[i]);
    const auto rows = crtg_variance_curves(mc, wp, c.real("tolerance"));
    write_text(out / "metrics" / ("crtg_variance.seed" + std::to_string(seeds[i]) + ".csv"), variance_csv(rows));
    return final_quartile_ratio(rows);
  });
  std::ostringstream rcsv;
  rcsv << "seed,final_quartile_ratio\n";
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    rcsv << seeds[i] << ',' << format_double(ratios[i]) << '\n';
    os << "seed " << seeds[i] << ": std_mc / std_wp over the final alive quartile = " << format_double(ratios[i])
       << '\n';
  }
  write_text(out / "metrics" / "crtg_ratio.csv", rcsv.str());

  // ARTG traces of a constant-ARTG policy for the first seed.
  PipelineConfig p = base;
  p.scheme = "constant-artg";
  p.seed = seeds.front();
  const PipelineResult r = pipeline(ds, p);
  const double theta_a = omega.at(0) / static_cast<double>(env->default_max_steps());
  TransformerAgent agent(r.policy, ConstantArtgScheme{theta_a});
  std::vector<RolloutResult> rolls;
  for (std::size_t e = 0; e < episodes; ++e) {
    rolls.push_back(rollout(*env, agent, omega, env->default_max_steps(), derive_seed(p.seed, 0xA0 + e)));
  }
  write_text(out / "metrics" / "artg_trace.csv", artg_csv(artg_trace(rolls, theta_a)));
  return 0;
}

int cmd_target_sweep(const RunConfig& c, const fs::path& out, std::ostream& os) {
  const Dataset ds = prepare_dataset(c, out);
  const auto env = make_env(ds.env_name);
  PipelineConfig p = pipeline_config(c);
  p.out_dir = out;
  const PipelineResult r = pipeline(ds, p);
  const auto rows = target_sweep(*env, r.policy, r.scheme, c.reals("omegas"), c.count("episodes"),
                                 derive_seed(p.seed, 0x7A), p.gamma);
  write_text(out / "metrics" / "target_sweep.csv", target_csv(rows));
  for (const auto& row : rows) {
    os << "omega " << format_double(row.omega) << " -> " << format_double(row.mean_achieved) << " +- "
       << format_double(row.std) << '\n';
  }
  return 0;
}

std::vector<double> read_scores(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::vector<double> out;
  long column = -1;
  bool first = true;
  while (std::getline(in, line)) {
    line = trim(line);
    if (line.empty()) continue;
    const auto fields = split(line, ',');
    if (first) {
      first = false;
      double probe = 0.0;
      if (!parse_real(fields.front(), probe)) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
          if (fields[i] == "normalized" || fields[i] == "mean" || fields[i] == "score") column = static_cast<long>(i);
        }
        if (column < 0) throw std::runtime_error("score file header has no normalized/mean/score column");
        continue;
      }
      column = 0;
    }
    double v = 0.0;
    if (column >= static_cast<long>(fields.size()) || !parse_real(fields[static_cast<std::size_t>(column)], v)) {
      throw std::runtime_error("bad score line '" + line + "'");
    }
    out.push_back(v);
  }
  return out;
}

int cmd_profile(const RunConfig& c, const fs::path& out, std::ostream& os) {
  if (c.text("scores").empty()) throw ConfigError("scores", "profile needs --scores <file>");
  const auto profile = performance_profile(read_scores(c.text("scores")), c.reals("taus"));
  write_text(out / "metrics" / "profile.csv", profile_csv(profile));
  for (const auto& p : profile) os << "tau " << format_double(p.tau) << ": " << format_double(p.fraction) << '\n';
  return 0;
}

using Handler = int (*)(const RunConfig&, const fs::path&, std::ostream&);

Handler handler_for(const std::string& name) {
  static const std::map<std::string, Handler> table{
      {"gen-data", cmd_gen_data},
      {"train-waypoints", cmd_train_waypoints},
      {"train-policy", cmd_train_policy},
      {"pipeline", cmd_pipeline},
      {"eval", cmd_eval},
      {"ablate-k", cmd_ablate_k},
      {"scheme-compare", cmd_scheme_compare},
      {"chain-verify", cmd_chain_verify},
      {"analyze-bias-variance", cmd_bias_variance},
      {"target-sweep", cmd_target_sweep},
      {"profile", cmd_profile},
  };
  return table.at(name);
}

std::string default_text(const ConfigKey& key, const Command& cmd) {
  if (auto it = cmd.defaults.find(key.name); it != cmd.defaults.end()) return it->second;
  if (key.desk == key.paper) return key.desk.empty() ? "\"\"" : key.desk;
  return "desk " + key.desk + ", paper " + key.paper;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"waypoint-conditioned offline RL via supervised learning", "wayrvs"};
  app.require_subcommand(1);
  const auto cmds = commands();
  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, std::string> config_files;
  for (const auto& cmd : cmds) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_files[cmd.name], "key = value file; flags override it");
    for (const auto& k : cmd.keys) {
      const ConfigKey& key = schema_key(k);
      std::string help = key.help + " [default: " + default_text(key, cmd) + "]";
      if (!key.choices.empty()) {
        help += " {";
        for (std::size_t i = 0; i < key.choices.size(); ++i) help += (i ? "|" : "") + key.choices[i];
        help += "}";
      }
      sub->add_option("--" + k, flag_values[cmd.name][k], help);
    }
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help() : subs.front()->help());
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto chosen = app.get_subcommands();
    err << (chosen.empty() ? app.help() : chosen.front()->help());
    return 1;
  }

  CLI::App* chosen = app.get_subcommands().front();
  const std::string name = chosen->get_name();
  const Command& cmd = *std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.name == name; });

  RunConfig config;
  try {
    std::map<std::string, std::string> overrides = cmd.defaults;
    for (const auto& k : cmd.keys) {
      if (chosen->count("--" + k) > 0) overrides[k] = flag_values[name][k];
    }
    const std::string& file = config_files[name];
    // Command defaults sit under the file: drop the ones the file sets.
    std::map<std::string, std::string> from_file;
    if (!file.empty()) {
      std::ifstream in(file);
      if (!in) throw ConfigError("config", "cannot read " + file);
      std::stringstream buf;
      buf << in.rdbuf();
      from_file = parse_config_text(buf.str());
    }
    for (const auto& [k, v] : cmd.defaults) {
      if (from_file.count(k) && !chosen->count("--" + k)) overrides.erase(k);
    }
    config = resolve_config(file.empty() ? std::nullopt : std::optional<fs::path>(file), overrides);
    if (config.count("jobs") == 0) throw ConfigError("jobs", "must be positive");
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n\n" << chosen->help();
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }

  try {
    const fs::path out_dir = config.text("out");
    if (name == "eval" && !config.text("run").empty() && fs::exists(out_dir) &&
        fs::equivalent(out_dir, config.text("run"))) {
      throw ConfigError("out", "eval must write outside the run it reads");
    }
    fs::create_directories(out_dir);
    write_file(out_dir / "resolved.cfg", format_config(config));
    return handler_for(name)(config, out_dir, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
}

int run(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args, std::cout, std::cerr);
}

}  // namespace wayrvs
