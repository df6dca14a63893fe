#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "wayrvs/checkpoint.hpp"
#include "wayrvs/cli.hpp"

using namespace wayrvs;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result cli(std::vector<std::string> args) {
  std::ostringstream out;
  std::ostringstream err;
  const int code = run(args, out, err);
  return {code, out.str(), err.str()};
}

class Scratch {
 public:
  explicit Scratch(const std::string& name) : dir_(fs::temp_directory_path() / ("wayrvs_cli_" + name)) {
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  ~Scratch() { fs::remove_all(dir_); }
  fs::path operator/(const std::string& p) const { return dir_ / p; }
  const fs::path& path() const { return dir_; }

 private:
  fs::path dir_;
};

std::size_t count_files(const fs::path& dir) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.is_regular_file();
  return n;
}

}  // namespace

TEST(Config, DeskAndPaperDefaults) {
  const RunConfig desk = resolve_config(std::nullopt, {});
  EXPECT_EQ(desk.text("profile"), "desk");
  EXPECT_EQ(desk.count("wt.layers"), 2u);
  EXPECT_EQ(desk.real("train.lr"), 0.001);
  EXPECT_EQ(desk.real("wt.dropout_attn"), 0.15);

  const RunConfig paper = resolve_config(std::nullopt, {{"profile", "paper"}});
  EXPECT_EQ(paper.count("wt.layers"), 2u);
  EXPECT_EQ(paper.count("wt.heads"), 16u);
  EXPECT_EQ(paper.count("wt.embed_dim"), 128u);
  EXPECT_EQ(paper.count("wt.context"), 20u);
  EXPECT_EQ(paper.real("wt.dropout_attn"), 0.15);
  EXPECT_EQ(paper.real("wt.dropout_resid"), 0.15);
  EXPECT_EQ(paper.real("wt.dropout_embd"), 0.0);
  EXPECT_EQ(paper.real("train.lr"), 0.001);
  EXPECT_EQ(paper.count("train.steps"), 30000u);
  EXPECT_EQ(paper.count("train.batch"), 1024u);
  EXPECT_EQ(paper.count("net.layers"), 3u);
  EXPECT_EQ(paper.count("net.steps"), 40000u);
  EXPECT_EQ(paper.count("net.batch"), 1024u);
  EXPECT_EQ(paper.real("net.lr"), 0.001);
  EXPECT_FALSE(paper.flag("wt.action_conditioning"));
}

TEST(Config, FlagsOverrideFile) {
  Scratch s("precedence");
  {
    std::ofstream f(s / "run.cfg");
    f << "# comment\nprofile = paper\nK = 4\nseed = 3\n";
  }
  const RunConfig c = resolve_config(s / "run.cfg", {{"K", "2"}});
  EXPECT_EQ(c.count("K"), 2u);
  EXPECT_EQ(c.integer("seed"), 3);
  EXPECT_EQ(c.count("wt.heads"), 16u);
  const RunConfig back = resolve_config(std::nullopt, parse_config_text(format_config(c)));
  EXPECT_EQ(back.values(), c.values());
}

TEST(Config, ErrorsNameTheKey) {
  try {
    resolve_config(std::nullopt, {{"train.steps", "many"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "train.steps");
  }
  try {
    resolve_config(std::nullopt, {{"bogus", "1"}});
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_EQ(e.key(), "bogus");
  }
  EXPECT_THROW(resolve_config(std::nullopt, {{"scheme", "nope"}}), ConfigError);
  EXPECT_THROW(parse_config_text("K 3\n"), ConfigError);
  EXPECT_THROW(parse_config_text("unknown = 3\n"), ConfigError);
}

TEST(Config, PipelineBuilderReadsEveryGroup) {
  const RunConfig c = resolve_config(std::nullopt, {{"wt.heads", "2"}, {"train.steps", "7"}, {"net.hidden", "9"}});
  const PipelineConfig p = pipeline_config(c);
  EXPECT_EQ(p.wt.heads, 2u);
  EXPECT_EQ(p.train.steps, 7u);
  EXPECT_EQ(p.net.hidden, 9u);
  EXPECT_EQ(p.scheme, "waypoint-goal");
}

TEST(Cli, UsageErrors) {
  EXPECT_EQ(cli({}).code, 1);
  const Result unknown = cli({"frobnicate"});
  EXPECT_EQ(unknown.code, 1);
  EXPECT_FALSE(unknown.err.empty());
  EXPECT_EQ(cli({"gen-data", "--no-such-flag", "1"}).code, 1);
  const Result bad = cli({"gen-data", "--n", "lots", "--out", (fs::temp_directory_path() / "wayrvs_never").string()});
  EXPECT_EQ(bad.code, 1);
  EXPECT_NE(bad.err.find("n:"), std::string::npos) << bad.err;
  EXPECT_FALSE(fs::exists(fs::temp_directory_path() / "wayrvs_never"));
}

TEST(Cli, HelpListsEveryFlagWithDefaults) {
  const char* names[] = {"gen-data",       "train-waypoints", "train-policy",          "pipeline",
                         "eval",           "ablate-k",        "scheme-compare",        "chain-verify",
                         "analyze-bias-variance", "target-sweep", "profile"};
  for (const char* name : names) {
    const Result r = cli({name, "--help"});
    EXPECT_EQ(r.code, 0) << name;
    EXPECT_NE(r.out.find("--config"), std::string::npos) << name;
    EXPECT_NE(r.out.find("--seed"), std::string::npos) << name;
    EXPECT_NE(r.out.find("[default: "), std::string::npos) << name;
  }
  const Result pipeline = cli({"pipeline", "--help"});
  for (const auto& key : {"--wt.heads", "--train.steps", "--net.hidden", "--scheme", "--episodes"}) {
    EXPECT_NE(pipeline.out.find(key), std::string::npos) << key;
  }
  EXPECT_NE(pipeline.out.find("[default: desk 4, paper 16]"), std::string::npos);
}

TEST(Cli, ChainVerify) {
  Scratch s("chain");
  const Result r = cli({"chain-verify", "--lambda", "0.5", "--K", "1", "--chain_traj", "20000", "--out",
                        s.path().string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("p_waypoint = 1.0\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("p_global = 0.5\n"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("empirical_waypoint = 1 over"), std::string::npos) << r.out;
  EXPECT_TRUE(fs::exists(s / "metrics/chain_verify.csv"));
  const std::string cfg = read_file(s / "resolved.cfg");
  EXPECT_NE(cfg.find("lambda = 0.5\n"), std::string::npos);
  EXPECT_NE(cfg.find("profile = desk\n"), std::string::npos);
}

TEST(Cli, GenDataIsReproducibleFromResolvedConfig) {
  Scratch s("gen");
  const std::string a = (s / "a").string();
  const std::string b = (s / "b").string();
  const std::string c = (s / "c").string();
  ASSERT_EQ(cli({"gen-data", "--env", "maze:stitch-7x9", "--n", "200", "--seed", "7", "--out", a}).code, 0);
  ASSERT_EQ(cli({"gen-data", "--env", "maze:stitch-7x9", "--n", "200", "--seed", "7", "--out", b}).code, 0);
  const std::string first = read_file(s / "a/datasets/dataset.traj");
  EXPECT_EQ(first, read_file(s / "b/datasets/dataset.traj"));
  ASSERT_EQ(cli({"gen-data", "--config", (s / "a/resolved.cfg").string(), "--out", c}).code, 0);
  EXPECT_EQ(first, read_file(s / "c/datasets/dataset.traj"));
  // Everything stays under --out.
  for (const auto& e : fs::directory_iterator(s.path())) EXPECT_TRUE(e.is_directory()) << e.path();
}

TEST(Cli, PipelineThenEval) {
  Scratch s("pipeline");
  const std::string run_dir = (s / "run").string();
  const std::vector<std::string> tiny{"--n",           "60", "--net.steps",   "20", "--net.hidden", "16",
                                      "--train.steps", "5",  "--train.batch", "8",  "--wt.embed_dim", "8",
                                      "--wt.heads",    "2",  "--episodes",    "2"};
  std::vector<std::string> args{"pipeline", "--env", "hazard", "--scheme", "reward-waypoint", "--seed", "1",
                                "--out", run_dir};
  args.insert(args.end(), tiny.begin(), tiny.end());
  const Result r = cli(args);
  ASSERT_EQ(r.code, 0) << r.err;
  for (const char* f : {"resolved.cfg", "run.rewardnet.ckpt", "run.policy.ckpt", "metrics/run.loss.csv",
                        "metrics/run.rmse.csv", "metrics/episodes.csv", "datasets/dataset.traj"}) {
    EXPECT_TRUE(fs::exists(s / ("run/" + std::string(f)))) << f;
  }
  EXPECT_FALSE(fs::exists(s / "run/run.goalnet.ckpt"));
  const std::size_t files = count_files(s / "run");

  const Result same_dir = cli({"eval", "--run", run_dir, "--out", run_dir});
  EXPECT_EQ(same_dir.code, 1);
  const Result e = cli({"eval", "--run", run_dir, "--out", (s / "eval").string(), "--episodes", "3"});
  ASSERT_EQ(e.code, 0) << e.err;
  EXPECT_TRUE(fs::exists(s / "eval/metrics/episodes.csv"));
  EXPECT_EQ(count_files(s / "run"), files);
}

TEST(Cli, ProfileFromScores) {
  Scratch s("profile");
  {
    std::ofstream f(s / "scores.csv");
    f << "seed,raw_return,normalized,success,length\n0,1,50,1,10\n1,1,50,1,10\n";
  }
  const Result r = cli({"profile", "--scores", (s / "scores.csv").string(), "--taus", "49,51", "--out",
                        (s / "out").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const std::string csv = read_file(s / "out/metrics/profile.csv");
  EXPECT_EQ(csv, "tau,fraction\n49,1\n51,0\n");
  EXPECT_EQ(cli({"profile", "--scores", (s / "missing.csv").string(), "--out", (s / "out").string()}).code, 2);
}
