#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <string>

#include "talktrack/config.hpp"
#include "test_support.hpp"

namespace talktrack {
namespace {

using testing::data_path;
using testing::kind_of;

std::string data_section() {
  return "[data]\n"
         "scenario = \"" + data_path("toyshop/scenario.json") + "\"\n"
         "catalog = \"" + data_path("toyshop/catalog.json") + "\"\n"
         "rules = \"" + data_path("toyshop/rules.json") + "\"\n";
}

std::string config_message(const std::string& text) {
  try {
    RunConfig::from_toml(text);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig) << e.what();
    return e.what();
  }
  ADD_FAILURE() << "expected a config error";
  return {};
}

TEST(Toml, ParsesScalarsArraysAndSections) {
  const auto j = parse_toml(
      "# comment\n"
      "name = \"a \\\"quoted\\\" \\\\ value\"  # trailing\n"
      "n = -42\n"
      "x = 2.5e-3\n"
      "flag = true\n"
      "\n"
      "[sec]\n"
      "list = [1, 2, 3]\n"
      "names = [\"a\", \"b\"]\n"
      "hash = \"a # inside\"\n");
  EXPECT_EQ(j["name"], "a \"quoted\" \\ value");
  EXPECT_EQ(j["n"], -42);
  EXPECT_TRUE(j["n"].is_number_integer());
  EXPECT_DOUBLE_EQ(j["x"].get<double>(), 2.5e-3);
  EXPECT_EQ(j["flag"], true);
  EXPECT_EQ(j["sec"]["list"], nlohmann::json::array({1, 2, 3}));
  EXPECT_EQ(j["sec"]["names"], nlohmann::json::array({"a", "b"}));
  EXPECT_EQ(j["sec"]["hash"], "a # inside");
}

TEST(Toml, ReportsLineNumbers) {
  for (const auto& [text, line] : std::vector<std::pair<std::string, int>>{
           {"a = 1\nb = \n", 2},
           {"a = 1\na = 2\n", 2},
           {"[s]\n[s]\n", 2},
           {"x = \"open\n", 1},
           {"[broken\n", 1},
           {"a = 1\n\njust words\n", 3},
           {"v = 1.2.3\n", 1}}) {
    try {
      parse_toml(text);
      ADD_FAILURE() << "accepted: " << text;
    } catch (const Error& e) {
      EXPECT_EQ(e.kind(), ErrorKind::kConfig);
      EXPECT_NE(std::string(e.what()).find("line " + std::to_string(line)), std::string::npos) << e.what();
    }
  }
}

TEST(RunConfigTest, ReadsSectionsAndDefaults) {
  const auto c = RunConfig::from_toml("seed = 7\nalgo = \"dqn\"\n" + data_section() +
                                      "[dqn]\ngamma = 0.9\nhidden = [8, 4]\nnum_episodes = 12\n"
                                      "[encoder]\ndimension = 64\n"
                                      "[serve]\nport = 0\n",
                                      "/base");
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.algo, "dqn");
  EXPECT_EQ(c.mode, "online");
  EXPECT_DOUBLE_EQ(c.dqn.gamma, 0.9);
  EXPECT_EQ(c.dqn.hidden, (std::vector<int>{8, 4}));
  EXPECT_EQ(c.dqn.num_episodes, 12u);
  EXPECT_EQ(c.encoder.dimension, 64);
  EXPECT_EQ(c.output_dir, std::filesystem::path("/base/out"));
  EXPECT_EQ(c.serve.state_dir, c.output_dir);
  EXPECT_EQ(c.serve.port, 0);
  EXPECT_FALSE(c.env_seed.has_value());
  EXPECT_EQ(c.effective_env_seed(), derive_seed(7, 1000));
}

TEST(RunConfigTest, DigestFollowsContentNotLayout) {
  const auto base = "seed = 7\nalgo = \"dqn\"\n" + data_section();
  const auto a = RunConfig::from_toml(base + "[dqn]\ngamma = 0.9\n");
  const auto b = RunConfig::from_toml("# a comment\n" + base + "\n[dqn]\ngamma   =   0.9\n");
  const auto c = RunConfig::from_toml(base + "[dqn]\ngamma = 0.8\n");
  EXPECT_EQ(a.digest(), b.digest());
  EXPECT_NE(a.digest(), c.digest());
  const auto moved = RunConfig::from_toml("output_dir = \"/elsewhere\"\n" + base + "[dqn]\ngamma = 0.9\n");
  EXPECT_EQ(a.digest(), moved.digest());
}

TEST(RunConfigTest, ErrorsNameTheFieldPath) {
  const auto base = "seed = 1\nalgo = \"dqn\"\n" + data_section();
  EXPECT_NE(config_message(base + "[dqn]\ngamma = 1.5\n").find("dqn.gamma"), std::string::npos);
  EXPECT_NE(config_message(base + "[dqn]\nbatch_size = -3\n").find("dqn.batch_size"), std::string::npos);
  EXPECT_NE(config_message(base + "[dqn]\ngama = 0.9\n").find("dqn.gama: unknown key"), std::string::npos);
  EXPECT_NE(config_message(base + "[ppo]\nclip_epsilon = \"x\"\n").find("ppo.clip_epsilon"), std::string::npos);
  EXPECT_NE(config_message(base + "[extras]\na = 1\n").find("extras: unknown section"), std::string::npos);
  EXPECT_NE(config_message(base + "bogus = 1\n").find("bogus: unknown key"), std::string::npos);
  EXPECT_NE(config_message(base + "[serve]\nport = 70000\n").find("serve.port"), std::string::npos);
  EXPECT_NE(config_message(base + "[rlhf]\nkl_coef = -1.0\n").find("rlhf.kl_coef"), std::string::npos);
  EXPECT_NE(config_message(base + "[encoder]\ndimension = 4\n").find("encoder.dimension"), std::string::npos);
  EXPECT_NE(config_message("algo = \"dqn\"\n" + data_section()).find("seed: required"), std::string::npos);
  EXPECT_NE(config_message("seed = 1\n" + data_section()).find("algo: required"), std::string::npos);
  EXPECT_NE(config_message("seed = 1\nalgo = \"a2c\"\n" + data_section()).find("algo"), std::string::npos);
  EXPECT_NE(config_message(base + "mode = \"replay\"\n").find("mode"), std::string::npos);
}

TEST(RunConfigTest, MissingFilesAreReportedBeforeWork) {
  EXPECT_NE(config_message("seed = 1\nalgo = \"dqn\"\n[data]\nscenario = \"/nonexistent/s.json\"\n")
                .find("data.scenario"),
            std::string::npos);
  const auto base = "seed = 1\n" + data_section();
  EXPECT_NE(config_message("algo = \"dqn\"\nmode = \"offline\"\n" + base).find("data.logs"), std::string::npos);
  EXPECT_NE(config_message("algo = \"sft\"\n" + base).find("data.dialogues"), std::string::npos);
  EXPECT_NE(config_message("algo = \"reward-model\"\n" + base).find("data.preferences"), std::string::npos);
  EXPECT_NE(config_message("algo = \"rlhf\"\n" + base).find("data.base_artifact"), std::string::npos);
}

TEST(RunConfigTest, OnPolicyAlgorithmsRejectOfflineMode) {
  const auto base = "seed = 1\nmode = \"offline\"\n" + data_section();
  EXPECT_NE(config_message("algo = \"ppo\"\n" + base).find("mode"), std::string::npos);
}

TEST(RunConfigTest, LoadResolvesPathsAgainstTheFile) {
  const auto dir = std::filesystem::temp_directory_path() / "talktrack_config_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir / "d");
  for (const auto* f : {"scenario.json", "catalog.json", "rules.json"})
    std::filesystem::copy_file(data_path(std::string("toyshop/") + f), dir / "d" / f);
  {
    std::ofstream out(dir / "run.toml");
    out << "seed = 3\nalgo = \"ppo\"\noutput_dir = \"o\"\n[data]\nscenario = \"d/scenario.json\"\n"
           "catalog = \"d/catalog.json\"\nrules = \"d/rules.json\"\n";
  }
  const auto c = RunConfig::load(dir / "run.toml");
  EXPECT_EQ(c.scenario, dir / "d" / "scenario.json");
  EXPECT_EQ(c.output_dir, dir / "o");
  EXPECT_EQ(kind_of([&] { RunConfig::load(dir / "missing.toml"); }), ErrorKind::kConfig);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace talktrack
