#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "talktrack/dqn.hpp"
#include "talktrack/ppo.hpp"
#include "talktrack/rlhf.hpp"

namespace talktrack {

// Parses the subset of TOML the run files use: [section] headers, key = value
// pairs with strings, integers, floats, booleans and flat arrays, and #
// comments. Top-level keys land at the root; each section becomes an object.
// Throws ErrorKind::kConfig with the offending line number.
nlohmann::json parse_toml(std::string_view text);

struct ServeConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path artifact;  // policy used for chat and task generation
  std::filesystem::path state_dir;  // labels, tasks and sessions; defaults to output_dir
  double lease_seconds = 120.0;
  bool generate_tasks = true;
  std::size_t max_open_tasks = 64;
};

struct RunConfig {
  std::filesystem::path scenario;
  std::filesystem::path catalog;
  std::filesystem::path rules;
  EncoderConfig encoder;
  std::string algo;  // dqn | ppo | sft | reward-model | rlhf
  std::string mode = "online";  // offline | online | aggregate
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> env_seed;
  std::filesystem::path output_dir;

  // Data sources, by algorithm.
  std::filesystem::path logs;             // dqn offline
  std::filesystem::path dialogues;        // sft
  std::filesystem::path preferences;      // reward-model
  std::filesystem::path base_artifact;    // rlhf
  std::filesystem::path reward_artifact;  // rlhf

  DqnConfig dqn;
  PpoConfig ppo;
  SftConfig sft;
  RewardModelConfig reward_model;
  RlhfConfig rlhf;
  ServeConfig serve;

  // Canonical form of the parsed file, used for the config digest.
  nlohmann::json source;

  static RunConfig from_toml(std::string_view text, const std::filesystem::path& base_dir = {});
  static RunConfig load(const std::filesystem::path& path);
  std::string digest() const;
  std::uint64_t effective_env_seed() const;
};

}  // namespace talktrack
