#pragma once

#include <cstdint>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/dqn.hpp"
#include "talktrack/mlp.hpp"
#include "talktrack/ppo.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

// ---- supervised fine-tuning ----

struct AnnotatedStep {
  std::string state_digest;
  std::vector<double> state_enc;
  std::vector<std::size_t> allowed;  // empty: every action
  std::size_t action = 0;
};

struct AnnotatedDialogue {
  std::string source = "human";  // "human" or "synthetic-expert"
  std::vector<AnnotatedStep> steps;
};

nlohmann::json dialogue_to_json(const AnnotatedDialogue& d);
AnnotatedDialogue dialogue_from_json(const nlohmann::json& j, std::size_t num_actions);
std::vector<AnnotatedDialogue> load_dialogues(const std::filesystem::path& path, std::size_t num_actions);
void save_dialogues(const std::filesystem::path& path, const std::vector<AnnotatedDialogue>& dialogues);

struct SftConfig {
  std::size_t epochs = 300;
  std::size_t minibatch_size = 0;  // 0: full batch
  OptimizerKind optimizer = OptimizerKind::kAdam;
  double learning_rate = 1e-2;
  std::vector<int> hidden = {64};
  void validate() const;
};

// Mean cross-entropy of the annotated actions under the masked softmax.
double sft_loss(const Mlp& policy, const std::vector<AnnotatedStep>& steps);

// Artifact holds a "policy" head. Metrics: one line per epoch {epoch, loss, accuracy}.
TrainingResult sft_train(const std::vector<AnnotatedDialogue>& dialogues, const ActionCatalog& catalog,
                         const EncoderConfig& encoder, const SftConfig& cfg, std::uint64_t seed);

// Rolls out the value-iteration optimal policy (per segment, compliance
// filtered) and records every decision as an expert annotation.
std::vector<AnnotatedDialogue> synthesize_expert_dialogues(const Scenario& scenario, const ComplianceGate& gate,
                                                          const EncoderConfig& encoder, std::size_t episodes,
                                                          double gamma, std::uint64_t seed);

// ---- preferences and reward model ----

enum class Choice { kA, kB };

struct PreferenceRecord {
  std::string state_digest;
  std::vector<double> state_enc;
  std::size_t a = 0;
  std::size_t b = 0;
  Choice choice = Choice::kA;
  std::string annotator;
  std::string ts;
  std::size_t winner() const { return choice == Choice::kA ? a : b; }
  std::size_t loser() const { return choice == Choice::kA ? b : a; }
};

nlohmann::json preference_to_json(const PreferenceRecord& r);
// Throws ErrorKind::kData on schema violations or a == b.
PreferenceRecord preference_from_json(const nlohmann::json& j);

// Append-only JSON-lines store. Appends are serialized and flushed to disk.
class PreferenceStore {
 public:
  explicit PreferenceStore(std::filesystem::path path);
  void append(const PreferenceRecord& record);
  // Immutable snapshot of everything on disk.
  std::vector<PreferenceRecord> snapshot() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path);
void save_preferences(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records);

// Scores (state, action) pairs: an MLP over state_enc ++ one-hot(action).
class RewardModel {
 public:
  RewardModel() = default;
  RewardModel(Mlp net, std::size_t num_actions);
  static RewardModel random(std::size_t state_dim, std::size_t num_actions, const std::vector<int>& hidden,
                            std::uint64_t seed);
  double score(std::span<const double> state_enc, std::size_t action) const;
  std::vector<double> input(std::span<const double> state_enc, std::size_t action) const;
  const Mlp& net() const { return net_; }
  Mlp& net() { return net_; }
  std::size_t num_actions() const { return num_actions_; }

 private:
  Mlp net_;
  std::size_t num_actions_ = 0;
};

// Network stored under the "reward" role of an artifact.
RewardModel reward_model_from_artifact(const PolicyArtifact& artifact);

struct RewardModelConfig {
  std::size_t epochs = 40;
  std::size_t minibatch_size = 64;
  double learning_rate = 3e-3;
  std::vector<int> hidden = {64};
  void validate() const;
};

// Mean of -log sigmoid(R(s, winner) - R(s, loser)).
double bradley_terry_loss(const RewardModel& model, const std::vector<PreferenceRecord>& records);

// Fraction of records whose score ordering agrees with the choice; ties count 0.5.
double preference_accuracy(const RewardModel& model, const std::vector<PreferenceRecord>& records);

// Deterministic split: a record is held out when the hash of its content
// falls in the last tenth.
bool is_held_out(const PreferenceRecord& record);

struct RewardModelResult {
  RewardModel model;
  double train_accuracy = 0.0;
  double held_out_accuracy = 0.0;
  std::size_t train_size = 0;
  std::size_t held_out_size = 0;
  std::vector<nlohmann::json> metrics;
  PolicyArtifact artifact;
};

RewardModelResult reward_model_train(const std::vector<PreferenceRecord>& records, const ActionCatalog& catalog,
                                     const EncoderConfig& encoder, const RewardModelConfig& cfg,
                                     std::uint64_t seed);

// Known ground-truth utility over (phase, action id), used to generate
// synthetic preferences and to grade reward models.
class PlantedUtility {
 public:
  explicit PlantedUtility(std::string salt = "planted", double scale = 2.0) : salt_(std::move(salt)), scale_(scale) {}
  double operator()(std::string_view phase, std::string_view action_id) const;

 private:
  std::string salt_;
  double scale_;
};

struct SyntheticPreferenceConfig {
  std::size_t count = 5000;
  double noise = 0.1;
  double margin = 0.5;
  std::string annotator = "synthetic";
};

struct SyntheticPreference {
  PreferenceRecord record;
  std::string phase;
  bool flipped = false;
  // Choice the planted utility prefers.
  Choice clean_choice() const {
    return flipped ? (record.choice == Choice::kA ? Choice::kB : Choice::kA) : record.choice;
  }
};

// States come from uniform compliant rollouts of random depth; the action
// pair is drawn among allowed actions whose utilities differ by >= margin.
// Throws ErrorKind::kConfig unless 0 <= noise < 0.5.
std::vector<SyntheticPreference> synthesize_preferences(const Scenario& scenario, const ComplianceGate& gate,
                                                        const EncoderConfig& encoder,
                                                        const PlantedUtility& utility,
                                                        const SyntheticPreferenceConfig& cfg, Rng& rng);

// ---- fine-tuning against the reward model ----

struct RlhfConfig {
  PpoConfig ppo;
  double kl_coef = 0.02;
  std::size_t prompts_per_iteration = 128;
  RlhfConfig() {
    // Each prompt is scored on its own, so credit is not carried across turns.
    ppo.gamma = 0.0;
    ppo.gae_lambda = 0.0;
    ppo.num_iterations = 100;
    ppo.learning_rate = 1e-3;
    ppo.hidden = {64};
    ppo.constant_reward_guard = true;
  }
};

// PPO over single-turn prompts: each iteration draws prompts from uniform
// compliant partial rollouts of the environment, samples one action per
// prompt and scores it with the reward model. The policy is regularized by
// kl_coef * KL(pi || pi_base) computed exactly over the allowed actions.
// The environment's reward channel is never read.
TrainingResult rlhf_finetune(const PolicyArtifact& base, const RewardModel& reward_model, Environment& env,
                             ComplianceGate& gate, const RlhfConfig& cfg, std::uint64_t seed);

struct ProbeState {
  DialogueState state;
  std::vector<double> state_enc;
  std::vector<std::size_t> allowed;
};

// Uniform compliant partial rollout of random depth, advanced without reading
// rewards; restarts when the dialogue ends first.
DialogueState sample_prompt(Environment& env, const ComplianceGate& gate, std::string_view segment, Rng& rng);

// Fixed set of prompts from uniform compliant rollouts.
std::vector<ProbeState> probe_states(const Scenario& scenario, const ComplianceGate& gate,
                                     const EncoderConfig& encoder, std::size_t count, std::uint64_t seed);

// Expected reward-model score of the policy's masked softmax over the probes.
double mean_policy_score(const Mlp& policy, const RewardModel& rm, const std::vector<ProbeState>& probes);
// Reward-model score of the planted-utility argmax action over the probes.
double mean_oracle_score(const PlantedUtility& utility, const ActionCatalog& catalog, const RewardModel& rm,
                         const std::vector<ProbeState>& probes);
double mean_total_variation(const Mlp& a, const Mlp& b, const std::vector<ProbeState>& probes);

}  // namespace talktrack
