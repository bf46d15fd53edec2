#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/dqn.hpp"
#include "talktrack/mlp.hpp"
#include "talktrack/policy.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

struct PpoConfig {
  double gamma = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  std::size_t epochs_per_batch = 4;
  std::size_t minibatch_size = 64;
  std::size_t rollout_episodes = 32;
  std::size_t num_iterations = 200;
  double learning_rate = 3e-4;
  bool normalize_advantages = true;
  // Subtracts beta * H from the objective instead of adding it.
  bool subtract_entropy = false;
  // Zero the advantages when every reward in a batch is identical: such a
  // batch carries no preference signal, only value-estimate noise.
  bool constant_reward_guard = false;
  // Weight of KL(pi || reference) subtracted from the objective; only steps
  // carrying reference log-probabilities contribute.
  double reference_kl_coef = 0.0;
  std::vector<int> hidden = {64, 64};
  void validate() const;
};

struct RolloutStep {
  std::vector<double> state_enc;
  std::size_t action = 0;
  double reward = 0.0;
  double old_log_prob = 0.0;
  double value = 0.0;
  bool done = false;
  std::vector<std::size_t> allowed;
  std::vector<double> reference_log_probs;  // indexed by action; empty when unused
};

struct RolloutBatch {
  std::vector<RolloutStep> steps;
  std::vector<double> episode_returns;
  std::size_t episodes() const { return episode_returns.size(); }
};

// Replaces the environment reward when set. Receives the encoded state, the
// allowed set, the action and its log-probability under the rollout policy.
using RewardHook = std::function<double(const DialogueState& state, std::span<const double> state_enc,
                                        std::span<const std::size_t> allowed, std::size_t action,
                                        double log_prob)>;

// Draws an index from `probs` restricted to `allowed` with one uniform draw.
std::size_t sample_action(std::span<const double> probs, std::span<const std::size_t> allowed, Rng& rng);

// Runs `episodes` episodes, segments round-robin starting at `first_episode`.
// Actions are sampled from the masked softmax of the policy logits and
// screened by the gate. With a reward hook the environment reward channel is
// never read.
RolloutBatch collect_rollout(const Mlp& policy, const Mlp& value_net, Environment& env, ComplianceGate& gate,
                             const EncoderConfig& encoder, std::size_t episodes, Rng& rng,
                             std::size_t first_episode = 0, const RewardHook& reward_hook = nullptr);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// Episodes are separated by done flags; nothing is bootstrapped across them.
GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      const std::vector<bool>& dones, double gamma, double gae_lambda);

// min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)
double clipped_objective(double ratio, double advantage, double clip_epsilon);

struct PpoLoss {
  // l_clip + s * beta * entropy - value_coef * value_loss - reference_kl_coef * reference_kl
  double objective = 0.0;
  double l_clip = 0.0;
  double entropy = 0.0;
  double value_loss = 0.0;
  double kl_estimate = 0.0;
  double reference_kl = 0.0;
};

// Evaluates the objective on a minibatch. When gradient buffers are given,
// adds the gradient of -objective (the quantity the optimizers minimize).
PpoLoss ppo_objective(const Mlp& policy, const Mlp& value_net, std::span<const RolloutStep* const> steps,
                      std::span<const double> advantages, std::span<const double> returns,
                      const PpoConfig& cfg, std::vector<double>* policy_grad = nullptr,
                      std::vector<double>* value_grad = nullptr);

struct PpoOptimizers {
  Optimizer policy;
  Optimizer value;
};

// K epochs of shuffled minibatch updates. Returns the components averaged
// over all minibatches.
PpoLoss ppo_update(Mlp& policy, Mlp& value_net, const RolloutBatch& batch, const PpoConfig& cfg,
                   PpoOptimizers& opt, Rng& rng);

nlohmann::json ppo_metrics_json(std::size_t iteration, double mean_return, const PpoLoss& loss);

// Alternates rollout collection and updates starting from the given networks.
// Produces an artifact with "policy" and "value" heads.
TrainingResult ppo_loop(Mlp policy, Mlp value_net, Environment& env, ComplianceGate& gate,
                        const EncoderConfig& encoder, const PpoConfig& cfg, std::uint64_t seed,
                        const RewardHook& reward_hook = nullptr, std::string algo = "ppo");

TrainingResult run_ppo(Environment& env, ComplianceGate& gate, const EncoderConfig& encoder,
                       const PpoConfig& cfg, std::uint64_t seed);

std::vector<int> mlp_dims(int input, const std::vector<int>& hidden, int output);

}  // namespace talktrack
