#pragma once

#include <span>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/experience.hpp"
#include "talktrack/mlp.hpp"
#include "talktrack/policy.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

struct DqnConfig {
  double gamma = 0.99;
  double epsilon_start = 1.0;
  double epsilon_end = 0.05;
  double epsilon_decay = 0.9995;        // multiplicative, once per episode
  std::size_t target_update_period = 250;  // environment steps
  std::size_t batch_size = 32;
  std::size_t buffer_capacity = 50000;
  double learning_rate = 1e-3;
  std::size_t num_episodes = 15000;
  std::size_t max_env_steps = 50000;    // 0: unlimited
  int max_turns = 0;                    // 0: scenario budget
  std::vector<int> hidden = {64, 64};
  std::size_t offline_updates = 20000;  // gradient steps when training from logs

  void validate() const;
};

// With probability epsilon a uniform draw from `allowed`, otherwise the
// masked argmax of Q (ties to the lowest index). No randomness is consumed
// when epsilon is 0.
std::size_t select_action(const Mlp& q_net, std::span<const double> state_enc, double epsilon,
                          std::span<const std::size_t> allowed, Rng& rng);

// y = r for terminal transitions, else r + gamma * max over allowed_next of Q_target(s', .).
std::vector<double> td_targets(std::span<const Transition* const> batch, const Mlp& target_net,
                               double gamma);

// Mean squared TD error over the batch, without updating anything.
double td_loss(const Mlp& q_net, const Mlp& target_net, std::span<const Transition* const> batch,
               double gamma);

// One gradient step on the given minibatch; returns the pre-update loss.
double train_on_batch(Mlp& q_net, const Mlp& target_net, std::span<const Transition* const> batch,
                      double gamma, Optimizer& opt);

// Samples a minibatch and trains on it. Throws ErrorKind::kProtocol if the
// buffer holds fewer than batch_size transitions.
double train_step(Mlp& q_net, const Mlp& target_net, const ReplayBuffer& buffer, const DqnConfig& cfg,
                  Optimizer& opt, Rng& rng);

struct DqnEpisodeMetrics {
  std::size_t episode = 0;
  double episode_return = 0.0;
  double epsilon = 0.0;
  double loss_mean = 0.0;
  std::size_t steps = 0;

  nlohmann::json to_json() const;
};

struct TrainingResult {
  PolicyArtifact artifact;
  std::vector<nlohmann::json> metrics;
  std::uint64_t env_steps = 0;
  std::uint64_t episodes = 0;
};

PolicyArtifact make_artifact(std::string algo, const EncoderConfig& encoder, const ActionCatalog& catalog,
                             std::map<std::string, Mlp> networks, std::string config_digest);

// Online training against an environment (sampled or aggregate feedback).
// Every action comes from the compliance mask and is screened by the gate.
TrainingResult run_dqn(Environment& env, ComplianceGate& gate, const EncoderConfig& encoder,
                       const DqnConfig& cfg, std::uint64_t seed);

// Off-policy training on logged transitions only.
TrainingResult run_dqn_offline(const std::vector<Transition>& transitions, const ActionCatalog& catalog,
                               const EncoderConfig& encoder, const DqnConfig& cfg, std::uint64_t seed);

}  // namespace talktrack
