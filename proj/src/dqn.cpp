#include "talktrack/dqn.hpp"

#include <algorithm>
#include <cmath>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

enum Stream : std::uint64_t { kInit = 1, kExplore = 2, kSample = 3 };

}  // namespace

void DqnConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail(ErrorKind::kConfig, "dqn.gamma must lie in [0, 1]");
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 && epsilon_end <= 1.0))
    fail(ErrorKind::kConfig, "dqn epsilons must lie in [0, 1]");
  if (epsilon_end > epsilon_start) fail(ErrorKind::kConfig, "dqn.epsilon_end must not exceed epsilon_start");
  if (!(epsilon_decay > 0.0 && epsilon_decay <= 1.0)) fail(ErrorKind::kConfig, "dqn.epsilon_decay must lie in (0, 1]");
  if (target_update_period < 1) fail(ErrorKind::kConfig, "dqn.target_update_period must be >= 1");
  if (batch_size < 1) fail(ErrorKind::kConfig, "dqn.batch_size must be >= 1");
  if (buffer_capacity < batch_size) fail(ErrorKind::kConfig, "dqn.buffer_capacity must be >= batch_size");
  if (!(learning_rate > 0.0)) fail(ErrorKind::kConfig, "dqn.learning_rate must be positive");
  if (max_turns < 0) fail(ErrorKind::kConfig, "dqn.max_turns must be >= 0");
}

std::size_t select_action(const Mlp& q_net, std::span<const double> state_enc, double epsilon,
                          std::span<const std::size_t> allowed, Rng& rng) {
  if (allowed.empty()) fail(ErrorKind::kProtocol, "empty allowed set: the fallback must always be allowed");
  if (epsilon > 0.0 && rng.uniform() < epsilon) return allowed[rng.uniform_index(allowed.size())];
  return masked_argmax(q_net.forward(state_enc), allowed);
}

std::vector<double> td_targets(std::span<const Transition* const> batch, const Mlp& target_net,
                               double gamma) {
  std::vector<double> y;
  y.reserve(batch.size());
  for (const auto* t : batch) {
    if (t->done || gamma == 0.0) {
      y.push_back(t->reward);
      continue;
    }
    if (t->allowed_next.empty()) fail(ErrorKind::kProtocol, "non-terminal transition without next-state mask");
    const auto q_next = target_net.forward(t->next_state_enc);
    double best = q_next[t->allowed_next.front()];
    for (auto a : t->allowed_next) best = std::max(best, q_next[a]);
    y.push_back(t->reward + gamma * best);
  }
  return y;
}

double td_loss(const Mlp& q_net, const Mlp& target_net, std::span<const Transition* const> batch,
               double gamma) {
  const auto y = td_targets(batch, target_net, gamma);
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double err = q_net.forward(batch[i]->state_enc)[batch[i]->action] - y[i];
    loss += err * err;
  }
  return loss / static_cast<double>(batch.size());
}

double train_on_batch(Mlp& q_net, const Mlp& target_net, std::span<const Transition* const> batch,
                      double gamma, Optimizer& opt) {
  if (batch.empty()) fail(ErrorKind::kProtocol, "empty minibatch");
  const auto y = td_targets(batch, target_net, gamma);
  std::vector<double> grad(q_net.num_parameters(), 0.0);
  std::vector<double> out_grad(q_net.output_dim(), 0.0);
  Mlp::Cache cache;
  const double scale = 1.0 / static_cast<double>(batch.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto q = q_net.forward(batch[i]->state_enc, cache);
    const double err = q[batch[i]->action] - y[i];
    loss += err * err;
    std::fill(out_grad.begin(), out_grad.end(), 0.0);
    out_grad[batch[i]->action] = 2.0 * err * scale;
    q_net.backward(cache, out_grad, grad);
  }
  loss *= scale;
  if (!std::isfinite(loss)) fail(ErrorKind::kDivergence, "non-finite TD loss");
  opt.step(q_net, grad);
  return loss;
}

double train_step(Mlp& q_net, const Mlp& target_net, const ReplayBuffer& buffer, const DqnConfig& cfg,
                  Optimizer& opt, Rng& rng) {
  if (buffer.size() < cfg.batch_size) fail(ErrorKind::kProtocol, "replay buffer below warmup size");
  const auto batch = buffer.sample_uniform(cfg.batch_size, rng);
  return train_on_batch(q_net, target_net, batch, cfg.gamma, opt);
}

nlohmann::json DqnEpisodeMetrics::to_json() const {
  return {{"episode", episode}, {"return", episode_return}, {"epsilon", epsilon},
          {"loss_mean", loss_mean}, {"steps", steps}};
}

PolicyArtifact make_artifact(std::string algo, const EncoderConfig& encoder, const ActionCatalog& catalog,
                             std::map<std::string, Mlp> networks, std::string config_digest) {
  PolicyArtifact a;
  a.algo = std::move(algo);
  a.encoder = encoder;
  a.encoder_fingerprint = encoder.fingerprint();
  for (const auto& u : catalog.utterances()) a.action_ids.push_back(u.id);
  a.networks = std::move(networks);
  a.config_digest = std::move(config_digest);
  return a;
}

namespace {

std::vector<int> q_dims(const EncoderConfig& encoder, const std::vector<int>& hidden, std::size_t actions) {
  std::vector<int> dims{encoder.dimension};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(static_cast<int>(actions));
  return dims;
}

}  // namespace

TrainingResult run_dqn(Environment& env, ComplianceGate& gate, const EncoderConfig& encoder,
                       const DqnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const auto& scenario = env.scenario();
  const auto& catalog = scenario.catalog();
  Mlp q_net = Mlp::random(q_dims(encoder, cfg.hidden, catalog.size()), derive_seed(seed, kInit));
  Mlp target_net = q_net;
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, q_net.num_parameters());
  ReplayBuffer buffer(cfg.buffer_capacity);
  Rng explore(derive_seed(seed, kExplore));
  Rng sampler(derive_seed(seed, kSample));
  const auto& segments = scenario.spec().segments;

  TrainingResult result;
  double epsilon = cfg.epsilon_start;
  std::uint64_t steps_since_sync = 0;
  for (std::size_t episode = 0; episode < cfg.num_episodes; ++episode) {
    if (cfg.max_env_steps > 0 && result.env_steps >= cfg.max_env_steps) break;
    DialogueState state = env.reset(segments[episode % segments.size()].id);
    if (cfg.max_turns > 0) state.max_turns = cfg.max_turns;
    auto enc = encode_state(state, encoder).values;
    auto allowed = gate.allowed(scenario, state);

    DqnEpisodeMetrics m;
    m.episode = episode;
    m.epsilon = epsilon;
    double loss_sum = 0.0;
    std::size_t updates = 0;
    bool done = false;
    while (!done) {
      if (cfg.max_env_steps > 0 && result.env_steps >= cfg.max_env_steps) break;
      const auto action = select_action(q_net, enc, epsilon, allowed, explore);
      gate.screen(action, state, "agent");
      auto out = env.step(state, action);
      ++result.env_steps;
      ++m.steps;
      m.episode_return += out.reward;
      done = out.done;

      Transition t;
      t.state_enc = std::move(enc);
      t.action = action;
      t.reward = out.reward;
      t.next_state_enc = encode_state(out.next_state, encoder).values;
      t.done = done;
      if (!done) t.allowed_next = gate.allowed(scenario, out.next_state);
      enc = t.next_state_enc;
      allowed = t.allowed_next;
      buffer.push(std::move(t));
      state = std::move(out.next_state);

      if (buffer.size() >= cfg.batch_size) {
        loss_sum += train_step(q_net, target_net, buffer, cfg, opt, sampler);
        ++updates;
      }
      if (++steps_since_sync >= cfg.target_update_period) {
        target_net = q_net;
        steps_since_sync = 0;
      }
    }
    m.loss_mean = updates > 0 ? loss_sum / static_cast<double>(updates) : 0.0;
    result.metrics.push_back(m.to_json());
    ++result.episodes;
    epsilon = std::max(cfg.epsilon_end, epsilon * cfg.epsilon_decay);
  }
  result.artifact = make_artifact("dqn", encoder, catalog, {{"q", std::move(q_net)}}, "");
  return result;
}

TrainingResult run_dqn_offline(const std::vector<Transition>& transitions, const ActionCatalog& catalog,
                               const EncoderConfig& encoder, const DqnConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (transitions.empty()) fail(ErrorKind::kData, "no training data: the logs produced no transitions");
  Mlp q_net = Mlp::random(q_dims(encoder, cfg.hidden, catalog.size()), derive_seed(seed, kInit));
  Mlp target_net = q_net;
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, q_net.num_parameters());
  ReplayBuffer buffer(std::max(transitions.size(), cfg.batch_size));
  for (const auto& t : transitions) buffer.push(t);
  Rng sampler(derive_seed(seed, kSample));

  TrainingResult result;
  const std::size_t report_every = 1000;
  double loss_sum = 0.0;
  for (std::size_t step = 1; step <= cfg.offline_updates; ++step) {
    // Small logs are sampled with replacement rather than waiting for warmup.
    const auto batch = buffer.sample_uniform(cfg.batch_size, sampler);
    loss_sum += train_on_batch(q_net, target_net, batch, cfg.gamma, opt);
    if (step % cfg.target_update_period == 0) target_net = q_net;
    if (step % report_every == 0 || step == cfg.offline_updates) {
      const std::size_t span = step % report_every == 0 ? report_every : step % report_every;
      result.metrics.push_back({{"update", step}, {"loss_mean", loss_sum / static_cast<double>(span)},
                                {"transitions", transitions.size()}});
      loss_sum = 0.0;
    }
  }
  result.artifact = make_artifact("dqn", encoder, catalog, {{"q", std::move(q_net)}}, "");
  return result;
}

}  // namespace talktrack
