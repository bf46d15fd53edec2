#include "talktrack/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

enum Stream : std::uint64_t { kPolicyInit = 11, kValueInit = 12, kRollout = 13, kShuffle = 14 };

}  // namespace

void PpoConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail(ErrorKind::kConfig, "ppo.gamma must lie in [0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) fail(ErrorKind::kConfig, "ppo.gae_lambda must lie in [0, 1]");
  if (!(clip_epsilon > 0.0)) fail(ErrorKind::kConfig, "ppo.clip_epsilon must be positive");
  if (!(entropy_coef >= 0.0)) fail(ErrorKind::kConfig, "ppo.entropy_coef must be >= 0");
  if (!(value_coef >= 0.0)) fail(ErrorKind::kConfig, "ppo.value_coef must be >= 0");
  if (epochs_per_batch < 1) fail(ErrorKind::kConfig, "ppo.epochs_per_batch must be >= 1");
  if (minibatch_size < 1) fail(ErrorKind::kConfig, "ppo.minibatch_size must be >= 1");
  if (rollout_episodes < 1) fail(ErrorKind::kConfig, "ppo.rollout_episodes must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorKind::kConfig, "ppo.learning_rate must be positive");
  if (!(reference_kl_coef >= 0.0)) fail(ErrorKind::kConfig, "ppo.reference_kl_coef must be >= 0");
}

std::vector<int> mlp_dims(int input, const std::vector<int>& hidden, int output) {
  std::vector<int> dims{input};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(output);
  return dims;
}

std::size_t sample_action(std::span<const double> probs, std::span<const std::size_t> allowed, Rng& rng) {
  if (allowed.empty()) fail(ErrorKind::kProtocol, "empty allowed set");
  const double u = rng.uniform();
  double acc = 0.0;
  for (auto a : allowed) {
    acc += probs[a];
    if (u < acc) return a;
  }
  return allowed.back();
}

RolloutBatch collect_rollout(const Mlp& policy, const Mlp& value_net, Environment& env, ComplianceGate& gate,
                             const EncoderConfig& encoder, std::size_t episodes, Rng& rng,
                             std::size_t first_episode, const RewardHook& reward_hook) {
  if (episodes < 1) fail(ErrorKind::kConfig, "rollout needs at least one episode");
  const auto& scenario = env.scenario();
  const auto& segments = scenario.spec().segments;
  RolloutBatch batch;
  for (std::size_t e = 0; e < episodes; ++e) {
    DialogueState state = env.reset(segments[(first_episode + e) % segments.size()].id);
    double ret = 0.0;
    bool done = false;
    while (!done) {
      RolloutStep step;
      step.state_enc = encode_state(state, encoder).values;
      step.allowed = gate.allowed(scenario, state);
      const auto logits = policy.forward(step.state_enc);
      const auto probs = masked_softmax(logits, step.allowed);
      step.action = sample_action(probs, step.allowed, rng);
      step.old_log_prob = logits[step.action] - log_sum_exp(logits, step.allowed);
      step.value = value_net.forward(step.state_enc)[0];
      gate.screen(step.action, state, "agent");
      if (reward_hook) {
        auto [next, finished] = env.advance(state, step.action);
        step.reward = reward_hook(state, step.state_enc, step.allowed, step.action, step.old_log_prob);
        done = finished;
        state = std::move(next);
      } else {
        auto out = env.step(state, step.action);
        step.reward = out.reward;
        done = out.done;
        state = std::move(out.next_state);
      }
      step.done = done;
      ret += step.reward;
      batch.steps.push_back(std::move(step));
    }
    batch.episode_returns.push_back(ret);
  }
  return batch;
}

GaeResult compute_gae(std::span<const double> rewards, std::span<const double> values,
                      const std::vector<bool>& dones, double gamma, double gae_lambda) {
  const std::size_t n = rewards.size();
  if (values.size() != n || dones.size() != n)
    fail(ErrorKind::kProtocol, "compute_gae: rewards, values and dones differ in length");
  GaeResult r;
  r.advantages.assign(n, 0.0);
  r.returns.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    // A batch that stops mid-episode is treated like an episode end.
    const bool last = dones[i] || i + 1 == n;
    const double next_value = last ? 0.0 : values[i + 1];
    const double delta = rewards[i] + gamma * next_value - values[i];
    const double adv = last ? delta : delta + gamma * gae_lambda * next_adv;
    r.advantages[i] = adv;
    r.returns[i] = adv + values[i];
    next_adv = adv;
  }
  return r;
}

double clipped_objective(double ratio, double advantage, double clip_epsilon) {
  const double clipped = std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

PpoLoss ppo_objective(const Mlp& policy, const Mlp& value_net, std::span<const RolloutStep* const> steps,
                      std::span<const double> advantages, std::span<const double> returns,
                      const PpoConfig& cfg, std::vector<double>* policy_grad, std::vector<double>* value_grad) {
  const std::size_t n = steps.size();
  if (n == 0) fail(ErrorKind::kProtocol, "empty minibatch");
  if (advantages.size() != n || returns.size() != n)
    fail(ErrorKind::kProtocol, "minibatch, advantages and returns differ in length");
  const double inv = 1.0 / static_cast<double>(n);
  const double sign = cfg.subtract_entropy ? -1.0 : 1.0;
  PpoLoss loss;
  Mlp::Cache pc, vc;
  std::vector<double> g(policy.output_dim());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = *steps[i];
    const auto logits = policy.forward(s.state_enc, pc);
    const double lse = log_sum_exp(logits, s.allowed);
    const double logp = logits[s.action] - lse;
    const double ratio = std::exp(logp - s.old_log_prob);
    const double a = advantages[i];
    const double unclipped = ratio * a;
    const double obj = clipped_objective(ratio, a, cfg.clip_epsilon);
    loss.l_clip += obj * inv;
    loss.kl_estimate += (s.old_log_prob - logp) * inv;
    double h = 0.0;
    for (auto j : s.allowed) {
      const double lp = logits[j] - lse;
      h -= std::exp(lp) * lp;
    }
    loss.entropy += h * inv;
    const bool has_ref = cfg.reference_kl_coef > 0.0 && !s.reference_log_probs.empty();
    double kl_ref = 0.0;
    if (has_ref) {
      for (auto j : s.allowed) {
        const double lp = logits[j] - lse;
        kl_ref += std::exp(lp) * (lp - s.reference_log_probs[j]);
      }
      loss.reference_kl += kl_ref * inv;
    }

    if (policy_grad) {
      std::fill(g.begin(), g.end(), 0.0);
      const bool surrogate_active = unclipped <= obj;
      for (auto j : s.allowed) {
        const double lp = logits[j] - lse;
        const double p = std::exp(lp);
        double d = 0.0;  // d(objective)/d(logit j)
        if (surrogate_active) d += a * ratio * ((j == s.action ? 1.0 : 0.0) - p);
        d += sign * cfg.entropy_coef * (-p * (lp + h));
        if (has_ref) d -= cfg.reference_kl_coef * p * (lp - s.reference_log_probs[j] - kl_ref);
        g[j] = -d * inv;
      }
      policy.backward(pc, g, *policy_grad);
    }

    const double v = value_net.forward(s.state_enc, vc)[0];
    const double err = v - returns[i];
    loss.value_loss += err * err * inv;
    if (value_grad) {
      const double dv = cfg.value_coef * 2.0 * err * inv;
      value_net.backward(vc, std::span<const double>(&dv, 1), *value_grad);
    }
  }
  loss.objective = loss.l_clip + sign * cfg.entropy_coef * loss.entropy - cfg.value_coef * loss.value_loss -
                   cfg.reference_kl_coef * loss.reference_kl;
  return loss;
}

PpoLoss ppo_update(Mlp& policy, Mlp& value_net, const RolloutBatch& batch, const PpoConfig& cfg,
                   PpoOptimizers& opt, Rng& rng) {
  const std::size_t n = batch.steps.size();
  if (n == 0) fail(ErrorKind::kProtocol, "ppo_update: empty batch");
  std::vector<double> rewards(n), values(n);
  std::vector<bool> dones(n);
  for (std::size_t i = 0; i < n; ++i) {
    rewards[i] = batch.steps[i].reward;
    values[i] = batch.steps[i].value;
    dones[i] = batch.steps[i].done;
  }
  auto gae = compute_gae(rewards, values, dones, cfg.gamma, cfg.gae_lambda);
  auto adv = gae.advantages;
  if (cfg.constant_reward_guard) {
    const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
    if (*hi - *lo == 0.0) std::fill(adv.begin(), adv.end(), 0.0);
  }
  if (cfg.normalize_advantages) {
    const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / static_cast<double>(n);
    double var = 0.0;
    for (double x : adv) var += (x - mean) * (x - mean);
    const double sd = std::max(std::sqrt(var / static_cast<double>(n)), 1e-8);
    for (double& x : adv) x = (x - mean) / sd;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  PpoLoss total;
  std::size_t count = 0;
  std::vector<double> pg(policy.num_parameters()), vg(value_net.num_parameters());
  for (std::size_t epoch = 0; epoch < cfg.epochs_per_batch; ++epoch) {
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
    for (std::size_t start = 0; start < n; start += cfg.minibatch_size) {
      const std::size_t end = std::min(n, start + cfg.minibatch_size);
      std::vector<const RolloutStep*> mb;
      std::vector<double> mb_adv, mb_ret;
      for (std::size_t k = start; k < end; ++k) {
        mb.push_back(&batch.steps[order[k]]);
        mb_adv.push_back(adv[order[k]]);
        mb_ret.push_back(gae.returns[order[k]]);
      }
      std::fill(pg.begin(), pg.end(), 0.0);
      std::fill(vg.begin(), vg.end(), 0.0);
      const auto l = ppo_objective(policy, value_net, mb, mb_adv, mb_ret, cfg, &pg, &vg);
      if (!std::isfinite(l.objective)) fail(ErrorKind::kDivergence, "non-finite PPO objective");
      opt.policy.step(policy, pg);
      opt.value.step(value_net, vg);
      total.objective += l.objective;
      total.l_clip += l.l_clip;
      total.entropy += l.entropy;
      total.value_loss += l.value_loss;
      total.kl_estimate += l.kl_estimate;
      total.reference_kl += l.reference_kl;
      ++count;
    }
  }
  const double inv = 1.0 / static_cast<double>(count);
  total.objective *= inv;
  total.l_clip *= inv;
  total.entropy *= inv;
  total.value_loss *= inv;
  total.kl_estimate *= inv;
  total.reference_kl *= inv;
  return total;
}

nlohmann::json ppo_metrics_json(std::size_t iteration, double mean_return, const PpoLoss& loss) {
  return {{"iteration", iteration}, {"mean_return", mean_return}, {"l_clip", loss.l_clip},
          {"entropy", loss.entropy}, {"value_loss", loss.value_loss}, {"kl_estimate", loss.kl_estimate}};
}

TrainingResult ppo_loop(Mlp policy, Mlp value_net, Environment& env, ComplianceGate& gate,
                        const EncoderConfig& encoder, const PpoConfig& cfg, std::uint64_t seed,
                        const RewardHook& reward_hook, std::string algo) {
  cfg.validate();
  Rng rollout_rng(derive_seed(seed, kRollout));
  Rng shuffle_rng(derive_seed(seed, kShuffle));
  OptimizerConfig oc{OptimizerKind::kAdam, cfg.learning_rate};
  PpoOptimizers opt{Optimizer(oc, policy.num_parameters()), Optimizer(oc, value_net.num_parameters())};
  TrainingResult result;
  for (std::size_t it = 0; it < cfg.num_iterations; ++it) {
    const auto batch = collect_rollout(policy, value_net, env, gate, encoder, cfg.rollout_episodes,
                                       rollout_rng, it * cfg.rollout_episodes, reward_hook);
    const auto loss = ppo_update(policy, value_net, batch, cfg, opt, shuffle_rng);
    const double mean_return = std::accumulate(batch.episode_returns.begin(), batch.episode_returns.end(), 0.0) /
                               static_cast<double>(batch.episodes());
    result.metrics.push_back(ppo_metrics_json(it, mean_return, loss));
    result.env_steps += batch.steps.size();
    result.episodes += batch.episodes();
  }
  result.artifact = make_artifact(std::move(algo), encoder, env.scenario().catalog(),
                                  {{"policy", std::move(policy)}, {"value", std::move(value_net)}}, "");
  return result;
}

TrainingResult run_ppo(Environment& env, ComplianceGate& gate, const EncoderConfig& encoder,
                       const PpoConfig& cfg, std::uint64_t seed) {
  const int actions = static_cast<int>(env.scenario().catalog().size());
  auto policy = Mlp::random(mlp_dims(encoder.dimension, cfg.hidden, actions), derive_seed(seed, kPolicyInit));
  auto value = Mlp::random(mlp_dims(encoder.dimension, cfg.hidden, 1), derive_seed(seed, kValueInit));
  return ppo_loop(std::move(policy), std::move(value), env, gate, encoder, cfg, seed);
}

}  // namespace talktrack
