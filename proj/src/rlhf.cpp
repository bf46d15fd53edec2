#include "talktrack/rlhf.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "talktrack/error.hpp"
#include "talktrack/io.hpp"
#include "talktrack/mdp.hpp"

namespace talktrack {

namespace {

enum Stream : std::uint64_t { kSftInit = 21, kSftShuffle = 22, kRmInit = 31, kRmShuffle = 32,
                              kRlhfValue = 41, kRlhfPrompt = 42, kRlhfAction = 43, kRlhfShuffle = 44 };

std::vector<std::size_t> all_actions(std::size_t n) {
  std::vector<std::size_t> out(n);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.uniform_index(i)]);
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

// log(1 + exp(-x)) without overflow.
double softplus_neg(double x) { return x > 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x)); }

DialogueState random_prompt(const Scenario& scenario, const ComplianceGate& gate, std::string_view segment,
                            Rng& rng) {
  while (true) {
    DialogueState s = scenario.reset(segment);
    const auto depth = rng.uniform_index(static_cast<std::size_t>(scenario.max_turns()));
    bool ended = false;
    for (std::size_t d = 0; d < depth && !ended; ++d) {
      const auto allowed = gate.allowed(scenario, s);
      auto out = scenario.step(s, allowed[rng.uniform_index(allowed.size())], rng);
      ended = out.done;
      s = std::move(out.next_state);
    }
    if (!ended) return s;
  }
}

}  // namespace

// ---- supervised fine-tuning ----

nlohmann::json dialogue_to_json(const AnnotatedDialogue& d) {
  auto steps = nlohmann::json::array();
  for (const auto& s : d.steps)
    steps.push_back({{"state_digest", s.state_digest}, {"state_enc", s.state_enc}, {"allowed", s.allowed},
                     {"action", s.action}});
  return {{"source", d.source}, {"steps", steps}};
}

AnnotatedDialogue dialogue_from_json(const nlohmann::json& j, std::size_t num_actions) {
  try {
    AnnotatedDialogue d;
    d.source = j.value("source", "human");
    if (d.source != "human" && d.source != "synthetic-expert")
      fail(ErrorKind::kData, "dialogue source must be 'human' or 'synthetic-expert'");
    for (const auto& s : j.at("steps")) {
      AnnotatedStep step;
      step.state_digest = s.value("state_digest", "");
      step.state_enc = s.at("state_enc").get<std::vector<double>>();
      if (s.contains("allowed")) step.allowed = s["allowed"].get<std::vector<std::size_t>>();
      step.action = s.at("action").get<std::size_t>();
      if (step.action >= num_actions) fail(ErrorKind::kData, "annotated action index out of range");
      for (auto a : step.allowed)
        if (a >= num_actions) fail(ErrorKind::kData, "allowed action index out of range");
      if (!step.allowed.empty() && std::find(step.allowed.begin(), step.allowed.end(), step.action) == step.allowed.end())
        fail(ErrorKind::kData, "annotated action is not in its allowed set");
      d.steps.push_back(std::move(step));
    }
    return d;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("annotated dialogue: ") + e.what());
  }
}

std::vector<AnnotatedDialogue> load_dialogues(const std::filesystem::path& path, std::size_t num_actions) {
  std::vector<AnnotatedDialogue> out;
  std::size_t line_no = 0;
  for (const auto& line : read_nonblank_lines(path)) {
    ++line_no;
    try {
      out.push_back(dialogue_from_json(nlohmann::json::parse(line), num_actions));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_dialogues(const std::filesystem::path& path, const std::vector<AnnotatedDialogue>& dialogues) {
  ensure_parent_dir(path);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write " + path.string());
  for (const auto& d : dialogues) out << dialogue_to_json(d).dump() << '\n';
}

void SftConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::kConfig, "sft.epochs must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorKind::kConfig, "sft.learning_rate must be positive");
}

double sft_loss(const Mlp& policy, const std::vector<AnnotatedStep>& steps) {
  if (steps.empty()) fail(ErrorKind::kData, "empty dataset");
  const auto every = all_actions(policy.output_dim());
  double loss = 0.0;
  for (const auto& s : steps) {
    const auto logits = policy.forward(s.state_enc);
    const auto& allowed = s.allowed.empty() ? every : s.allowed;
    loss += log_sum_exp(logits, allowed) - logits[s.action];
  }
  return loss / static_cast<double>(steps.size());
}

namespace {

struct SftPass {
  double loss = 0.0;
  double accuracy = 0.0;
};

SftPass sft_gradient(const Mlp& policy, const std::vector<const AnnotatedStep*>& batch, std::vector<double>& grad) {
  const auto every = all_actions(policy.output_dim());
  const double inv = 1.0 / static_cast<double>(batch.size());
  Mlp::Cache cache;
  std::vector<double> g(policy.output_dim());
  SftPass pass;
  std::size_t hits = 0;
  for (const auto* s : batch) {
    const auto logits = policy.forward(s->state_enc, cache);
    const auto& allowed = s->allowed.empty() ? every : s->allowed;
    const auto p = masked_softmax(logits, allowed);
    pass.loss += (log_sum_exp(logits, allowed) - logits[s->action]) * inv;
    hits += masked_argmax(logits, allowed) == s->action;
    std::fill(g.begin(), g.end(), 0.0);
    for (auto a : allowed) g[a] = (p[a] - (a == s->action ? 1.0 : 0.0)) * inv;
    policy.backward(cache, g, grad);
  }
  pass.accuracy = static_cast<double>(hits) / static_cast<double>(batch.size());
  return pass;
}

}  // namespace

TrainingResult sft_train(const std::vector<AnnotatedDialogue>& dialogues, const ActionCatalog& catalog,
                         const EncoderConfig& encoder, const SftConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::vector<const AnnotatedStep*> steps;
  for (const auto& d : dialogues)
    for (const auto& s : d.steps) {
      if (s.state_enc.size() != static_cast<std::size_t>(encoder.dimension))
        fail(ErrorKind::kData, "annotated state encoding does not match the encoder dimension");
      if (s.action >= catalog.size()) fail(ErrorKind::kData, "annotated action index out of range");
      steps.push_back(&s);
    }
  if (steps.empty()) fail(ErrorKind::kData, "empty dataset: no annotated steps");

  auto policy = Mlp::random(mlp_dims(encoder.dimension, cfg.hidden, static_cast<int>(catalog.size())),
                            derive_seed(seed, kSftInit));
  Optimizer opt({cfg.optimizer, cfg.learning_rate}, policy.num_parameters());
  Rng rng(derive_seed(seed, kSftShuffle));
  std::vector<double> grad(policy.num_parameters());
  std::vector<std::size_t> order(steps.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t mb = cfg.minibatch_size == 0 ? steps.size() : cfg.minibatch_size;

  TrainingResult result;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (mb < steps.size()) shuffle(order, rng);
    for (std::size_t start = 0; start < steps.size(); start += mb) {
      std::vector<const AnnotatedStep*> batch;
      for (std::size_t k = start; k < std::min(steps.size(), start + mb); ++k) batch.push_back(steps[order[k]]);
      std::fill(grad.begin(), grad.end(), 0.0);
      sft_gradient(policy, batch, grad);
      opt.step(policy, grad);
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    const auto pass = sft_gradient(policy, steps, grad);
    if (!std::isfinite(pass.loss)) fail(ErrorKind::kDivergence, "non-finite SFT loss");
    result.metrics.push_back({{"epoch", epoch}, {"loss", pass.loss}, {"accuracy", pass.accuracy}});
  }
  result.episodes = dialogues.size();
  result.artifact = make_artifact("sft", encoder, catalog, {{"policy", std::move(policy)}}, "");
  return result;
}

std::vector<AnnotatedDialogue> synthesize_expert_dialogues(const Scenario& scenario, const ComplianceGate& gate,
                                                          const EncoderConfig& encoder, std::size_t episodes,
                                                          double gamma, std::uint64_t seed) {
  const auto& segments = scenario.spec().segments;
  const OraclePolicy oracle(scenario, [&](const DialogueState& s) { return gate.mask(s); }, gamma);
  Rng rng(seed);
  std::vector<AnnotatedDialogue> out;
  for (std::size_t e = 0; e < episodes; ++e) {
    const auto& seg = segments[e % segments.size()].id;
    AnnotatedDialogue d;
    d.source = "synthetic-expert";
    DialogueState s = scenario.reset(seg);
    bool done = false;
    while (!done) {
      const auto allowed = gate.allowed(scenario, s);
      const auto action = oracle.act(s, allowed);
      d.steps.push_back({observation_digest(s), encode_state(s, encoder).values, allowed, action});
      auto step = scenario.step(s, action, rng);
      done = step.done;
      s = std::move(step.next_state);
    }
    out.push_back(std::move(d));
  }
  return out;
}

// ---- preferences ----

nlohmann::json preference_to_json(const PreferenceRecord& r) {
  return {{"state_digest", r.state_digest}, {"state_enc", r.state_enc}, {"a", r.a}, {"b", r.b},
          {"choice", r.choice == Choice::kA ? "A" : "B"}, {"annotator", r.annotator}, {"ts", r.ts}};
}

PreferenceRecord preference_from_json(const nlohmann::json& j) {
  static const std::set<std::string> keys = {"state_digest", "state_enc", "a", "b", "choice", "annotator", "ts"};
  if (!j.is_object()) fail(ErrorKind::kData, "preference record must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!keys.count(k)) fail(ErrorKind::kData, "preference record: unknown field '" + k + "'");
  try {
    PreferenceRecord r;
    r.state_digest = j.value("state_digest", "");
    r.state_enc = j.at("state_enc").get<std::vector<double>>();
    r.a = j.at("a").get<std::size_t>();
    r.b = j.at("b").get<std::size_t>();
    const auto choice = j.at("choice").get<std::string>();
    if (choice != "A" && choice != "B") fail(ErrorKind::kData, "preference record: choice must be 'A' or 'B'");
    r.choice = choice == "A" ? Choice::kA : Choice::kB;
    r.annotator = j.value("annotator", "");
    r.ts = j.value("ts", "");
    if (r.a == r.b) fail(ErrorKind::kData, "preference record: a and b must differ");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("preference record: ") + e.what());
  }
}

PreferenceStore::PreferenceStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
}

void PreferenceStore::append(const PreferenceRecord& record) {
  const auto line = preference_to_json(record).dump();
  std::lock_guard lock(mutex_);
  append_line_synced(path_, line);
}

std::vector<PreferenceRecord> PreferenceStore::snapshot() const {
  std::lock_guard lock(mutex_);
  if (!std::filesystem::exists(path_)) return {};
  return load_preferences(path_);
}

std::vector<PreferenceRecord> load_preferences(const std::filesystem::path& path) {
  std::vector<PreferenceRecord> out;
  std::size_t line_no = 0;
  for (const auto& line : read_nonblank_lines(path)) {
    ++line_no;
    try {
      out.push_back(preference_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      fail(ErrorKind::kData, path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void save_preferences(const std::filesystem::path& path, const std::vector<PreferenceRecord>& records) {
  ensure_parent_dir(path);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write " + path.string());
  for (const auto& r : records) out << preference_to_json(r).dump() << '\n';
}

// ---- reward model ----

RewardModel::RewardModel(Mlp net, std::size_t num_actions) : net_(std::move(net)), num_actions_(num_actions) {
  if (net_.output_dim() != 1) fail(ErrorKind::kData, "reward network must have a scalar output");
  if (net_.input_dim() <= num_actions_) fail(ErrorKind::kData, "reward network input too small");
}

RewardModel RewardModel::random(std::size_t state_dim, std::size_t num_actions, const std::vector<int>& hidden,
                                std::uint64_t seed) {
  return RewardModel(Mlp::random(mlp_dims(static_cast<int>(state_dim + num_actions), hidden, 1), seed),
                     num_actions);
}

std::vector<double> RewardModel::input(std::span<const double> state_enc, std::size_t action) const {
  if (action >= num_actions_) fail(ErrorKind::kLookup, "action index out of range for reward model");
  std::vector<double> x(state_enc.begin(), state_enc.end());
  x.resize(x.size() + num_actions_, 0.0);
  x[state_enc.size() + action] = 1.0;
  return x;
}

double RewardModel::score(std::span<const double> state_enc, std::size_t action) const {
  return net_.forward(input(state_enc, action))[0];
}

RewardModel reward_model_from_artifact(const PolicyArtifact& artifact) {
  return RewardModel(artifact.network("reward"), artifact.action_ids.size());
}

void RewardModelConfig::validate() const {
  if (epochs < 1) fail(ErrorKind::kConfig, "reward_model.epochs must be >= 1");
  if (minibatch_size < 1) fail(ErrorKind::kConfig, "reward_model.minibatch_size must be >= 1");
  if (!(learning_rate > 0.0)) fail(ErrorKind::kConfig, "reward_model.learning_rate must be positive");
}

double bradley_terry_loss(const RewardModel& model, const std::vector<PreferenceRecord>& records) {
  if (records.empty()) fail(ErrorKind::kData, "no preference records");
  double loss = 0.0;
  for (const auto& r : records)
    loss += softplus_neg(model.score(r.state_enc, r.winner()) - model.score(r.state_enc, r.loser()));
  return loss / static_cast<double>(records.size());
}

double preference_accuracy(const RewardModel& model, const std::vector<PreferenceRecord>& records) {
  if (records.empty()) fail(ErrorKind::kData, "no preference records");
  double hits = 0.0;
  for (const auto& r : records) {
    const double w = model.score(r.state_enc, r.winner());
    const double l = model.score(r.state_enc, r.loser());
    hits += w > l ? 1.0 : (w == l ? 0.5 : 0.0);
  }
  return hits / static_cast<double>(records.size());
}

bool is_held_out(const PreferenceRecord& record) {
  return fnv1a64(preference_to_json(record).dump()) % 10 == 9;
}

RewardModelResult reward_model_train(const std::vector<PreferenceRecord>& records, const ActionCatalog& catalog,
                                     const EncoderConfig& encoder, const RewardModelConfig& cfg,
                                     std::uint64_t seed) {
  cfg.validate();
  if (records.empty()) fail(ErrorKind::kData, "empty input: no preference records");
  std::vector<PreferenceRecord> train, held;
  for (const auto& r : records) {
    if (r.state_enc.size() != static_cast<std::size_t>(encoder.dimension))
      fail(ErrorKind::kData, "preference state encoding does not match the encoder dimension");
    if (r.a >= catalog.size() || r.b >= catalog.size()) fail(ErrorKind::kData, "preference action out of range");
    (is_held_out(r) ? held : train).push_back(r);
  }
  // Too little data to hold anything out.
  if (train.empty()) train = records;

  RewardModelResult res;
  res.model = RewardModel::random(static_cast<std::size_t>(encoder.dimension), catalog.size(), cfg.hidden,
                                  derive_seed(seed, kRmInit));
  auto& net = res.model.net();
  Optimizer opt({OptimizerKind::kAdam, cfg.learning_rate}, net.num_parameters());
  Rng rng(derive_seed(seed, kRmShuffle));
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> grad(net.num_parameters());
  Mlp::Cache cw, cl;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t start = 0; start < train.size(); start += cfg.minibatch_size) {
      const std::size_t end = std::min(train.size(), start + cfg.minibatch_size);
      const double inv = 1.0 / static_cast<double>(end - start);
      std::fill(grad.begin(), grad.end(), 0.0);
      for (std::size_t k = start; k < end; ++k) {
        const auto& r = train[order[k]];
        const double sw = net.forward(res.model.input(r.state_enc, r.winner()), cw)[0];
        const double sl = net.forward(res.model.input(r.state_enc, r.loser()), cl)[0];
        // d/d(margin) of log(1 + exp(-margin)) is -sigmoid(-margin).
        const double g = -sigmoid(-(sw - sl)) * inv;
        const double gw = g, gl = -g;
        net.backward(cw, std::span<const double>(&gw, 1), grad);
        net.backward(cl, std::span<const double>(&gl, 1), grad);
      }
      opt.step(net, grad);
    }
    const double loss = bradley_terry_loss(res.model, train);
    if (!std::isfinite(loss)) fail(ErrorKind::kDivergence, "non-finite reward-model loss");
    nlohmann::json m = {{"epoch", epoch}, {"loss", loss}, {"train_accuracy", preference_accuracy(res.model, train)}};
    m["held_out_accuracy"] = held.empty() ? nlohmann::json(nullptr) : nlohmann::json(preference_accuracy(res.model, held));
    res.metrics.push_back(std::move(m));
  }
  res.train_size = train.size();
  res.held_out_size = held.size();
  res.train_accuracy = preference_accuracy(res.model, train);
  res.held_out_accuracy = held.empty() ? std::nan("") : preference_accuracy(res.model, held);
  res.artifact = make_artifact("reward-model", encoder, catalog, {{"reward", net}}, "");
  return res;
}

double PlantedUtility::operator()(std::string_view phase, std::string_view action_id) const {
  const auto h = fnv1a64(salt_ + "|" + std::string(phase) + "|" + std::string(action_id));
  return scale_ * static_cast<double>(mix64(h) >> 11) * 0x1.0p-53;
}

std::vector<SyntheticPreference> synthesize_preferences(const Scenario& scenario, const ComplianceGate& gate,
                                                        const EncoderConfig& encoder,
                                                        const PlantedUtility& utility,
                                                        const SyntheticPreferenceConfig& cfg, Rng& rng) {
  if (!(cfg.noise >= 0.0 && cfg.noise < 0.5)) fail(ErrorKind::kConfig, "noise must lie in [0, 0.5)");
  if (cfg.count < 1) fail(ErrorKind::kConfig, "count must be >= 1");
  if (!(cfg.margin >= 0.0)) fail(ErrorKind::kConfig, "margin must be >= 0");
  const auto& catalog = scenario.catalog();
  const auto& segments = scenario.spec().segments;
  std::vector<SyntheticPreference> out;
  std::size_t attempts = 0;
  while (out.size() < cfg.count) {
    if (++attempts > cfg.count * 1000) fail(ErrorKind::kConfig, "no action pairs satisfy the utility margin");
    const auto& seg = segments[rng.uniform_index(segments.size())].id;
    const auto s = random_prompt(scenario, gate, seg, rng);
    const auto allowed = gate.allowed(scenario, s);
    std::vector<std::pair<std::size_t, std::size_t>> pairs;
    for (std::size_t i = 0; i < allowed.size(); ++i)
      for (std::size_t j = i + 1; j < allowed.size(); ++j)
        if (std::abs(utility(s.phase_key, catalog[allowed[i]].id) - utility(s.phase_key, catalog[allowed[j]].id)) >=
            cfg.margin)
          pairs.emplace_back(allowed[i], allowed[j]);
    if (pairs.empty()) continue;
    auto [a, b] = pairs[rng.uniform_index(pairs.size())];
    if (rng.bernoulli(0.5)) std::swap(a, b);
    SyntheticPreference p;
    p.phase = s.phase_key;
    p.record.state_digest = observation_digest(s);
    p.record.state_enc = encode_state(s, encoder).values;
    p.record.a = a;
    p.record.b = b;
    p.record.annotator = cfg.annotator;
    const bool a_better = utility(s.phase_key, catalog[a].id) > utility(s.phase_key, catalog[b].id);
    p.flipped = rng.bernoulli(cfg.noise);
    p.record.choice = (a_better != p.flipped) ? Choice::kA : Choice::kB;
    out.push_back(std::move(p));
  }
  return out;
}

// ---- fine-tuning ----

DialogueState sample_prompt(Environment& env, const ComplianceGate& gate, std::string_view segment, Rng& rng) {
  const auto& scenario = env.scenario();
  while (true) {
    DialogueState s = env.reset(segment);
    const auto depth = rng.uniform_index(static_cast<std::size_t>(scenario.max_turns()));
    bool ended = false;
    for (std::size_t d = 0; d < depth && !ended; ++d) {
      const auto allowed = gate.allowed(scenario, s);
      auto [next, finished] = env.advance(s, allowed[rng.uniform_index(allowed.size())]);
      ended = finished;
      s = std::move(next);
    }
    if (!ended) return s;
  }
}

TrainingResult rlhf_finetune(const PolicyArtifact& base, const RewardModel& reward_model, Environment& env,
                             ComplianceGate& gate, const RlhfConfig& cfg, std::uint64_t seed) {
  if (!(cfg.kl_coef >= 0.0)) fail(ErrorKind::kConfig, "rlhf.kl_coef must be >= 0");
  if (cfg.prompts_per_iteration < 1) fail(ErrorKind::kConfig, "rlhf.prompts_per_iteration must be >= 1");
  auto ppo = cfg.ppo;
  ppo.reference_kl_coef = cfg.kl_coef;
  ppo.validate();
  const auto& scenario = env.scenario();
  base.require_compatible(base.encoder, scenario.catalog());
  if (reward_model.num_actions() != base.action_ids.size())
    fail(ErrorKind::kConfig, "reward model action count does not match the base policy");
  const Mlp& base_net = base.network("policy");
  Mlp policy = base_net;
  auto value = Mlp::random(mlp_dims(base.encoder.dimension, ppo.hidden, 1), derive_seed(seed, kRlhfValue));
  OptimizerConfig oc{OptimizerKind::kAdam, ppo.learning_rate};
  PpoOptimizers opt{Optimizer(oc, policy.num_parameters()), Optimizer(oc, value.num_parameters())};
  Rng prompt_rng(derive_seed(seed, kRlhfPrompt));
  Rng action_rng(derive_seed(seed, kRlhfAction));
  Rng shuffle_rng(derive_seed(seed, kRlhfShuffle));
  const auto& segments = scenario.spec().segments;

  TrainingResult result;
  std::size_t prompt_index = 0;
  for (std::size_t it = 0; it < ppo.num_iterations; ++it) {
    RolloutBatch batch;
    for (std::size_t k = 0; k < cfg.prompts_per_iteration; ++k, ++prompt_index) {
      const auto state = sample_prompt(env, gate, segments[prompt_index % segments.size()].id, prompt_rng);
      RolloutStep step;
      step.state_enc = encode_state(state, base.encoder).values;
      step.allowed = gate.allowed(scenario, state);
      const auto logits = policy.forward(step.state_enc);
      step.action = sample_action(masked_softmax(logits, step.allowed), step.allowed, action_rng);
      step.old_log_prob = logits[step.action] - log_sum_exp(logits, step.allowed);
      step.value = value.forward(step.state_enc)[0];
      gate.screen(step.action, state, "agent");
      step.reward = reward_model.score(step.state_enc, step.action);
      step.done = true;
      if (ppo.reference_kl_coef > 0.0) {
        step.reference_log_probs = base_net.forward(step.state_enc);
        const double lse = log_sum_exp(step.reference_log_probs, step.allowed);
        for (double& x : step.reference_log_probs) x -= lse;
      }
      batch.episode_returns.push_back(step.reward);
      batch.steps.push_back(std::move(step));
    }
    const auto loss = ppo_update(policy, value, batch, ppo, opt, shuffle_rng);
    const double mean_score = std::accumulate(batch.episode_returns.begin(), batch.episode_returns.end(), 0.0) /
                              static_cast<double>(batch.episodes());
    result.metrics.push_back(ppo_metrics_json(it, mean_score, loss));
    result.env_steps += batch.steps.size();
    result.episodes += batch.episodes();
  }
  result.artifact = make_artifact("rlhf", base.encoder, scenario.catalog(),
                                  {{"policy", std::move(policy)}, {"value", std::move(value)}}, "");
  return result;
}

std::vector<ProbeState> probe_states(const Scenario& scenario, const ComplianceGate& gate,
                                     const EncoderConfig& encoder, std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  const auto& segments = scenario.spec().segments;
  std::vector<ProbeState> out;
  for (std::size_t i = 0; i < count; ++i) {
    auto s = random_prompt(scenario, gate, segments[i % segments.size()].id, rng);
    ProbeState p{s, encode_state(s, encoder).values, gate.allowed(scenario, s)};
    out.push_back(std::move(p));
  }
  return out;
}

double mean_policy_score(const Mlp& policy, const RewardModel& rm, const std::vector<ProbeState>& probes) {
  if (probes.empty()) fail(ErrorKind::kData, "no probe states");
  double total = 0.0;
  for (const auto& p : probes) {
    const auto probs = masked_softmax(policy.forward(p.state_enc), p.allowed);
    for (auto a : p.allowed) total += probs[a] * rm.score(p.state_enc, a);
  }
  return total / static_cast<double>(probes.size());
}

double mean_oracle_score(const PlantedUtility& utility, const ActionCatalog& catalog, const RewardModel& rm,
                         const std::vector<ProbeState>& probes) {
  if (probes.empty()) fail(ErrorKind::kData, "no probe states");
  double total = 0.0;
  for (const auto& p : probes) {
    std::vector<double> u(catalog.size(), 0.0);
    for (auto a : p.allowed) u[a] = utility(p.state.phase_key, catalog[a].id);
    total += rm.score(p.state_enc, masked_argmax(u, p.allowed));
  }
  return total / static_cast<double>(probes.size());
}

double mean_total_variation(const Mlp& a, const Mlp& b, const std::vector<ProbeState>& probes) {
  if (probes.empty()) fail(ErrorKind::kData, "no probe states");
  double total = 0.0;
  for (const auto& p : probes) {
    const auto pa = masked_softmax(a.forward(p.state_enc), p.allowed);
    const auto pb = masked_softmax(b.forward(p.state_enc), p.allowed);
    double tv = 0.0;
    for (auto x : p.allowed) tv += std::abs(pa[x] - pb[x]);
    total += 0.5 * tv;
  }
  return total / static_cast<double>(probes.size());
}

}  // namespace talktrack
