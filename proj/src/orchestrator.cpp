#include "talktrack/orchestrator.hpp"

#include <cmath>
#include <fstream>
#include <thread>

#include "talktrack/error.hpp"
#include "talktrack/io.hpp"
#include "talktrack/experience.hpp"
#include "talktrack/rlhf.hpp"

namespace talktrack {

namespace {

constexpr std::uint64_t kEvalStream = 501;
constexpr std::uint64_t kArmA = 601;
constexpr std::uint64_t kArmB = 602;
constexpr double kZ95 = 1.959963984540054;

struct EpisodeStats {
  std::size_t segment = 0;
  double conversion = 0.0;
  double ret = 0.0;
  int turns = 0;
  std::uint64_t violations = 0;
};

EpisodeStats run_episode(const Policy& policy, const std::shared_ptr<const Scenario>& scenario,
                         ComplianceGate& gate, std::size_t index, std::uint64_t seed, FeedbackMode feedback) {
  const auto& segments = scenario->spec().segments;
  EpisodeStats st;
  st.segment = index % segments.size();
  Environment env(scenario, feedback, derive_seed(seed, kEvalStream, index));
  DialogueState state = env.reset(segments[st.segment].id);
  bool done = false;
  while (!done) {
    const auto allowed = gate.allowed(*scenario, state);
    const auto action = policy.act(state, allowed);
    if (!gate.screen(action, state, "agent").allowed) ++st.violations;
    auto out = env.step(state, action);
    st.ret += out.reward;
    ++st.turns;
    if (out.info.converted.value_or(false)) st.conversion += 1.0;
    st.conversion += out.info.expected_conversion.value_or(0.0);
    done = out.done;
    state = std::move(out.next_state);
  }
  return st;
}

nlohmann::json nullable(double x) { return std::isnan(x) ? nlohmann::json(nullptr) : nlohmann::json(x); }

}  // namespace

World World::load(const std::filesystem::path& scenario, const std::filesystem::path& catalog,
                  const std::filesystem::path& rules) {
  auto cat = ActionCatalog::load(catalog);
  World w{nullptr, RuleSet::load(rules)};
  w.scenario = std::make_shared<const Scenario>(ScenarioSpec::load(scenario), std::move(cat));
  return w;
}

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kData, "cannot write " + path.string());
  for (const auto& l : lines) out << l.dump() << '\n';
}

void write_json(const std::filesystem::path& path, const nlohmann::json& value) {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::kData, "cannot write " + path.string());
  out << value.dump(2) << '\n';
}

TrainOutput train(const RunConfig& cfg) {
  const auto world = World::load(cfg);
  const auto& catalog = world.catalog();
  std::filesystem::create_directories(cfg.output_dir);
  const auto audit_path = cfg.output_dir / "audit.jsonl";
  std::filesystem::remove(audit_path);
  ComplianceGate gate(catalog, world.rules, audit_path);
  const auto feedback = cfg.mode == "aggregate" ? FeedbackMode::kAggregate : FeedbackMode::kSampled;
  Environment env(world.scenario, feedback, cfg.effective_env_seed());

  TrainOutput out;
  nlohmann::json summary = {{"algo", cfg.algo}, {"mode", cfg.mode}, {"seed", cfg.seed},
                            {"config_digest", cfg.digest()}};
  bool uses_env = false;

  if (cfg.algo == "dqn") {
    if (cfg.mode == "offline") {
      const auto ingested = ingest_path(cfg.logs);
      if (!ingested.errors.empty()) {
        const auto& e = ingested.errors.front();
        fail(ErrorKind::kData, std::to_string(ingested.errors.size()) + " malformed log line(s); first at " + e.file +
                                   ":" + std::to_string(e.line) + ": " + e.message);
      }
      std::vector<Transition> transitions;
      for (const auto& ep : ingested.episodes) {
        auto t = transitions_from_episode(ep, *world.scenario, gate, cfg.encoder);
        transitions.insert(transitions.end(), std::make_move_iterator(t.begin()), std::make_move_iterator(t.end()));
      }
      if (transitions.empty()) fail(ErrorKind::kData, "no training data in " + cfg.logs.string());
      out.result = run_dqn_offline(transitions, catalog, cfg.encoder, cfg.dqn, cfg.seed);
      summary["logged_episodes"] = ingested.episodes.size();
      summary["transitions"] = transitions.size();
    } else {
      out.result = run_dqn(env, gate, cfg.encoder, cfg.dqn, cfg.seed);
      uses_env = true;
    }
  } else if (cfg.algo == "ppo") {
    out.result = run_ppo(env, gate, cfg.encoder, cfg.ppo, cfg.seed);
    uses_env = true;
  } else if (cfg.algo == "sft") {
    const auto dialogues = load_dialogues(cfg.dialogues, catalog.size());
    out.result = sft_train(dialogues, catalog, cfg.encoder, cfg.sft, cfg.seed);
    summary["dialogues"] = dialogues.size();
  } else if (cfg.algo == "reward-model") {
    const auto records = load_preferences(cfg.preferences);
    auto res = reward_model_train(records, catalog, cfg.encoder, cfg.reward_model, cfg.seed);
    summary["records"] = records.size();
    summary["train_size"] = res.train_size;
    summary["held_out_size"] = res.held_out_size;
    summary["train_accuracy"] = res.train_accuracy;
    summary["held_out_accuracy"] = nullable(res.held_out_accuracy);
    out.result.artifact = std::move(res.artifact);
    out.result.metrics = std::move(res.metrics);
  } else if (cfg.algo == "rlhf") {
    const auto base = PolicyArtifact::load(cfg.base_artifact);
    base.require_compatible(cfg.encoder, catalog);
    if (!base.has_network("policy")) fail(ErrorKind::kConfig, "data.base_artifact: artifact has no policy network");
    const auto rm_artifact = PolicyArtifact::load(cfg.reward_artifact);
    rm_artifact.require_compatible(cfg.encoder, catalog);
    if (!rm_artifact.has_network("reward"))
      fail(ErrorKind::kConfig, "data.reward_artifact: artifact has no reward network");
    const auto rm = reward_model_from_artifact(rm_artifact);
    out.result = rlhf_finetune(base, rm, env, gate, cfg.rlhf, cfg.seed);
    uses_env = true;
    summary["base_artifact_digest"] = base.digest();
    summary["reward_artifact_digest"] = rm_artifact.digest();
  } else {
    fail(ErrorKind::kConfig, "algo: unsupported value '" + cfg.algo + "'");
  }

  out.result.artifact.config_digest = cfg.digest();
  if (uses_env) {
    summary["env_seed"] = cfg.effective_env_seed();
    summary["env_steps"] = env.steps();
    summary["env_rng_draws"] = env.rng_draws();
    summary["env_reward_reads"] = env.reward_reads();
    summary["environment_deterministic"] = env.rng_draws() == 0;
  }
  summary["episodes"] = out.result.episodes;
  summary["compliance_screened"] = gate.screened();
  summary["compliance_violations"] = gate.violations();
  summary["metrics_lines"] = out.result.metrics.size();
  summary["artifact_digest"] = out.result.artifact.digest();
  out.summary = summary;

  out.artifact_path = cfg.output_dir / "artifact.json";
  out.metrics_path = cfg.output_dir / "metrics.jsonl";
  out.summary_path = cfg.output_dir / "summary.json";
  out.result.artifact.save(out.artifact_path);
  write_jsonl(out.metrics_path, out.result.metrics);
  write_json(out.summary_path, out.summary);
  return out;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json segs = nlohmann::json::object();
  for (const auto& [id, s] : segments)
    segs[id] = {{"episodes", s.episodes}, {"conversion_rate", s.conversion_rate}, {"mean_return", s.mean_return},
                {"mean_turns", s.mean_turns}};
  return {{"episodes", episodes}, {"conversion_rate", conversion_rate}, {"mean_return", mean_return},
          {"mean_turns", mean_turns}, {"compliance_violations", compliance_violations}, {"segments", segs}};
}

EvalReport evaluate(const Policy& policy, const std::shared_ptr<const Scenario>& scenario, ComplianceGate& gate,
                    std::size_t episodes, std::uint64_t seed, const EvalOptions& options) {
  if (episodes == 0) fail(ErrorKind::kConfig, "evaluation needs at least one episode");
  const std::size_t workers = std::max<std::size_t>(1, std::min(options.workers, episodes));
  std::vector<EpisodeStats> stats(episodes);
  auto work = [&](std::size_t w) {
    for (std::size_t i = w; i < episodes; i += workers)
      stats[i] = run_episode(policy, scenario, gate, i, seed, options.feedback);
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        try {
          work(w);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    for (auto& t : pool) t.join();
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  const auto& segs = scenario->spec().segments;
  EvalReport r;
  r.episodes = episodes;
  std::vector<SegmentReport> per(segs.size());
  for (const auto& st : stats) {
    r.conversion_rate += st.conversion;
    r.mean_return += st.ret;
    r.mean_turns += st.turns;
    r.compliance_violations += st.violations;
    auto& s = per[st.segment];
    ++s.episodes;
    s.conversion_rate += st.conversion;
    s.mean_return += st.ret;
    s.mean_turns += st.turns;
  }
  const double n = static_cast<double>(episodes);
  r.conversion_rate /= n;
  r.mean_return /= n;
  r.mean_turns /= n;
  for (std::size_t k = 0; k < segs.size(); ++k) {
    auto& s = per[k];
    if (s.episodes > 0) {
      const double m = static_cast<double>(s.episodes);
      s.conversion_rate /= m;
      s.mean_return /= m;
      s.mean_turns /= m;
    }
    r.segments[segs[k].id] = s;
  }
  return r;
}

EvalReport evaluate_artifact(const PolicyArtifact& artifact, const EncoderConfig& expected,
                             const std::shared_ptr<const Scenario>& scenario, ComplianceGate& gate,
                             std::size_t episodes, std::uint64_t seed, const EvalOptions& options) {
  artifact.require_compatible(expected, scenario->catalog());
  const NetworkPolicy policy(artifact);
  return evaluate(policy, scenario, gate, episodes, seed, options);
}

AbResult ab_from_rates(double rate_a, double rate_b, std::size_t n_per_arm) {
  if (n_per_arm == 0) fail(ErrorKind::kConfig, "A/B comparison needs at least one episode per arm");
  AbResult r;
  r.n_per_arm = n_per_arm;
  r.rate_a = rate_a;
  r.rate_b = rate_b;
  r.lift = rate_a - rate_b;
  const double n = static_cast<double>(n_per_arm);
  const double se = std::sqrt(std::max(0.0, rate_a * (1 - rate_a)) / n + std::max(0.0, rate_b * (1 - rate_b)) / n);
  r.ci_low = r.lift - kZ95 * se;
  r.ci_high = r.lift + kZ95 * se;
  r.significant = r.ci_low > 0.0 || r.ci_high < 0.0;
  return r;
}

AbResult ab_compare(const Policy& a, const Policy& b, const std::shared_ptr<const Scenario>& scenario,
                    ComplianceGate& gate, std::size_t n_per_arm, std::uint64_t seed, const EvalOptions& options) {
  if (n_per_arm == 0) fail(ErrorKind::kConfig, "A/B comparison needs at least one episode per arm");
  auto ra = evaluate(a, scenario, gate, n_per_arm, derive_seed(seed, kArmA), options);
  auto rb = evaluate(b, scenario, gate, n_per_arm, derive_seed(seed, kArmB), options);
  auto r = ab_from_rates(ra.conversion_rate, rb.conversion_rate, n_per_arm);
  r.report_a = std::move(ra);
  r.report_b = std::move(rb);
  return r;
}

nlohmann::json AbResult::to_json() const {
  return {{"n_per_arm", n_per_arm}, {"rate_a", rate_a},   {"rate_b", rate_b},
          {"lift", lift},           {"ci_low", ci_low},   {"ci_high", ci_high},
          {"significant", significant}, {"arm_a", report_a.to_json()}, {"arm_b", report_b.to_json()}};
}

}  // namespace talktrack
