#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "talktrack/config.hpp"
#include "talktrack/error.hpp"
#include "talktrack/experience.hpp"
#include "talktrack/feedback_service.hpp"
#include "talktrack/orchestrator.hpp"
#include "talktrack/rlhf.hpp"

namespace fs = std::filesystem;
using namespace talktrack;

namespace {

struct WorldPaths {
  fs::path scenario;
  fs::path catalog;
  fs::path rules;

  void add_to(CLI::App* cmd) {
    cmd->add_option("-s,--scenario", scenario, "scenario JSON")->required();
    cmd->add_option("--catalog", catalog, "action catalog (default: catalog.json next to the scenario)");
    cmd->add_option("--rules", rules, "compliance rules (default: rules.json next to the scenario)");
  }
  World load() const {
    const auto dir = scenario.parent_path();
    return World::load(scenario, catalog.empty() ? dir / "catalog.json" : catalog,
                       rules.empty() ? dir / "rules.json" : rules);
  }
};

void print(const nlohmann::json& j) { std::cout << j.dump(2) << "\n"; }

void emit(const nlohmann::json& j, const fs::path& out) {
  if (out.empty()) {
    print(j);
  } else {
    write_json(out, j);
  }
}

// Encoder and catalog checks against the run config when one is given,
// otherwise against the artifact's own encoder.
EncoderConfig expected_encoder(const PolicyArtifact& artifact, const fs::path& config) {
  if (config.empty()) return artifact.encoder;
  return RunConfig::load(config).encoder;
}

int run(int argc, char** argv) {
  CLI::App app{"talktrack: reinforcement learning toolkit for sales dialogues"};
  app.require_subcommand(1);

  // train
  fs::path train_cfg;
  auto* train_cmd = app.add_subcommand("train", "train dqn, ppo, sft, reward-model or rlhf from a run file");
  train_cmd->add_option("-c,--config", train_cfg, "run file (TOML)")->required();
  train_cmd->callback([&] {
    const auto out = train(RunConfig::load(train_cfg));
    print(out.summary);
  });

  // eval
  WorldPaths eval_world;
  fs::path eval_artifact, eval_cfg, eval_out;
  std::size_t eval_n = 1000, eval_workers = 1;
  std::uint64_t eval_seed = 0;
  bool eval_aggregate = false;
  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a trained artifact");
  eval_cmd->add_option("-a,--artifact", eval_artifact, "policy artifact")->required();
  eval_world.add_to(eval_cmd);
  eval_cmd->add_option("-n,--episodes", eval_n, "episodes");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("-c,--config", eval_cfg, "run file whose encoder the artifact must match");
  eval_cmd->add_option("-w,--workers", eval_workers, "worker threads");
  eval_cmd->add_flag("--aggregate", eval_aggregate, "use expected conversions instead of sampling");
  eval_cmd->add_option("-o,--output", eval_out, "write the report here instead of stdout");
  eval_cmd->callback([&] {
    const auto world = eval_world.load();
    const auto artifact = PolicyArtifact::load(eval_artifact);
    ComplianceGate gate(world.catalog(), world.rules);
    const EvalOptions opts{eval_aggregate ? FeedbackMode::kAggregate : FeedbackMode::kSampled, eval_workers};
    auto report = evaluate_artifact(artifact, expected_encoder(artifact, eval_cfg), world.scenario, gate, eval_n,
                                    eval_seed, opts)
                      .to_json();
    report["artifact_digest"] = artifact.digest();
    report["seed"] = eval_seed;
    emit(report, eval_out);
  });

  // ab
  WorldPaths ab_world;
  fs::path ab_a, ab_b, ab_cfg, ab_out;
  std::size_t ab_n = 500, ab_workers = 1;
  std::uint64_t ab_seed = 0;
  auto* ab_cmd = app.add_subcommand("ab", "compare two artifacts on independent episode streams");
  ab_cmd->add_option("-a", ab_a, "artifact A")->required();
  ab_cmd->add_option("-b", ab_b, "artifact B")->required();
  ab_world.add_to(ab_cmd);
  ab_cmd->add_option("-n,--episodes", ab_n, "episodes per arm");
  ab_cmd->add_option("--seed", ab_seed, "comparison seed");
  ab_cmd->add_option("-c,--config", ab_cfg, "run file whose encoder both artifacts must match");
  ab_cmd->add_option("-w,--workers", ab_workers, "worker threads");
  ab_cmd->add_option("-o,--output", ab_out, "write the result here instead of stdout");
  ab_cmd->callback([&] {
    const auto world = ab_world.load();
    const auto a = PolicyArtifact::load(ab_a);
    const auto b = PolicyArtifact::load(ab_b);
    a.require_compatible(expected_encoder(a, ab_cfg), world.catalog());
    b.require_compatible(expected_encoder(a, ab_cfg), world.catalog());
    ComplianceGate gate(world.catalog(), world.rules);
    const NetworkPolicy pa(a), pb(b);
    auto result = ab_compare(pa, pb, world.scenario, gate, ab_n, ab_seed, {FeedbackMode::kSampled, ab_workers})
                      .to_json();
    result["artifact_a"] = a.digest();
    result["artifact_b"] = b.digest();
    emit(result, ab_out);
  });

  // ingest
  fs::path ingest_in;
  auto* ingest_cmd = app.add_subcommand("ingest", "validate episode logs and report malformed lines");
  ingest_cmd->add_option("logs", ingest_in, "log file or directory of *.jsonl")->required();
  int ingest_rc = 0;
  ingest_cmd->callback([&] {
    const auto r = ingest_path(ingest_in);
    std::size_t turns = 0, converted = 0;
    for (const auto& ep : r.episodes) {
      turns += ep.turns.size();
      converted += ep.converted;
    }
    auto errors = nlohmann::json::array();
    for (const auto& e : r.errors) errors.push_back({{"file", e.file}, {"line", e.line}, {"message", e.message}});
    print({{"files", r.files}, {"episodes", r.episodes.size()}, {"turns", turns}, {"conversions", converted},
           {"errors", errors}});
    if (!r.errors.empty()) ingest_rc = exit_code_for(ErrorKind::kData);
  });

  // aggregate
  fs::path agg_in, agg_out;
  auto* agg_cmd = app.add_subcommand("aggregate", "collapse logs into per-(state, action) reply and conversion tables");
  agg_cmd->add_option("logs", agg_in, "log file or directory of *.jsonl")->required();
  agg_cmd->add_option("-o,--output", agg_out, "write the table here instead of stdout");
  agg_cmd->callback([&] {
    const auto r = ingest_path(agg_in);
    if (!r.errors.empty()) {
      const auto& e = r.errors.front();
      fail(ErrorKind::kData, std::to_string(r.errors.size()) + " malformed log line(s); first at " + e.file + ":" +
                                 std::to_string(e.line) + ": " + e.message);
    }
    emit(aggregate_to_json(aggregate(r.episodes)), agg_out);
  });

  // serve
  fs::path serve_cfg;
  std::optional<int> serve_port;
  auto* serve_cmd = app.add_subcommand("serve", "labeling queue and chat sandbox over HTTP");
  serve_cmd->add_option("-c,--config", serve_cfg, "run file with a [serve] section")->required();
  serve_cmd->add_option("--port", serve_port, "port (overrides serve.port)");
  serve_cmd->callback([&] {
    const auto cfg = RunConfig::load(serve_cfg);
    if (cfg.serve.artifact.empty()) fail(ErrorKind::kConfig, "serve.artifact: required");
    const auto world = World::load(cfg);
    auto artifact = PolicyArtifact::load(cfg.serve.artifact);
    artifact.require_compatible(cfg.encoder, world.catalog());
    FeedbackOptions opts;
    opts.state_dir = cfg.serve.state_dir;
    opts.artifact_path = cfg.serve.artifact;
    opts.lease_seconds = cfg.serve.lease_seconds;
    opts.generate_tasks = cfg.serve.generate_tasks;
    opts.max_open_tasks = cfg.serve.max_open_tasks;
    opts.seed = cfg.seed;
    FeedbackCore core(world.scenario, world.rules, std::move(artifact), opts);
    FeedbackServer server(core);
    const int port = serve_port.value_or(cfg.serve.port);
    std::cerr << "serving on http://" << cfg.serve.host << ":" << port << "\n";
    server.run(cfg.serve.host, port);
  });

  // simulate
  WorldPaths sim_world;
  fs::path sim_out;
  std::size_t sim_n = 1000;
  std::uint64_t sim_seed = 0;
  auto* sim_cmd = app.add_subcommand("simulate", "write episode logs from a uniform compliant policy");
  sim_world.add_to(sim_cmd);
  sim_cmd->add_option("-n,--episodes", sim_n, "episodes");
  sim_cmd->add_option("--seed", sim_seed, "seed");
  sim_cmd->add_option("-o,--output", sim_out, "output .jsonl")->required();
  sim_cmd->callback([&] {
    const auto world = sim_world.load();
    ComplianceGate gate(world.catalog(), world.rules);
    Environment env(world.scenario, FeedbackMode::kSampled, derive_seed(sim_seed, 1));
    Rng rng(derive_seed(sim_seed, 2));
    const auto& segments = world.scenario->spec().segments;
    std::vector<LoggedEpisode> episodes;
    for (std::size_t i = 0; i < sim_n; ++i) {
      LoggedEpisode ep;
      ep.segment = segments[i % segments.size()].id;
      auto state = env.reset(ep.segment);
      bool done = false;
      while (!done) {
        const auto allowed = gate.allowed(*world.scenario, state);
        const auto a = allowed[rng.uniform_index(allowed.size())];
        auto out = env.step(state, a);
        ep.turns.push_back({state.phase_key, world.catalog()[a].id, out.info.reply_text, out.reward});
        ep.converted = ep.converted || out.info.converted.value_or(false);
        done = out.done;
        state = std::move(out.next_state);
      }
      episodes.push_back(std::move(ep));
    }
    write_log(sim_out, episodes);
    print({{"episodes", episodes.size()}, {"output", sim_out.string()}});
  });

  // annotate-expert
  WorldPaths exp_world;
  fs::path exp_out;
  std::size_t exp_n = 200;
  std::uint64_t exp_seed = 0;
  int exp_dim = EncoderConfig{}.dimension;
  double exp_gamma = 1.0;
  auto* exp_cmd = app.add_subcommand("annotate-expert", "write dialogues annotated with the exactly optimal action");
  exp_world.add_to(exp_cmd);
  exp_cmd->add_option("-n,--episodes", exp_n, "dialogues");
  exp_cmd->add_option("--seed", exp_seed, "seed");
  exp_cmd->add_option("--dimension", exp_dim, "encoder dimension");
  exp_cmd->add_option("--gamma", exp_gamma, "discount used by the planner");
  exp_cmd->add_option("-o,--output", exp_out, "output .jsonl")->required();
  exp_cmd->callback([&] {
    const auto world = exp_world.load();
    ComplianceGate gate(world.catalog(), world.rules);
    EncoderConfig enc;
    enc.dimension = exp_dim;
    const auto dialogues = synthesize_expert_dialogues(*world.scenario, gate, enc, exp_n, exp_gamma, exp_seed);
    save_dialogues(exp_out, dialogues);
    print({{"dialogues", dialogues.size()}, {"output", exp_out.string()}});
  });

  // synth-prefs
  WorldPaths pref_world;
  fs::path pref_out;
  SyntheticPreferenceConfig pref_cfg;
  std::uint64_t pref_seed = 0;
  int pref_dim = EncoderConfig{}.dimension;
  std::string pref_salt = "planted";
  auto* pref_cmd = app.add_subcommand("synth-prefs", "write preference pairs labeled by a planted utility");
  pref_world.add_to(pref_cmd);
  pref_cmd->add_option("-n,--count", pref_cfg.count, "records");
  pref_cmd->add_option("--noise", pref_cfg.noise, "label flip probability in [0, 0.5)");
  pref_cmd->add_option("--margin", pref_cfg.margin, "minimum utility gap between the pair");
  pref_cmd->add_option("--salt", pref_salt, "planted utility salt");
  pref_cmd->add_option("--seed", pref_seed, "seed");
  pref_cmd->add_option("--dimension", pref_dim, "encoder dimension");
  pref_cmd->add_option("-o,--output", pref_out, "output .jsonl")->required();
  pref_cmd->callback([&] {
    const auto world = pref_world.load();
    ComplianceGate gate(world.catalog(), world.rules);
    EncoderConfig enc;
    enc.dimension = pref_dim;
    Rng rng(pref_seed);
    const auto synth = synthesize_preferences(*world.scenario, gate, enc, PlantedUtility(pref_salt), pref_cfg, rng);
    std::vector<PreferenceRecord> records;
    std::size_t flipped = 0;
    for (const auto& s : synth) {
      records.push_back(s.record);
      flipped += s.flipped;
    }
    save_preferences(pref_out, records);
    print({{"records", records.size()}, {"flipped", flipped}, {"output", pref_out.string()}});
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : exit_code_for(ErrorKind::kConfig);
  }
  return ingest_rc;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
