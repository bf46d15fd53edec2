#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/config.hpp"
#include "talktrack/policy.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

// Catalog, rules and scenario loaded from one RunConfig.
struct World {
  std::shared_ptr<const Scenario> scenario;
  RuleSet rules;

  static World load(const std::filesystem::path& scenario, const std::filesystem::path& catalog,
                    const std::filesystem::path& rules);
  static World load(const RunConfig& cfg) { return load(cfg.scenario, cfg.catalog, cfg.rules); }
  const ActionCatalog& catalog() const { return scenario->catalog(); }
};

struct TrainOutput {
  TrainingResult result;
  nlohmann::json summary;
  std::filesystem::path artifact_path;
  std::filesystem::path metrics_path;
  std::filesystem::path summary_path;
};

// Runs the configured algorithm and writes artifact.json, metrics.jsonl,
// summary.json and audit.jsonl into the output directory.
TrainOutput train(const RunConfig& cfg);

struct SegmentReport {
  std::size_t episodes = 0;
  double conversion_rate = 0.0;
  double mean_return = 0.0;
  double mean_turns = 0.0;
};

struct EvalReport {
  std::size_t episodes = 0;
  double conversion_rate = 0.0;
  double mean_return = 0.0;
  double mean_turns = 0.0;
  std::uint64_t compliance_violations = 0;
  std::map<std::string, SegmentReport> segments;
  nlohmann::json to_json() const;
};

struct EvalOptions {
  FeedbackMode feedback = FeedbackMode::kSampled;
  // Episode i always uses the seed derived from (seed, i), so the report does
  // not depend on the worker count.
  std::size_t workers = 1;
};

// Rolls out the policy's greedy choice over n episodes, segments
// round-robin. Every executed action is screened by the gate.
EvalReport evaluate(const Policy& policy, const std::shared_ptr<const Scenario>& scenario, ComplianceGate& gate,
                    std::size_t episodes, std::uint64_t seed, const EvalOptions& options = {});

// Checks the artifact against the expected encoder and the scenario catalog
// first. Throws ErrorKind::kConfig on mismatch.
EvalReport evaluate_artifact(const PolicyArtifact& artifact, const EncoderConfig& expected,
                             const std::shared_ptr<const Scenario>& scenario, ComplianceGate& gate,
                             std::size_t episodes, std::uint64_t seed, const EvalOptions& options = {});

struct AbResult {
  std::size_t n_per_arm = 0;
  double rate_a = 0.0;
  double rate_b = 0.0;
  double lift = 0.0;  // rate_a - rate_b
  double ci_low = 0.0;
  double ci_high = 0.0;
  bool significant = false;
  EvalReport report_a;
  EvalReport report_b;
  nlohmann::json to_json() const;
};

// Two-proportion difference with a 95% normal-approximation interval using
// the unpooled standard error. The arms run on independent seeds.
AbResult ab_from_rates(double rate_a, double rate_b, std::size_t n_per_arm);

AbResult ab_compare(const Policy& a, const Policy& b, const std::shared_ptr<const Scenario>& scenario,
                    ComplianceGate& gate, std::size_t n_per_arm, std::uint64_t seed,
                    const EvalOptions& options = {});

void write_jsonl(const std::filesystem::path& path, const std::vector<nlohmann::json>& lines);
void write_json(const std::filesystem::path& path, const nlohmann::json& value);

}  // namespace talktrack
