#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "talktrack/dialogue.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

// Case-insensitive matcher. A pattern without '*' matches as a substring; a
// pattern containing '*' must match the whole text, '*' standing for any run.
bool pattern_matches(std::string_view pattern, std::string_view text);

struct ComplianceRule {
  std::string rule_id;
  std::optional<std::string> pattern;
  std::set<std::string> intents;   // empty: any intent
  std::set<std::string> segments;  // empty: any segment
  std::optional<int> turn_min;
  std::optional<int> turn_max;

  // All present conditions must hold. A rule with no conditions matches everything.
  bool matches(const Utterance& action, const DialogueState& state) const;
};

struct ComplianceVerdict {
  bool allowed = true;
  std::optional<std::string> blocking_rule;

  static ComplianceVerdict allow() { return {}; }
  static ComplianceVerdict block(std::string rule) { return {false, std::move(rule)}; }
};

class RuleSet {
 public:
  RuleSet() = default;
  explicit RuleSet(std::vector<ComplianceRule> rules);

  static RuleSet from_json(const nlohmann::json& j);
  static RuleSet load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  const std::vector<ComplianceRule>& rules() const { return rules_; }
  bool empty() const { return rules_.empty(); }

  // Rules whose text/intent conditions would hit the catalog's fallback.
  // Such rules are ignored for the fallback; callers surface these warnings.
  std::vector<std::string> fallback_warnings(const ActionCatalog& catalog) const;

 private:
  std::vector<ComplianceRule> rules_;
};

// First matching rule in declaration order blocks; the fallback is never blocked.
ComplianceVerdict check(const Utterance& action, const DialogueState& state, const RuleSet& rules);

// Sorted indices passing `check`; always contains the fallback index.
std::vector<std::size_t> mask_actions(const ActionCatalog& catalog, const DialogueState& state,
                                      const RuleSet& rules);

struct AuditEntry {
  std::string timestamp;
  std::string rule_id;
  std::string action_id;
  std::string state_digest;
  std::string origin;  // "agent" or "external"
};

// Compliance layer used by every rollout loop and by the service. Counts
// executed-action screenings and appends each block event to the audit log.
class ComplianceGate {
 public:
  ComplianceGate(ActionCatalog catalog, RuleSet rules,
                 std::optional<std::filesystem::path> audit_path = std::nullopt);

  const ActionCatalog& catalog() const { return catalog_; }
  const RuleSet& rules() const { return rules_; }
  const std::vector<std::string>& warnings() const { return warnings_; }

  std::vector<std::size_t> mask(const DialogueState& state) const;
  // Mask restricted to the actions the scenario offers the state's segment.
  std::vector<std::size_t> allowed(const Scenario& scenario, const DialogueState& state) const;
  ComplianceVerdict check(std::size_t action, const DialogueState& state) const;

  // Checks an action about to be executed. A block is recorded in the audit
  // log; for agent-originated actions it is also counted as a violation.
  ComplianceVerdict screen(std::size_t action, const DialogueState& state,
                           std::string_view origin = "agent");

  std::uint64_t screened() const { return screened_; }
  std::uint64_t violations() const { return violations_; }
  std::vector<AuditEntry> audit_entries() const;

 private:
  ActionCatalog catalog_;
  RuleSet rules_;
  std::vector<std::string> warnings_;
  std::optional<std::filesystem::path> audit_path_;
  mutable std::mutex audit_mutex_;
  std::vector<AuditEntry> audit_;
  std::atomic<std::uint64_t> screened_{0};
  std::atomic<std::uint64_t> violations_{0};
};

std::string utc_timestamp();

}  // namespace talktrack
