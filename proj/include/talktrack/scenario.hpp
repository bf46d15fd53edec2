#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "talktrack/dialogue.hpp"
#include "talktrack/rng.hpp"

namespace talktrack {

inline constexpr std::string_view kTerminalPhase = "Terminal";

struct Reply {
  std::string text;
  double probability = 0.0;
};

struct DynamicsEntry {
  std::vector<Reply> replies;
  std::string next_phase;  // kTerminalPhase ends the conversation
  double conversion_probability = 0.0;
  double immediate_reward = 0.0;

  bool terminal() const { return next_phase == kTerminalPhase; }
  // Most probable reply; ties resolve to the lexicographically smallest text.
  const std::string& modal_reply() const;
};

struct SegmentSpec {
  std::string id;
  std::string start_phase;
};

struct ScenarioSpec {
  std::vector<std::string> phases;
  std::vector<SegmentSpec> segments;
  std::map<std::string, std::set<std::string>> eligibility;  // segment -> action ids
  int max_turns = 1;
  double conversion_value = 1.0;
  std::map<std::pair<std::string, std::string>, DynamicsEntry> dynamics;  // (phase, action)

  static ScenarioSpec from_json(const nlohmann::json& j);
  static ScenarioSpec load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  // Structural checks (probabilities, references, coverage of every
  // reachable phase/eligible-action pair). Throws ErrorKind::kData.
  void validate() const;

  const SegmentSpec& segment(std::string_view id) const;
  const DynamicsEntry* find(std::string_view phase, std::string_view action) const;
};

struct StepInfo {
  std::string reply_text;
  std::optional<bool> converted;              // sampled mode
  std::optional<double> expected_conversion;  // aggregate mode
};

struct StepOutcome {
  DialogueState next_state;
  double reward = 0.0;
  bool done = false;
  StepInfo info;
};

// A scenario bound to the catalog whose utterance texts the agent speaks.
// Immutable and shareable; stepping functions are pure apart from the
// caller-supplied RNG.
class Scenario {
 public:
  Scenario(ScenarioSpec spec, ActionCatalog catalog);

  const ScenarioSpec& spec() const { return spec_; }
  const ActionCatalog& catalog() const { return catalog_; }
  int max_turns() const { return spec_.max_turns; }

  DialogueState reset(std::string_view segment_id) const;
  bool is_terminal(const DialogueState& state) const;
  bool eligible(std::string_view segment_id, std::size_t action) const;
  std::vector<std::size_t> eligible_actions(std::string_view segment_id) const;

  // Sampled feedback: reply drawn from the distribution, conversion drawn
  // from a Bernoulli on terminal transitions.
  StepOutcome step(const DialogueState& state, std::size_t action, Rng& rng) const;
  // Aggregate feedback: modal reply, expected conversion, no randomness.
  StepOutcome step_aggregate(const DialogueState& state, std::size_t action) const;

  const DynamicsEntry& entry_for(const DialogueState& state, std::size_t action) const;

 private:
  StepOutcome finish(const DialogueState& state, std::size_t action,
                     const DynamicsEntry& entry, const std::string& reply,
                     double conversion_reward) const;

  ScenarioSpec spec_;
  ActionCatalog catalog_;
};

enum class FeedbackMode { kSampled, kAggregate };

std::string_view to_string(FeedbackMode mode);

struct EnvTraceEntry {
  std::string segment;
  int turn = 0;
  std::size_t action = 0;
  std::string reply;
  double reward = 0.0;
  bool done = false;

  bool operator==(const EnvTraceEntry&) const = default;
};

// Stateful wrapper owning an RNG and counters. One instance per worker.
class Environment {
 public:
  Environment(std::shared_ptr<const Scenario> scenario, FeedbackMode mode, std::uint64_t seed);

  const Scenario& scenario() const { return *scenario_; }
  FeedbackMode mode() const { return mode_; }

  DialogueState reset(std::string_view segment_id);
  // Executes the action and reads the reward channel.
  StepOutcome step(const DialogueState& state, std::size_t action);
  // Executes the action without touching the reward channel.
  std::pair<DialogueState, bool> advance(const DialogueState& state, std::size_t action);

  void reseed(std::uint64_t seed) {
    prior_draws_ += rng_.draws();
    rng_ = Rng(seed);
  }
  void record_trace(bool on) { tracing_ = on; }
  const std::vector<EnvTraceEntry>& trace() const { return trace_; }

  std::uint64_t steps() const { return steps_; }
  std::uint64_t reward_reads() const { return reward_reads_; }
  std::uint64_t rng_draws() const { return prior_draws_ + rng_.draws(); }

 private:
  StepOutcome execute(const DialogueState& state, std::size_t action);

  std::shared_ptr<const Scenario> scenario_;
  FeedbackMode mode_;
  Rng rng_;
  bool tracing_ = false;
  std::vector<EnvTraceEntry> trace_;
  std::uint64_t steps_ = 0;
  std::uint64_t reward_reads_ = 0;
  std::uint64_t prior_draws_ = 0;
};

}  // namespace talktrack
