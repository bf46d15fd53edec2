#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/dialogue.hpp"
#include "talktrack/rng.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

struct Transition {
  std::vector<double> state_enc;
  std::size_t action = 0;
  double reward = 0.0;
  std::vector<double> next_state_enc;
  bool done = false;
  // Actions the compliance mask permits in the next state; used for the
  // bootstrap max. Empty when done.
  std::vector<std::size_t> allowed_next;

  bool operator==(const Transition&) const = default;
};

// Fixed-capacity FIFO ring.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity);

  void push(Transition t);
  std::size_t size() const { return data_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::uint64_t insertions() const { return inserted_; }
  bool empty() const { return data_.empty(); }

  // Oldest to newest.
  const Transition& at(std::size_t i) const;
  std::vector<Transition> contents() const;

  // n uniform draws with replacement. Throws ErrorKind::kData when empty.
  std::vector<const Transition*> sample_uniform(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::vector<Transition> data_;
  std::size_t head_ = 0;  // slot of the oldest entry once full
  std::uint64_t inserted_ = 0;
};

// Episode log schema. There is deliberately no field for user identity.
struct LoggedTurn {
  std::string phase;
  std::string action_id;
  std::string reply;
  double reward = 0.0;

  bool operator==(const LoggedTurn&) const = default;
};

struct LoggedEpisode {
  std::string segment;
  std::vector<LoggedTurn> turns;
  bool converted = false;

  bool operator==(const LoggedEpisode&) const = default;
};

struct IngestError {
  std::string file;
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct IngestResult {
  std::vector<LoggedEpisode> episodes;
  std::vector<IngestError> errors;
  std::size_t files = 0;
};

nlohmann::json episode_to_json(const LoggedEpisode& episode);
// Strict: unknown keys are schema violations. Throws ErrorKind::kData.
LoggedEpisode episode_from_json(const nlohmann::json& j);

// Malformed lines are reported in `errors`, never dropped silently. Blank
// lines are skipped. Throws ErrorKind::kData if the file cannot be read.
IngestResult ingest_log(const std::filesystem::path& path);
// Every *.jsonl file in the directory (sorted by name), or a single file.
IngestResult ingest_path(const std::filesystem::path& path);
void write_log(const std::filesystem::path& path, const std::vector<LoggedEpisode>& episodes);

struct AggregateCell {
  std::map<std::string, std::uint64_t> reply_counts;
  std::uint64_t count = 0;
  std::uint64_t conversions = 0;

  double mean_conversion() const { return count == 0 ? 0.0 : static_cast<double>(conversions) / count; }
  // Ties resolve to the lexicographically smallest reply.
  std::string modal_reply() const;
};

// Keyed by (state digest, action id). The digest is "phase@turn" when the
// log carries a phase, otherwise a hash of the observable prefix.
using AggregateTable = std::map<std::pair<std::string, std::string>, AggregateCell>;

std::string aggregate_state_digest(const LoggedEpisode& episode, std::size_t turn_index);
AggregateTable aggregate(const std::vector<LoggedEpisode>& episodes);
nlohmann::json aggregate_to_json(const AggregateTable& table);

// Rebuilds dialogue states from a logged episode and emits one transition per
// turn. Logged actions must exist in the scenario catalog.
std::vector<Transition> transitions_from_episode(const LoggedEpisode& episode, const Scenario& scenario,
                                                 const ComplianceGate& gate, const EncoderConfig& encoder);

// The dialogue state before each logged turn, in order.
std::vector<DialogueState> states_from_episode(const LoggedEpisode& episode, const Scenario& scenario);

}  // namespace talktrack
