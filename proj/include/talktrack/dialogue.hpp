#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace talktrack {

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes,
                      std::uint64_t basis = 0xcbf29ce484222325ULL);
std::string hex64(std::uint64_t value);

struct Utterance {
  std::string id;
  std::string text;
  std::string intent_tag;
  bool is_fallback = false;

  bool operator==(const Utterance&) const = default;
};

// Fixed utterance pool. Position in the catalog is the action index every
// network head uses.
class ActionCatalog {
 public:
  ActionCatalog() = default;
  explicit ActionCatalog(std::vector<Utterance> utterances);

  static ActionCatalog from_json(const nlohmann::json& j);
  static ActionCatalog load(const std::filesystem::path& path);
  nlohmann::json to_json() const;

  std::size_t size() const { return utterances_.size(); }
  const Utterance& operator[](std::size_t index) const { return utterances_[index]; }
  const Utterance& at(std::size_t index) const;
  const std::vector<Utterance>& utterances() const { return utterances_; }

  // Throws ErrorKind::kLookup for an unknown id.
  std::size_t index_of(std::string_view id) const;
  bool contains(std::string_view id) const;
  std::size_t fallback_index() const { return fallback_; }

 private:
  std::vector<Utterance> utterances_;
  std::unordered_map<std::string, std::size_t> by_id_;
  std::size_t fallback_ = 0;
};

enum class Speaker { kAgent, kUser };

struct HistoryEntry {
  Speaker speaker;
  std::string text;

  bool operator==(const HistoryEntry&) const = default;
};

struct DialogueState {
  std::vector<HistoryEntry> history;
  int turn = 0;
  int max_turns = 1;
  std::string segment_id;
  // Simulator bookkeeping. Agents only see the encoding.
  std::string phase_key;

  int remaining_turns() const { return max_turns - turn; }
  bool awaiting_user() const {
    return !history.empty() && history.back().speaker == Speaker::kAgent;
  }

  bool operator==(const DialogueState&) const = default;
};

// Throws ErrorKind::kProtocol when turn/history bookkeeping is inconsistent.
void validate_state(const DialogueState& state);

nlohmann::json state_to_json(const DialogueState& state);
// Throws ErrorKind::kData on malformed input.
DialogueState state_from_json(const nlohmann::json& j);

// Stable digest of everything an agent can observe (history, turn budget,
// segment); the simulator phase is excluded.
std::string observation_digest(const DialogueState& state);

struct EncoderConfig {
  int dimension = 64;
  int version = 1;

  std::string fingerprint() const;
};

struct StateEncoding {
  std::vector<double> values;
  std::string encoder_fingerprint;

  bool operator==(const StateEncoding&) const = default;
};

// Lowercase, split on runs of non-alphanumeric ASCII.
std::vector<std::string> tokenize(std::string_view text);

// Layout: [token buckets (D-4)] [turn/max] [remaining/max] [segment] [1.0].
// Each history entry spreads unit mass evenly over the buckets of its tokens,
// so appending an entry only touches the buckets its own tokens hash to.
StateEncoding encode_state(const DialogueState& state, const EncoderConfig& cfg);

std::size_t token_bucket(Speaker speaker, std::string_view token, int buckets);
double segment_feature(std::string_view segment_id);

}  // namespace talktrack
