#include "talktrack/dialogue.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

constexpr int kSegmentBuckets = 32;

std::string_view salt_for(Speaker speaker) {
  return speaker == Speaker::kAgent ? "agent|" : "user|";
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t basis) {
  std::uint64_t h = basis;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

ActionCatalog::ActionCatalog(std::vector<Utterance> utterances)
    : utterances_(std::move(utterances)) {
  if (utterances_.empty()) fail(ErrorKind::kData, "action catalog is empty");
  int fallbacks = 0;
  for (std::size_t i = 0; i < utterances_.size(); ++i) {
    const auto& u = utterances_[i];
    if (u.id.empty()) fail(ErrorKind::kData, "catalog entry " + std::to_string(i) + " has empty id");
    if (!by_id_.emplace(u.id, i).second)
      fail(ErrorKind::kData, "duplicate utterance id '" + u.id + "'");
    if (u.is_fallback) {
      ++fallbacks;
      fallback_ = i;
    }
  }
  if (fallbacks != 1)
    fail(ErrorKind::kData, "catalog must contain exactly one fallback utterance, found " +
                               std::to_string(fallbacks));
}

ActionCatalog ActionCatalog::from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorKind::kData, "catalog: expected a JSON array");
  std::vector<Utterance> items;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    try {
      items.push_back({e.at("id").get<std::string>(), e.at("text").get<std::string>(),
                       e.at("intent_tag").get<std::string>(),
                       e.value("is_fallback", false)});
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::kData, "catalog[" + std::to_string(i) + "]: " + ex.what());
    }
  }
  return ActionCatalog(std::move(items));
}

ActionCatalog ActionCatalog::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read catalog " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorKind::kData, path.string() + ": " + ex.what());
  }
}

nlohmann::json ActionCatalog::to_json() const {
  auto out = nlohmann::json::array();
  for (const auto& u : utterances_)
    out.push_back({{"id", u.id}, {"text", u.text}, {"intent_tag", u.intent_tag},
                   {"is_fallback", u.is_fallback}});
  return out;
}

const Utterance& ActionCatalog::at(std::size_t index) const {
  if (index >= utterances_.size())
    fail(ErrorKind::kLookup, "action index " + std::to_string(index) + " out of range");
  return utterances_[index];
}

std::size_t ActionCatalog::index_of(std::string_view id) const {
  auto it = by_id_.find(std::string(id));
  if (it == by_id_.end()) fail(ErrorKind::kLookup, "unknown utterance id '" + std::string(id) + "'");
  return it->second;
}

bool ActionCatalog::contains(std::string_view id) const {
  return by_id_.count(std::string(id)) > 0;
}

void validate_state(const DialogueState& state) {
  if (state.max_turns < 1) fail(ErrorKind::kProtocol, "max_turns must be >= 1");
  if (state.turn < 0 || state.turn > state.max_turns)
    fail(ErrorKind::kProtocol, "turn " + std::to_string(state.turn) + " outside [0, max_turns]");
  const std::size_t completed = 2 * static_cast<std::size_t>(state.turn);
  const std::size_t n = state.history.size();
  if (n != completed && n != completed + 1)
    fail(ErrorKind::kProtocol, "history length inconsistent with turn");
  for (std::size_t i = 0; i < n; ++i) {
    const Speaker expected = i % 2 == 0 ? Speaker::kAgent : Speaker::kUser;
    if (state.history[i].speaker != expected)
      fail(ErrorKind::kProtocol, "history entries must alternate agent/user");
  }
}

nlohmann::json state_to_json(const DialogueState& state) {
  auto history = nlohmann::json::array();
  for (const auto& e : state.history)
    history.push_back({{"speaker", e.speaker == Speaker::kAgent ? "agent" : "user"}, {"text", e.text}});
  return {{"history", history}, {"turn", state.turn}, {"max_turns", state.max_turns},
          {"segment", state.segment_id}, {"phase", state.phase_key}};
}

DialogueState state_from_json(const nlohmann::json& j) {
  try {
    DialogueState s;
    for (const auto& e : j.at("history")) {
      const auto speaker = e.at("speaker").get<std::string>();
      if (speaker != "agent" && speaker != "user") fail(ErrorKind::kData, "speaker must be 'agent' or 'user'");
      s.history.push_back({speaker == "agent" ? Speaker::kAgent : Speaker::kUser, e.at("text").get<std::string>()});
    }
    s.turn = j.at("turn").get<int>();
    s.max_turns = j.at("max_turns").get<int>();
    s.segment_id = j.at("segment").get<std::string>();
    s.phase_key = j.value("phase", "");
    validate_state(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::kData, std::string("dialogue state: ") + e.what());
  }
}

std::string observation_digest(const DialogueState& state) {
  std::ostringstream os;
  os << state.segment_id << '\x1f' << state.turn << '/' << state.max_turns;
  for (const auto& e : state.history)
    os << '\x1e' << (e.speaker == Speaker::kAgent ? 'a' : 'u') << e.text;
  return hex64(fnv1a64(os.str()));
}

std::string EncoderConfig::fingerprint() const {
  return hex64(fnv1a64("talktrack-encoder|hashed-bag|v" + std::to_string(version) + "|D" +
                       std::to_string(dimension)));
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (unsigned char c : text) {
    if (std::isalnum(c) && c < 0x80) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::size_t token_bucket(Speaker speaker, std::string_view token, int buckets) {
  std::string key(salt_for(speaker));
  key.append(token);
  return static_cast<std::size_t>(fnv1a64(key) % static_cast<std::uint64_t>(buckets));
}

double segment_feature(std::string_view segment_id) {
  std::string key = "segment|";
  key.append(segment_id);
  const auto bucket = fnv1a64(key) % kSegmentBuckets;
  return static_cast<double>(bucket + 1) / kSegmentBuckets;
}

StateEncoding encode_state(const DialogueState& state, const EncoderConfig& cfg) {
  if (cfg.dimension < 8)
    fail(ErrorKind::kConfig, "encoder dimension must be >= 8, got " + std::to_string(cfg.dimension));
  validate_state(state);

  const int buckets = cfg.dimension - 4;
  StateEncoding enc;
  enc.values.assign(static_cast<std::size_t>(cfg.dimension), 0.0);
  enc.encoder_fingerprint = cfg.fingerprint();

  for (const auto& entry : state.history) {
    const auto tokens = tokenize(entry.text);
    if (tokens.empty()) continue;
    const double mass = 1.0 / static_cast<double>(tokens.size());
    for (const auto& t : tokens) enc.values[token_bucket(entry.speaker, t, buckets)] += mass;
  }

  const double max_turns = static_cast<double>(state.max_turns);
  auto tail = enc.values.begin() + buckets;
  tail[0] = state.turn / max_turns;
  tail[1] = (state.max_turns - state.turn) / max_turns;
  tail[2] = segment_feature(state.segment_id);
  tail[3] = 1.0;
  return enc;
}

}  // namespace talktrack
