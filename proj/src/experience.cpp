#include "talktrack/experience.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "talktrack/error.hpp"
#include "talktrack/io.hpp"

namespace talktrack {

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) fail(ErrorKind::kConfig, "replay buffer capacity must be >= 1");
  data_.reserve(std::min<std::size_t>(capacity_, 1 << 16));
}

void ReplayBuffer::push(Transition t) {
  ++inserted_;
  if (data_.size() < capacity_) {
    data_.push_back(std::move(t));
    return;
  }
  data_[head_] = std::move(t);
  head_ = (head_ + 1) % capacity_;
}

const Transition& ReplayBuffer::at(std::size_t i) const {
  if (i >= data_.size()) fail(ErrorKind::kLookup, "replay index out of range");
  return data_[(head_ + i) % data_.size()];
}

std::vector<Transition> ReplayBuffer::contents() const {
  std::vector<Transition> out;
  out.reserve(data_.size());
  for (std::size_t i = 0; i < data_.size(); ++i) out.push_back(at(i));
  return out;
}

std::vector<const Transition*> ReplayBuffer::sample_uniform(std::size_t n, Rng& rng) const {
  if (data_.empty()) fail(ErrorKind::kData, "cannot sample from an empty replay buffer");
  std::vector<const Transition*> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&data_[rng.uniform_index(data_.size())]);
  return out;
}

nlohmann::json episode_to_json(const LoggedEpisode& episode) {
  auto turns = nlohmann::json::array();
  for (const auto& t : episode.turns)
    turns.push_back({{"phase", t.phase}, {"action_id", t.action_id}, {"reply", t.reply}, {"reward", t.reward}});
  return {{"segment", episode.segment}, {"turns", turns}, {"converted", episode.converted ? 1 : 0}};
}

namespace {

void require_keys(const nlohmann::json& j, std::initializer_list<std::string_view> keys,
                  const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::kData, where + ": expected an object");
  for (const auto& [k, v] : j.items())
    if (std::find(keys.begin(), keys.end(), k) == keys.end())
      fail(ErrorKind::kData, where + ": unexpected field '" + k + "'");
  for (auto k : keys)
    if (!j.contains(std::string(k))) fail(ErrorKind::kData, where + ": missing field '" + std::string(k) + "'");
}

}  // namespace

LoggedEpisode episode_from_json(const nlohmann::json& j) {
  require_keys(j, {"segment", "turns", "converted"}, "episode");
  LoggedEpisode e;
  try {
    e.segment = j.at("segment").get<std::string>();
    const auto& conv = j.at("converted");
    if (conv.is_boolean()) {
      e.converted = conv.get<bool>();
    } else {
      const int c = conv.get<int>();
      if (c != 0 && c != 1) fail(ErrorKind::kData, "episode: converted must be 0 or 1");
      e.converted = c == 1;
    }
    const auto& turns = j.at("turns");
    if (!turns.is_array()) fail(ErrorKind::kData, "episode: turns must be an array");
    for (std::size_t i = 0; i < turns.size(); ++i) {
      const auto where = "turns[" + std::to_string(i) + "]";
      require_keys(turns[i], {"phase", "action_id", "reply", "reward"}, where);
      LoggedTurn t{turns[i]["phase"].get<std::string>(), turns[i]["action_id"].get<std::string>(),
                   turns[i]["reply"].get<std::string>(), turns[i]["reward"].get<double>()};
      if (t.action_id.empty()) fail(ErrorKind::kData, where + ": empty action_id");
      e.turns.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kData, std::string("episode: ") + ex.what());
  }
  if (e.segment.empty()) fail(ErrorKind::kData, "episode: empty segment");
  return e;
}

IngestResult ingest_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read log " + path.string());
  IngestResult result;
  result.files = 1;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      result.episodes.push_back(episode_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& ex) {
      result.errors.push_back({path.string(), number, ex.what()});
    } catch (const Error& ex) {
      result.errors.push_back({path.string(), number, ex.what()});
    }
  }
  return result;
}

IngestResult ingest_path(const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  if (!fs::exists(path)) fail(ErrorKind::kData, "log path does not exist: " + path.string());
  if (!fs::is_directory(path)) return ingest_log(path);
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(path))
    if (entry.is_regular_file() && entry.path().extension() == ".jsonl") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  IngestResult total;
  for (const auto& f : files) {
    auto r = ingest_log(f);
    total.files += 1;
    std::move(r.episodes.begin(), r.episodes.end(), std::back_inserter(total.episodes));
    std::move(r.errors.begin(), r.errors.end(), std::back_inserter(total.errors));
  }
  return total;
}

void write_log(const std::filesystem::path& path, const std::vector<LoggedEpisode>& episodes) {
  ensure_parent_dir(path);
  std::ofstream out(path);
  if (!out) fail(ErrorKind::kData, "cannot write log " + path.string());
  for (const auto& e : episodes) out << episode_to_json(e).dump() << '\n';
}

std::string AggregateCell::modal_reply() const {
  std::string best;
  std::uint64_t best_count = 0;
  // std::map iterates in lexicographic order, so the first maximum wins ties.
  for (const auto& [reply, n] : reply_counts)
    if (n > best_count) {
      best = reply;
      best_count = n;
    }
  return best;
}

std::string aggregate_state_digest(const LoggedEpisode& episode, std::size_t turn_index) {
  const auto& turn = episode.turns.at(turn_index);
  if (!turn.phase.empty()) return turn.phase + "@" + std::to_string(turn_index);
  std::ostringstream os;
  os << episode.segment;
  for (std::size_t i = 0; i < turn_index; ++i)
    os << '\x1e' << episode.turns[i].action_id << '\x1f' << episode.turns[i].reply;
  return "h:" + hex64(fnv1a64(os.str())) + "@" + std::to_string(turn_index);
}

AggregateTable aggregate(const std::vector<LoggedEpisode>& episodes) {
  AggregateTable table;
  for (const auto& e : episodes) {
    for (std::size_t i = 0; i < e.turns.size(); ++i) {
      auto& cell = table[{aggregate_state_digest(e, i), e.turns[i].action_id}];
      ++cell.reply_counts[e.turns[i].reply];
      ++cell.count;
      if (e.converted) ++cell.conversions;
    }
  }
  return table;
}

nlohmann::json aggregate_to_json(const AggregateTable& table) {
  auto out = nlohmann::json::array();
  for (const auto& [key, cell] : table)
    out.push_back({{"state", key.first},
                   {"action_id", key.second},
                   {"count", cell.count},
                   {"reply_counts", cell.reply_counts},
                   {"modal_reply", cell.modal_reply()},
                   {"mean_conversion", cell.mean_conversion()}});
  return out;
}

std::vector<DialogueState> states_from_episode(const LoggedEpisode& episode, const Scenario& scenario) {
  if (static_cast<int>(episode.turns.size()) > scenario.max_turns())
    fail(ErrorKind::kData, "episode longer than the scenario turn budget");
  std::vector<DialogueState> states;
  DialogueState s = scenario.reset(episode.segment);
  for (const auto& t : episode.turns) {
    if (!t.phase.empty()) s.phase_key = t.phase;
    states.push_back(s);
    const auto a = scenario.catalog().index_of(t.action_id);
    s.history.push_back({Speaker::kAgent, scenario.catalog()[a].text});
    s.history.push_back({Speaker::kUser, t.reply});
    s.turn += 1;
  }
  return states;
}

std::vector<Transition> transitions_from_episode(const LoggedEpisode& episode, const Scenario& scenario,
                                                 const ComplianceGate& gate, const EncoderConfig& encoder) {
  const auto states = states_from_episode(episode, scenario);
  std::vector<Transition> out;
  for (std::size_t i = 0; i < states.size(); ++i) {
    const auto& t = episode.turns[i];
    const auto a = scenario.catalog().index_of(t.action_id);
    DialogueState next = states[i];
    next.history.push_back({Speaker::kAgent, scenario.catalog()[a].text});
    next.history.push_back({Speaker::kUser, t.reply});
    next.turn += 1;
    Transition tr;
    tr.state_enc = encode_state(states[i], encoder).values;
    tr.action = a;
    tr.reward = t.reward;
    tr.next_state_enc = encode_state(next, encoder).values;
    tr.done = i + 1 == states.size();
    if (!tr.done) tr.allowed_next = gate.allowed(scenario, next);
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace talktrack
