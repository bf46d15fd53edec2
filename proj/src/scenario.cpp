#include "talktrack/scenario.hpp"

#include <cmath>
#include <deque>
#include <fstream>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

std::string entry_label(const std::string& phase, const std::string& action) {
  return "dynamics(" + phase + ", " + action + ")";
}

}  // namespace

const std::string& DynamicsEntry::modal_reply() const {
  const Reply* best = &replies.front();
  for (const auto& r : replies) {
    if (r.probability > best->probability ||
        (r.probability == best->probability && r.text < best->text))
      best = &r;
  }
  return best->text;
}

ScenarioSpec ScenarioSpec::from_json(const nlohmann::json& j) {
  ScenarioSpec spec;
  try {
    spec.phases = j.at("phases").get<std::vector<std::string>>();
    for (const auto& s : j.at("segments"))
      spec.segments.push_back({s.at("id").get<std::string>(), s.at("start_phase").get<std::string>()});
    for (const auto& [seg, ids] : j.at("eligibility").items())
      spec.eligibility[seg] = ids.get<std::set<std::string>>();
    spec.max_turns = j.at("max_turns").get<int>();
    spec.conversion_value = j.value("conversion_value", 1.0);
    const auto& dyn = j.at("dynamics");
    for (std::size_t i = 0; i < dyn.size(); ++i) {
      const auto& d = dyn[i];
      DynamicsEntry e;
      for (const auto& r : d.at("replies"))
        e.replies.push_back({r.at(0).get<std::string>(), r.at(1).get<double>()});
      const auto& next = d.at("next_phase");
      e.next_phase = next.is_null() ? std::string(kTerminalPhase) : next.get<std::string>();
      e.conversion_probability = d.value("conversion_probability", 0.0);
      e.immediate_reward = d.value("immediate_reward", 0.0);
      auto key = std::make_pair(d.at("phase").get<std::string>(), d.at("action").get<std::string>());
      if (!spec.dynamics.emplace(key, std::move(e)).second)
        fail(ErrorKind::kData, "duplicate " + entry_label(key.first, key.second));
    }
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kData, std::string("scenario: ") + ex.what());
  }
  spec.validate();
  return spec;
}

ScenarioSpec ScenarioSpec::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read scenario " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorKind::kData, path.string() + ": " + ex.what());
  }
}

nlohmann::json ScenarioSpec::to_json() const {
  nlohmann::json j;
  j["phases"] = phases;
  j["segments"] = nlohmann::json::array();
  for (const auto& s : segments) j["segments"].push_back({{"id", s.id}, {"start_phase", s.start_phase}});
  j["eligibility"] = nlohmann::json::object();
  for (const auto& [seg, ids] : eligibility) j["eligibility"][seg] = ids;
  j["max_turns"] = max_turns;
  j["conversion_value"] = conversion_value;
  j["dynamics"] = nlohmann::json::array();
  for (const auto& [key, e] : dynamics) {
    nlohmann::json replies = nlohmann::json::array();
    for (const auto& r : e.replies) replies.push_back({r.text, r.probability});
    j["dynamics"].push_back({{"phase", key.first},
                             {"action", key.second},
                             {"replies", replies},
                             {"next_phase", e.next_phase},
                             {"conversion_probability", e.conversion_probability},
                             {"immediate_reward", e.immediate_reward}});
  }
  return j;
}

void ScenarioSpec::validate() const {
  if (max_turns < 1) fail(ErrorKind::kData, "max_turns must be >= 1");
  if (phases.empty()) fail(ErrorKind::kData, "scenario has no phases");
  if (segments.empty()) fail(ErrorKind::kData, "scenario has no segments");
  std::set<std::string> phase_set;
  for (const auto& p : phases) {
    if (p == kTerminalPhase) fail(ErrorKind::kData, "phase name 'Terminal' is reserved");
    if (!phase_set.insert(p).second) fail(ErrorKind::kData, "duplicate phase '" + p + "'");
  }

  for (const auto& [key, e] : dynamics) {
    const auto label = entry_label(key.first, key.second);
    if (!phase_set.count(key.first)) fail(ErrorKind::kData, label + ": unknown phase");
    if (e.replies.empty()) fail(ErrorKind::kData, label + ": no replies");
    double total = 0.0;
    for (const auto& r : e.replies) {
      if (!(r.probability >= 0.0)) fail(ErrorKind::kData, label + ": negative reply probability");
      total += r.probability;
    }
    if (std::abs(total - 1.0) > 1e-9)
      fail(ErrorKind::kData, label + ": reply probabilities sum to " + std::to_string(total));
    if (!(e.conversion_probability >= 0.0 && e.conversion_probability <= 1.0))
      fail(ErrorKind::kData, label + ": conversion_probability outside [0, 1]");
    if (!std::isfinite(e.immediate_reward)) fail(ErrorKind::kData, label + ": non-finite reward");
    if (!e.terminal() && !phase_set.count(e.next_phase))
      fail(ErrorKind::kData, label + ": next_phase '" + e.next_phase + "' does not exist");
  }

  std::set<std::string> seen_segments;
  for (const auto& seg : segments) {
    if (!seen_segments.insert(seg.id).second)
      fail(ErrorKind::kData, "duplicate segment '" + seg.id + "'");
    if (!phase_set.count(seg.start_phase))
      fail(ErrorKind::kData, "segment '" + seg.id + "': unknown start phase");
    auto elig = eligibility.find(seg.id);
    if (elig == eligibility.end() || elig->second.empty())
      fail(ErrorKind::kData, "segment '" + seg.id + "' has no eligible actions");
    // Every phase this segment can reach needs an entry for every eligible action.
    std::set<std::string> visited{seg.start_phase};
    std::deque<std::string> frontier{seg.start_phase};
    while (!frontier.empty()) {
      const auto phase = frontier.front();
      frontier.pop_front();
      for (const auto& action : elig->second) {
        const auto* e = find(phase, action);
        if (!e) fail(ErrorKind::kData, "missing " + entry_label(phase, action) + " for segment '" + seg.id + "'");
        if (!e->terminal() && visited.insert(e->next_phase).second) frontier.push_back(e->next_phase);
      }
    }
  }
  for (const auto& [seg, ids] : eligibility)
    if (!seen_segments.count(seg)) fail(ErrorKind::kData, "eligibility for unknown segment '" + seg + "'");
}

const SegmentSpec& ScenarioSpec::segment(std::string_view id) const {
  for (const auto& s : segments)
    if (s.id == id) return s;
  fail(ErrorKind::kLookup, "unknown segment '" + std::string(id) + "'");
}

const DynamicsEntry* ScenarioSpec::find(std::string_view phase, std::string_view action) const {
  auto it = dynamics.find({std::string(phase), std::string(action)});
  return it == dynamics.end() ? nullptr : &it->second;
}

Scenario::Scenario(ScenarioSpec spec, ActionCatalog catalog)
    : spec_(std::move(spec)), catalog_(std::move(catalog)) {
  spec_.validate();
  for (const auto& [key, e] : spec_.dynamics)
    if (!catalog_.contains(key.second))
      fail(ErrorKind::kData, entry_label(key.first, key.second) + ": action not in catalog");
  const auto& fallback_id = catalog_[catalog_.fallback_index()].id;
  for (const auto& [seg, ids] : spec_.eligibility) {
    for (const auto& id : ids)
      if (!catalog_.contains(id))
        fail(ErrorKind::kData, "eligibility '" + seg + "': action '" + id + "' not in catalog");
    if (!ids.count(fallback_id))
      fail(ErrorKind::kData, "fallback '" + fallback_id + "' must be eligible for segment '" + seg + "'");
  }
}

DialogueState Scenario::reset(std::string_view segment_id) const {
  const auto& seg = spec_.segment(segment_id);
  DialogueState s;
  s.turn = 0;
  s.max_turns = spec_.max_turns;
  s.segment_id = seg.id;
  s.phase_key = seg.start_phase;
  return s;
}

bool Scenario::is_terminal(const DialogueState& state) const {
  return state.phase_key == kTerminalPhase || state.turn >= state.max_turns;
}

bool Scenario::eligible(std::string_view segment_id, std::size_t action) const {
  auto it = spec_.eligibility.find(std::string(segment_id));
  return action < catalog_.size() && it != spec_.eligibility.end() &&
         it->second.count(catalog_[action].id) > 0;
}

std::vector<std::size_t> Scenario::eligible_actions(std::string_view segment_id) const {
  std::vector<std::size_t> out;
  for (std::size_t a = 0; a < catalog_.size(); ++a)
    if (eligible(segment_id, a)) out.push_back(a);
  return out;
}

const DynamicsEntry& Scenario::entry_for(const DialogueState& state, std::size_t action) const {
  if (is_terminal(state)) fail(ErrorKind::kProtocol, "cannot step a terminal dialogue state");
  if (state.awaiting_user()) fail(ErrorKind::kProtocol, "state is waiting for a user reply");
  if (action >= catalog_.size())
    fail(ErrorKind::kLookup, "action index " + std::to_string(action) + " out of range");
  if (!eligible(state.segment_id, action))
    fail(ErrorKind::kEligibility, "action '" + catalog_[action].id + "' is not eligible for segment '" +
                                      state.segment_id + "'");
  const auto* e = spec_.find(state.phase_key, catalog_[action].id);
  if (!e) fail(ErrorKind::kData, "missing " + entry_label(state.phase_key, catalog_[action].id));
  return *e;
}

StepOutcome Scenario::finish(const DialogueState& state, std::size_t action,
                             const DynamicsEntry& entry, const std::string& reply,
                             double conversion_reward) const {
  StepOutcome out;
  out.next_state = state;
  out.next_state.history.push_back({Speaker::kAgent, catalog_[action].text});
  out.next_state.history.push_back({Speaker::kUser, reply});
  out.next_state.turn = state.turn + 1;
  out.next_state.phase_key = entry.next_phase;
  out.done = entry.terminal() || out.next_state.turn >= out.next_state.max_turns;
  out.reward = entry.immediate_reward + (entry.terminal() ? conversion_reward : 0.0);
  out.info.reply_text = reply;
  return out;
}

StepOutcome Scenario::step(const DialogueState& state, std::size_t action, Rng& rng) const {
  const auto& entry = entry_for(state, action);
  const std::string* reply = &entry.replies.back().text;
  if (entry.replies.size() > 1) {
    const double u = rng.uniform();
    double cumulative = 0.0;
    for (const auto& r : entry.replies) {
      cumulative += r.probability;
      if (u < cumulative) {
        reply = &r.text;
        break;
      }
    }
  }
  bool converted = false;
  if (entry.terminal()) converted = rng.bernoulli(entry.conversion_probability);
  auto out = finish(state, action, entry, *reply, converted ? spec_.conversion_value : 0.0);
  out.info.converted = converted;
  return out;
}

StepOutcome Scenario::step_aggregate(const DialogueState& state, std::size_t action) const {
  const auto& entry = entry_for(state, action);
  const double expected = entry.terminal() ? entry.conversion_probability : 0.0;
  auto out = finish(state, action, entry, entry.modal_reply(), expected * spec_.conversion_value);
  out.info.expected_conversion = expected;
  return out;
}

std::string_view to_string(FeedbackMode mode) {
  return mode == FeedbackMode::kSampled ? "sampled" : "aggregate";
}

Environment::Environment(std::shared_ptr<const Scenario> scenario, FeedbackMode mode,
                         std::uint64_t seed)
    : scenario_(std::move(scenario)), mode_(mode), rng_(seed) {}

DialogueState Environment::reset(std::string_view segment_id) {
  return scenario_->reset(segment_id);
}

StepOutcome Environment::execute(const DialogueState& state, std::size_t action) {
  auto out = mode_ == FeedbackMode::kSampled ? scenario_->step(state, action, rng_)
                                             : scenario_->step_aggregate(state, action);
  ++steps_;
  if (tracing_)
    trace_.push_back({state.segment_id, state.turn, action, out.info.reply_text, out.reward, out.done});
  return out;
}

StepOutcome Environment::step(const DialogueState& state, std::size_t action) {
  ++reward_reads_;
  return execute(state, action);
}

std::pair<DialogueState, bool> Environment::advance(const DialogueState& state, std::size_t action) {
  auto out = execute(state, action);
  return {std::move(out.next_state), out.done};
}

}  // namespace talktrack
