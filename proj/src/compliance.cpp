#include "talktrack/compliance.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <ctime>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

// Anchored glob where '*' matches any (possibly empty) run.
bool glob_match(std::string_view pat, std::string_view text) {
  std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
  while (t < text.size()) {
    if (p < pat.size() && pat[p] == '*') {
      star = p++;
      mark = t;
    } else if (p < pat.size() && pat[p] == text[t]) {
      ++p;
      ++t;
    } else if (star != std::string_view::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pat.size() && pat[p] == '*') ++p;
  return p == pat.size();
}

bool text_conditions_match(const ComplianceRule& rule, const Utterance& action) {
  if (rule.pattern && !pattern_matches(*rule.pattern, action.text)) return false;
  if (!rule.intents.empty() && !rule.intents.count(action.intent_tag)) return false;
  return true;
}

}  // namespace

bool pattern_matches(std::string_view pattern, std::string_view text) {
  const auto p = lower(pattern);
  const auto t = lower(text);
  if (p.find('*') == std::string::npos) return t.find(p) != std::string::npos;
  return glob_match(p, t);
}

bool ComplianceRule::matches(const Utterance& action, const DialogueState& state) const {
  if (!text_conditions_match(*this, action)) return false;
  if (!segments.empty() && !segments.count(state.segment_id)) return false;
  if (turn_min && state.turn < *turn_min) return false;
  if (turn_max && state.turn > *turn_max) return false;
  return true;
}

RuleSet::RuleSet(std::vector<ComplianceRule> rules) : rules_(std::move(rules)) {
  std::set<std::string> ids;
  for (const auto& r : rules_) {
    if (r.rule_id.empty()) fail(ErrorKind::kData, "compliance rule with empty rule_id");
    if (!ids.insert(r.rule_id).second) fail(ErrorKind::kData, "duplicate rule_id '" + r.rule_id + "'");
    if (r.pattern && r.pattern->empty())
      fail(ErrorKind::kData, "rule '" + r.rule_id + "': empty pattern");
    if (r.turn_min && r.turn_max && *r.turn_min > *r.turn_max)
      fail(ErrorKind::kData, "rule '" + r.rule_id + "': turn_min > turn_max");
  }
}

RuleSet RuleSet::from_json(const nlohmann::json& j) {
  if (!j.is_array()) fail(ErrorKind::kData, "rules: expected a JSON array");
  std::vector<ComplianceRule> rules;
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& e = j[i];
    try {
      ComplianceRule r;
      r.rule_id = e.at("rule_id").get<std::string>();
      if (e.contains("pattern")) r.pattern = e["pattern"].get<std::string>();
      if (e.contains("intents")) r.intents = e["intents"].get<std::set<std::string>>();
      if (e.contains("segments")) r.segments = e["segments"].get<std::set<std::string>>();
      if (e.contains("turn_min")) r.turn_min = e["turn_min"].get<int>();
      if (e.contains("turn_max")) r.turn_max = e["turn_max"].get<int>();
      rules.push_back(std::move(r));
    } catch (const nlohmann::json::exception& ex) {
      fail(ErrorKind::kData, "rules[" + std::to_string(i) + "]: " + ex.what());
    }
  }
  return RuleSet(std::move(rules));
}

RuleSet RuleSet::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::kData, "cannot read rules " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorKind::kData, path.string() + ": " + ex.what());
  }
}

nlohmann::json RuleSet::to_json() const {
  auto out = nlohmann::json::array();
  for (const auto& r : rules_) {
    nlohmann::json e{{"rule_id", r.rule_id}};
    if (r.pattern) e["pattern"] = *r.pattern;
    if (!r.intents.empty()) e["intents"] = r.intents;
    if (!r.segments.empty()) e["segments"] = r.segments;
    if (r.turn_min) e["turn_min"] = *r.turn_min;
    if (r.turn_max) e["turn_max"] = *r.turn_max;
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<std::string> RuleSet::fallback_warnings(const ActionCatalog& catalog) const {
  std::vector<std::string> out;
  const auto& fb = catalog[catalog.fallback_index()];
  for (const auto& r : rules_)
    if (text_conditions_match(r, fb))
      out.push_back("rule '" + r.rule_id + "' matches fallback '" + fb.id + "' and is ignored for it");
  return out;
}

ComplianceVerdict check(const Utterance& action, const DialogueState& state, const RuleSet& rules) {
  if (action.is_fallback) return ComplianceVerdict::allow();
  for (const auto& r : rules.rules())
    if (r.matches(action, state)) return ComplianceVerdict::block(r.rule_id);
  return ComplianceVerdict::allow();
}

std::vector<std::size_t> mask_actions(const ActionCatalog& catalog, const DialogueState& state,
                                      const RuleSet& rules) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < catalog.size(); ++i)
    if (i == catalog.fallback_index() || check(catalog[i], state, rules).allowed) out.push_back(i);
  return out;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&secs, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%S", &tm);
  char out[40];
  std::snprintf(out, sizeof(out), "%s.%03dZ", buf, static_cast<int>(ms));
  return out;
}

ComplianceGate::ComplianceGate(ActionCatalog catalog, RuleSet rules,
                               std::optional<std::filesystem::path> audit_path)
    : catalog_(std::move(catalog)),
      rules_(std::move(rules)),
      warnings_(rules_.fallback_warnings(catalog_)),
      audit_path_(std::move(audit_path)) {}

std::vector<std::size_t> ComplianceGate::mask(const DialogueState& state) const {
  return mask_actions(catalog_, state, rules_);
}

std::vector<std::size_t> ComplianceGate::allowed(const Scenario& scenario, const DialogueState& state) const {
  auto out = mask(state);
  std::erase_if(out, [&](std::size_t a) { return !scenario.eligible(state.segment_id, a); });
  return out;
}

ComplianceVerdict ComplianceGate::check(std::size_t action, const DialogueState& state) const {
  return talktrack::check(catalog_.at(action), state, rules_);
}

ComplianceVerdict ComplianceGate::screen(std::size_t action, const DialogueState& state,
                                         std::string_view origin) {
  ++screened_;
  auto verdict = check(action, state);
  if (verdict.allowed) return verdict;
  if (origin == "agent") ++violations_;
  AuditEntry entry{utc_timestamp(), *verdict.blocking_rule, catalog_[action].id,
                   observation_digest(state), std::string(origin)};
  std::lock_guard lock(audit_mutex_);
  if (audit_path_) {
    std::ofstream out(*audit_path_, std::ios::app);
    out << nlohmann::json{{"timestamp", entry.timestamp},
                          {"rule_id", entry.rule_id},
                          {"action_id", entry.action_id},
                          {"state_digest", entry.state_digest},
                          {"origin", entry.origin}}
               .dump()
        << '\n';
  }
  audit_.push_back(std::move(entry));
  return verdict;
}

std::vector<AuditEntry> ComplianceGate::audit_entries() const {
  std::lock_guard lock(audit_mutex_);
  return audit_;
}

}  // namespace talktrack
