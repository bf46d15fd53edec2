#pragma once

#include <gtest/gtest.h>

#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "talktrack/compliance.hpp"
#include "talktrack/error.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack::testing {

inline ErrorKind kind_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.kind();
  }
  ADD_FAILURE() << "expected an error";
  return ErrorKind::kConflict;
}

inline std::string data_path(const std::string& rel) { return std::string(TALKTRACK_DATA_DIR) + "/" + rel; }

inline ActionCatalog toyshop_catalog() { return ActionCatalog::load(data_path("toyshop/catalog.json")); }
inline RuleSet toyshop_rules() { return RuleSet::load(data_path("toyshop/rules.json")); }

inline std::shared_ptr<const Scenario> toyshop() {
  return std::make_shared<const Scenario>(ScenarioSpec::load(data_path("toyshop/scenario.json")),
                                          toyshop_catalog());
}

// Two-action catalog: "go" plus the fallback "wait".
inline ActionCatalog go_wait_catalog() {
  return ActionCatalog({{"go", "let us go", "pitch", false}, {"wait", "one moment", "fallback", true}});
}

// One phase, two actions; `go` ends the dialogue with the given replies and
// conversion probability, `wait` stays.
inline nlohmann::json reply_list(const std::vector<std::pair<std::string, double>>& replies) {
  auto out = nlohmann::json::array();
  for (const auto& [text, p] : replies) out.push_back(nlohmann::json::array({text, p}));
  return out;
}

inline std::shared_ptr<const Scenario> single_phase(const std::vector<std::pair<std::string, double>>& go_replies,
                                                    double conversion,
                                                    double immediate, int max_turns,
                                                    std::string go_next = "Terminal") {
  nlohmann::json spec = {
      {"phases", nlohmann::json::array({"p"})},
      {"segments", nlohmann::json::array({{{"id", "s"}, {"start_phase", "p"}}})},
      {"eligibility", {{"s", {"go", "wait"}}}},
      {"max_turns", max_turns},
      {"conversion_value", 1.0},
      {"dynamics",
       nlohmann::json::array({{{"phase", "p"}, {"action", "go"}, {"replies", reply_list(go_replies)}, {"next_phase", go_next},
         {"conversion_probability", conversion}, {"immediate_reward", immediate}},
        {{"phase", "p"}, {"action", "wait"}, {"replies", reply_list({{"hm", 1.0}})}, {"next_phase", "p"},
         {"conversion_probability", 0.0}, {"immediate_reward", 0.0}}})}};
  return std::make_shared<const Scenario>(ScenarioSpec::from_json(spec), go_wait_catalog());
}

}  // namespace talktrack::testing
