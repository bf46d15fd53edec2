#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "talktrack/compliance.hpp"
#include "talktrack/error.hpp"
#include "test_support.hpp"

using namespace talktrack;
using namespace talktrack::testing;

namespace {

DialogueState at_turn(const std::string& segment, int turn) {
  DialogueState s;
  s.segment_id = segment;
  s.max_turns = 5;
  for (int t = 0; t < turn; ++t) {
    s.history.push_back({Speaker::kAgent, "hello"});
    s.history.push_back({Speaker::kUser, "hi"});
  }
  s.turn = turn;
  return s;
}

}  // namespace

TEST(PatternMatches, SubstringAndGlob) {
  EXPECT_TRUE(pattern_matches("guaranteed", "Results GUARANTEED or money back"));
  EXPECT_FALSE(pattern_matches("guaranteed", "Results may vary"));
  EXPECT_TRUE(pattern_matches("*refund*", "full refund today"));
  EXPECT_TRUE(pattern_matches("buy*now", "Buy it now"));
  EXPECT_FALSE(pattern_matches("buy*now", "buy it now please"));
  EXPECT_TRUE(pattern_matches("*", ""));
  EXPECT_TRUE(pattern_matches("a*b*c", "aXXbYYc"));
  EXPECT_FALSE(pattern_matches("a*b*c", "aXXcYYb"));
}

TEST(ComplianceRule, ConditionsAreConjunctive) {
  ComplianceRule r{"r1", std::nullopt, {"close"}, {"business"}, std::nullopt, 0};
  const Utterance close{"close", "shall we sign", "close", false};
  const Utterance pitch{"pitch", "look at this", "pitch", false};
  EXPECT_TRUE(r.matches(close, at_turn("business", 0)));
  EXPECT_FALSE(r.matches(close, at_turn("business", 1)));
  EXPECT_FALSE(r.matches(close, at_turn("retail", 0)));
  EXPECT_FALSE(r.matches(pitch, at_turn("business", 0)));
  ComplianceRule any{"any", std::nullopt, {}, {}, std::nullopt, std::nullopt};
  EXPECT_TRUE(any.matches(pitch, at_turn("retail", 3)));
}

TEST(RuleSet, FirstMatchWinsAndFallbackIsExempt) {
  RuleSet rules({{"first", std::string("sign"), {}, {}, std::nullopt, std::nullopt},
                 {"second", std::nullopt, {"close"}, {}, std::nullopt, std::nullopt},
                 {"everything", std::nullopt, {}, {}, std::nullopt, std::nullopt}});
  const Utterance close{"close", "shall we sign", "close", false};
  const Utterance fb{"fb", "sign here, everything", "fallback", true};
  EXPECT_EQ(*check(close, at_turn("x", 0), rules).blocking_rule, "first");
  EXPECT_TRUE(check(fb, at_turn("x", 0), rules).allowed);
  ActionCatalog cat({close, fb});
  EXPECT_EQ(rules.fallback_warnings(cat).size(), 2u);
  EXPECT_EQ(mask_actions(cat, at_turn("x", 0), rules), std::vector<std::size_t>{1});
}

TEST(RuleSet, ValidationAndRoundTrip) {
  const auto rules = toyshop_rules();
  EXPECT_EQ(RuleSet::from_json(rules.to_json()).to_json(), rules.to_json());
  EXPECT_THROW(RuleSet::from_json(nlohmann::json::parse(R"([{"rule_id":"a"},{"rule_id":"a"}])")), Error);
  EXPECT_THROW(RuleSet::from_json(nlohmann::json::parse(R"([{"rule_id":"a","turn_min":3,"turn_max":1}])")),
               Error);
  EXPECT_THROW(RuleSet::from_json(nlohmann::json::parse(R"({"rule_id":"a"})")), Error);
}

TEST(Toyshop, MaskFollowsRules) {
  const auto cat = toyshop_catalog();
  const auto rules = toyshop_rules();
  auto ids = [&](const std::vector<std::size_t>& m) {
    std::vector<std::string> out;
    for (auto i : m) out.push_back(cat[i].id);
    return out;
  };
  EXPECT_EQ(ids(mask_actions(cat, at_turn("retail", 0), rules)),
            (std::vector<std::string>{"greet", "probe", "close", "fallback"}));
  EXPECT_EQ(ids(mask_actions(cat, at_turn("business", 0), rules)),
            (std::vector<std::string>{"greet", "probe", "fallback"}));
  EXPECT_EQ(ids(mask_actions(cat, at_turn("business", 2), rules)),
            (std::vector<std::string>{"greet", "probe", "pitch", "close", "fallback"}));
}

TEST(ComplianceProperty, MaskIsNeverEmptyAndMatchesCheck) {
  Rng rng(4242);
  const std::vector<std::string> words = {"alpha", "beta", "gamma", "delta"};
  const std::vector<std::string> intents = {"pitch", "close", "probe"};
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<Utterance> utts;
    const std::size_t n = 2 + rng.uniform_index(5);
    const std::size_t fb = rng.uniform_index(n);
    for (std::size_t i = 0; i < n; ++i)
      utts.push_back({"u" + std::to_string(i), words[rng.uniform_index(4)] + " " + words[rng.uniform_index(4)],
                      intents[rng.uniform_index(3)], i == fb});
    std::vector<ComplianceRule> rs;
    const std::size_t nr = rng.uniform_index(6);
    for (std::size_t i = 0; i < nr; ++i) {
      ComplianceRule r;
      r.rule_id = "r" + std::to_string(i);
      if (rng.bernoulli(0.5)) r.pattern = words[rng.uniform_index(4)];
      if (rng.bernoulli(0.5)) r.intents = {intents[rng.uniform_index(3)]};
      if (rng.bernoulli(0.3)) r.turn_max = static_cast<int>(rng.uniform_index(3));
      rs.push_back(r);
    }
    ActionCatalog cat(utts);
    RuleSet rules(rs);
    const auto state = at_turn(rng.bernoulli(0.5) ? "retail" : "business", static_cast<int>(rng.uniform_index(4)));
    const auto mask = mask_actions(cat, state, rules);
    ASSERT_FALSE(mask.empty());
    EXPECT_TRUE(std::find(mask.begin(), mask.end(), fb) != mask.end());
    for (std::size_t i = 0; i < n; ++i) {
      const bool in_mask = std::find(mask.begin(), mask.end(), i) != mask.end();
      EXPECT_EQ(in_mask, check(cat[i], state, rules).allowed);
    }
  }
}

TEST(ComplianceGate, ScreenCountsAndAudits) {
  const auto path = std::filesystem::temp_directory_path() / "talktrack_audit_test.jsonl";
  std::filesystem::remove(path);
  ComplianceGate gate(toyshop_catalog(), toyshop_rules(), path);
  const auto s = at_turn("retail", 1);
  const auto& cat = gate.catalog();
  EXPECT_TRUE(gate.screen(cat.index_of("pitch"), s).allowed);
  EXPECT_FALSE(gate.screen(cat.index_of("hard_sell"), s).allowed);
  EXPECT_FALSE(gate.screen(cat.index_of("hard_sell"), s, "external").allowed);
  EXPECT_EQ(gate.screened(), 3u);
  EXPECT_EQ(gate.violations(), 1u);
  const auto entries = gate.audit_entries();
  ASSERT_EQ(entries.size(), 2u);
  EXPECT_EQ(entries[0].rule_id, "no-guarantees");
  EXPECT_EQ(entries[0].action_id, "hard_sell");
  EXPECT_EQ(entries[0].state_digest, observation_digest(s));
  EXPECT_EQ(entries[1].origin, "external");
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["rule_id"], "no-guarantees");
    EXPECT_TRUE(j.contains("timestamp"));
    ++lines;
  }
  EXPECT_EQ(lines, 2);
  std::filesystem::remove(path);
}
