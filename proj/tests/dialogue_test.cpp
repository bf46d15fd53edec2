#include <gtest/gtest.h>

#include "talktrack/dialogue.hpp"
#include "talktrack/error.hpp"
#include "talktrack/rng.hpp"

using namespace talktrack;

namespace {

DialogueState three_turn_state() {
  DialogueState s;
  s.history = {{Speaker::kAgent, "Hi there, welcome to the shop!"},
               {Speaker::kUser, "Hi! Just looking around."},
               {Speaker::kAgent, "What kind of coffee do you usually enjoy?"},
               {Speaker::kUser, "Mostly espresso, I guess."},
               {Speaker::kAgent, "The Brio espresso machine would suit you."},
               {Speaker::kUser, "That sounds perfect."}};
  s.turn = 3;
  s.max_turns = 5;
  s.segment_id = "retail";
  return s;
}

ActionCatalog ten_item_catalog() {
  std::vector<Utterance> items;
  for (int i = 0; i < 10; ++i)
    items.push_back({"u" + std::to_string(i), "text " + std::to_string(i), "probe", i == 9});
  return ActionCatalog(items);
}

}  // namespace

TEST(Fnv1a, KnownVectors) {
  EXPECT_EQ(fnv1a64(""), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a"), 0xaf63dc4c8601ec8cULL);
}

TEST(Tokenize, LowercasesAndSplitsOnNonAlnum) {
  EXPECT_EQ(tokenize("Hi! Just looking-around, OK?"),
            (std::vector<std::string>{"hi", "just", "looking", "around", "ok"}));
  EXPECT_TRUE(tokenize("  ...  ").empty());
}

TEST(EncodeState, EmptyHistory) {
  DialogueState s;
  s.max_turns = 5;
  s.segment_id = "retail";
  const auto enc = encode_state(s, {16, 1});
  ASSERT_EQ(enc.values.size(), 16u);
  for (int i = 0; i < 12; ++i) EXPECT_EQ(enc.values[i], 0.0);
  EXPECT_EQ(enc.values[12], 0.0);
  EXPECT_EQ(enc.values[13], 1.0);
  EXPECT_EQ(enc.values[15], 1.0);
}

TEST(EncodeState, Deterministic) {
  const auto s = three_turn_state();
  const EncoderConfig cfg{32, 1};
  EXPECT_EQ(encode_state(s, cfg), encode_state(s, cfg));
}

// Reference produced by tests/oracles/encoder_oracle.py.
TEST(EncodeState, MatchesIndependentReimplementation) {
  const std::vector<double> expected = {
      0.16666666666666666, 0.8273809523809523, 0.25, 0.14285714285714285, 0.125, 0.125,
      0.875, 0.976190476190476, 0.375, 0.41666666666666663, 0.4523809523809524, 1.2678571428571428,
      0.6, 0.4, 0.8125, 1.0};
  const auto enc = encode_state(three_turn_state(), {16, 1});
  ASSERT_EQ(enc.values.size(), expected.size());
  for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_DOUBLE_EQ(enc.values[i], expected[i]) << i;
  EXPECT_EQ(enc.encoder_fingerprint, "72daba7a76c7dd53");
}

TEST(EncodeState, RejectsSmallDimension) {
  DialogueState s;
  s.max_turns = 3;
  try {
    encode_state(s, {7, 1});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kConfig);
  }
}

TEST(EncodeState, RejectsInconsistentHistory) {
  auto s = three_turn_state();
  s.turn = 1;
  EXPECT_THROW(encode_state(s, {16, 1}), Error);
}

TEST(EncodeState, AppendingOnlyTouchesOwnBucketsAndTurnFeatures) {
  Rng rng(11);
  const std::vector<std::string> words = {"coffee", "espresso", "cart", "price", "hello", "maybe",
                                          "office", "quote", "thanks", "no"};
  const EncoderConfig cfg{24, 1};
  const int buckets = cfg.dimension - 4;
  for (int trial = 0; trial < 200; ++trial) {
    DialogueState s;
    s.max_turns = 6;
    s.segment_id = trial % 2 ? "retail" : "business";
    const int turns = static_cast<int>(rng.uniform_index(5));
    for (int t = 0; t < turns; ++t) {
      s.history.push_back({Speaker::kAgent, words[rng.uniform_index(words.size())]});
      s.history.push_back({Speaker::kUser, words[rng.uniform_index(words.size())] + " " +
                                               words[rng.uniform_index(words.size())]});
    }
    s.turn = turns;
    const auto before = encode_state(s, cfg).values;

    auto next = s;
    const std::string text = words[rng.uniform_index(words.size())] + " " + words[rng.uniform_index(words.size())];
    next.history.push_back({Speaker::kAgent, text});
    const auto after_agent = encode_state(next, cfg).values;
    std::vector<bool> touched(buckets, false);
    for (const auto& tok : tokenize(text)) touched[token_bucket(Speaker::kAgent, tok, buckets)] = true;
    for (int i = 0; i < buckets; ++i)
      if (!touched[i]) EXPECT_EQ(before[i], after_agent[i]);
    for (int i = buckets; i < cfg.dimension; ++i) EXPECT_EQ(before[i], after_agent[i]);

    next.history.push_back({Speaker::kUser, "ok"});
    next.turn += 1;
    const auto after_turn = encode_state(next, cfg).values;
    const auto ok_bucket = token_bucket(Speaker::kUser, "ok", buckets);
    for (int i = 0; i < buckets; ++i)
      if (!touched[i] && static_cast<std::size_t>(i) != ok_bucket) EXPECT_EQ(before[i], after_turn[i]);
    EXPECT_EQ(before[buckets + 2], after_turn[buckets + 2]);
    EXPECT_EQ(before[buckets + 3], after_turn[buckets + 3]);
  }
}

TEST(ActionCatalog, IndexLookup) {
  const auto catalog = ten_item_catalog();
  EXPECT_EQ(catalog.index_of("u0"), 0u);
  for (std::size_t i = 0; i < catalog.size(); ++i) EXPECT_EQ(catalog.index_of(catalog[i].id), i);
  try {
    catalog.index_of("zzz");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kLookup);
  }
  EXPECT_EQ(catalog.fallback_index(), 9u);
}

TEST(ActionCatalog, RequiresExactlyOneFallbackAndUniqueIds) {
  EXPECT_THROW(ActionCatalog({{"a", "x", "greet", false}}), Error);
  EXPECT_THROW(ActionCatalog({{"a", "x", "greet", true}, {"b", "y", "fallback", true}}), Error);
  EXPECT_THROW(ActionCatalog({{"a", "x", "greet", true}, {"a", "y", "probe", false}}), Error);
  EXPECT_THROW(ActionCatalog(std::vector<Utterance>{}), Error);
}

TEST(ActionCatalog, LoadsBundledToyshop) {
  const auto catalog = ActionCatalog::load(std::string(TALKTRACK_DATA_DIR) + "/toyshop/catalog.json");
  EXPECT_EQ(catalog.size(), 6u);
  EXPECT_EQ(catalog[catalog.fallback_index()].id, "fallback");
  EXPECT_EQ(ActionCatalog::from_json(catalog.to_json()).utterances(), catalog.utterances());
}
