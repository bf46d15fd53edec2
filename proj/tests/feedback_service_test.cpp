#include <gtest/gtest.h>

#include <httplib.h>

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "talktrack/dqn.hpp"
#include "talktrack/feedback_service.hpp"
#include "talktrack/io.hpp"
#include "test_support.hpp"

namespace talktrack {
namespace {

using nlohmann::json;
using testing::kind_of;
using testing::toyshop;
using testing::toyshop_rules;

namespace fs = std::filesystem;

PolicyArtifact random_policy(const Scenario& scenario, std::uint64_t seed) {
  const EncoderConfig enc;
  return make_artifact("ppo", enc, scenario.catalog(),
                       {{"policy", Mlp::random({enc.dimension, 16, static_cast<int>(scenario.catalog().size())}, seed)}},
                       "test");
}

class FeedbackTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("talktrack_feedback_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    world_ = toyshop();
  }
  void TearDown() override {
    stop();
    fs::remove_all(dir_);
  }

  FeedbackOptions options(bool generate = true) {
    FeedbackOptions o;
    o.state_dir = dir_;
    o.lease_seconds = 60;
    o.generate_tasks = generate;
    o.max_open_tasks = 16;
    o.seed = 3;
    o.clock = [this] { return clock_.load(); };
    return o;
  }

  void start(bool generate = true) {
    core_ = std::make_unique<FeedbackCore>(world_, toyshop_rules(), random_policy(*world_, 5), options(generate));
    server_ = std::make_unique<FeedbackServer>(*core_);
    port_ = server_->start("127.0.0.1", 0);
  }
  void stop() {
    if (server_) server_->stop();
    server_.reset();
    core_.reset();
  }

  httplib::Client client() const { return httplib::Client("127.0.0.1", port_); }

  httplib::Result post(const std::string& path, const json& body) const {
    return client().Post(path, body.dump(), "application/json");
  }

  json next_task(const std::string& annotator, int expect = 200) const {
    auto res = client().Get("/api/tasks/next?annotator=" + annotator);
    EXPECT_TRUE(res);
    if (!res) return {};
    EXPECT_EQ(res->status, expect) << res->body;
    return res->body.empty() ? json() : json::parse(res->body);
  }

  httplib::Result label(const std::string& id, const std::string& annotator, const std::string& choice) const {
    return post("/api/tasks/" + id + "/label", {{"annotator", annotator}, {"choice", choice}});
  }

  std::size_t stored_labels() const {
    const auto p = dir_ / "preferences.jsonl";
    return fs::exists(p) ? read_nonblank_lines(p).size() : 0;
  }

  fs::path dir_;
  std::shared_ptr<const Scenario> world_;
  std::atomic<double> clock_{1000.0};
  std::unique_ptr<FeedbackCore> core_;
  std::unique_ptr<FeedbackServer> server_;
  int port_ = 0;
};

TEST_F(FeedbackTest, HealthAndMetrics) {
  start();
  auto res = client().Get("/api/health");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  res = client().Get("/api/metrics");
  ASSERT_TRUE(res);
  const auto m = json::parse(res->body);
  EXPECT_EQ(m["labels"], 0);
  EXPECT_EQ(m["compliance_violations"], 0);
}

TEST_F(FeedbackTest, TaskOffersTwoDistinctAllowedCandidates) {
  start();
  for (int i = 0; i < 10; ++i) {
    const auto t = next_task("ann" + std::to_string(i));
    const auto a = t["candidates"]["A"]["id"].get<std::string>();
    const auto b = t["candidates"]["B"]["id"].get<std::string>();
    EXPECT_NE(a, b);
    EXPECT_FALSE(t["candidates"]["A"]["text"].get<std::string>().empty());
    EXPECT_EQ(t["status"], "open");
    EXPECT_LT(t["state"]["turn"].get<int>(), t["state"]["max_turns"].get<int>());
    const auto segment = t["state"]["segment"].get<std::string>();
    for (const auto& id : {a, b}) EXPECT_TRUE(world_->eligible(segment, world_->catalog().index_of(id))) << id;
  }
}

TEST_F(FeedbackTest, ConcurrentAnnotatorsReceiveDisjointTasks) {
  start();
  std::vector<std::string> ids(8);
  std::vector<std::thread> pool;
  for (int i = 0; i < 8; ++i)
    pool.emplace_back([&, i] { ids[i] = next_task("worker" + std::to_string(i))["task_id"].get<std::string>(); });
  for (auto& t : pool) t.join();
  EXPECT_EQ(std::set<std::string>(ids.begin(), ids.end()).size(), ids.size());
  // A lease holder asking again gets the same task back.
  EXPECT_EQ(next_task("worker3")["task_id"], ids[3]);
}

TEST_F(FeedbackTest, ExpiredLeaseIsReassigned) {
  start(false);
  const auto id = core_->enqueue_task(world_->reset("retail"));
  ASSERT_TRUE(id);
  EXPECT_EQ(next_task("alice")["task_id"], *id);
  next_task("bob", 204);
  auto res = label(*id, "bob", "A");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);

  clock_ = clock_.load() + 61;
  EXPECT_EQ(next_task("bob")["task_id"], *id);
  res = label(*id, "alice", "A");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(json::parse(res->body)["code"], "conflict");
  res = label(*id, "bob", "B");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
}

TEST_F(FeedbackTest, LabelingDrainsTheQueueWhenGenerationIsOff) {
  start(false);
  std::vector<std::string> ids;
  for (const auto* seg : {"retail", "business"}) ids.push_back(*core_->enqueue_task(world_->reset(seg)));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto t = next_task("alice");
    auto res = label(t["task_id"], "alice", i % 2 ? "A" : "B");
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 200) << res->body;
  }
  next_task("alice", 204);
  EXPECT_EQ(stored_labels(), 2u);
  EXPECT_EQ(json::parse(client().Get("/api/metrics")->body)["tasks_open"], 0);
}

TEST_F(FeedbackTest, SubmissionStoresOnePreferenceRecord) {
  start();
  const auto t = next_task("alice");
  const std::string id = t["task_id"];
  auto res = label(id, "alice", "B");
  ASSERT_TRUE(res);
  ASSERT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["duplicate"], false);

  const auto records = PreferenceStore(dir_ / "preferences.jsonl").snapshot();
  ASSERT_EQ(records.size(), 1u);
  const auto& r = records[0];
  EXPECT_EQ(r.annotator, "alice");
  EXPECT_EQ(r.choice, Choice::kB);
  EXPECT_EQ(world_->catalog()[r.a].id, t["candidates"]["A"]["id"]);
  EXPECT_EQ(world_->catalog()[r.b].id, t["candidates"]["B"]["id"]);
  EXPECT_EQ(r.state_enc.size(), static_cast<std::size_t>(EncoderConfig{}.dimension));

  // Resubmitting is acknowledged without writing a second record.
  res = label(id, "alice", "B");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 200);
  EXPECT_EQ(json::parse(res->body)["duplicate"], true);
  EXPECT_EQ(stored_labels(), 1u);

  res = label(id, "bob", "A");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 409);
  EXPECT_EQ(stored_labels(), 1u);
}

TEST_F(FeedbackTest, RejectsBadRequests) {
  start();
  const std::string id = next_task("alice")["task_id"];
  auto res = label("t-999999", "alice", "A");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(json::parse(res->body)["code"], "not_found");
  res = label(id, "alice", "C");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = client().Post("/api/tasks/" + id + "/label", "{nope", "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = post("/api/tasks/" + id + "/label", {{"choice", "A"}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = client().Get("/api/tasks/next");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = post("/api/chat", {{"segment", "nobody"}});
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 400);
  res = client().Get("/api/chat/s-424242");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  EXPECT_EQ(stored_labels(), 0u);
}

TEST_F(FeedbackTest, ChatRunsToCompletionWithinTheMask) {
  start();
  ComplianceGate gate(world_->catalog(), toyshop_rules());
  for (const auto* seg : {"retail", "business"}) {
    auto res = post("/api/chat", {{"segment", seg}});
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    auto j = json::parse(res->body);
    const std::string sid = j["session_id"];
    EXPECT_EQ(j["turn"], 0);
    DialogueState mirror = world_->reset(seg);
    int turns = 0;
    while (!j["done"].get<bool>()) {
      ASSERT_TRUE(j["reply"].is_string());
      const auto a = world_->catalog().index_of(j["action_id"].get<std::string>());
      const auto allowed = gate.allowed(*world_, mirror);
      EXPECT_TRUE(std::find(allowed.begin(), allowed.end(), a) != allowed.end()) << j.dump();
      res = post("/api/chat/" + sid + "/message", {{"text", "tell me more"}});
      ASSERT_TRUE(res);
      ASSERT_EQ(res->status, 200) << res->body;
      const auto& entry = world_->entry_for(mirror, a);
      mirror.history.push_back({Speaker::kAgent, world_->catalog()[a].text});
      mirror.history.push_back({Speaker::kUser, "tell me more"});
      ++mirror.turn;
      mirror.phase_key = entry.next_phase;
      j = json::parse(res->body);
      EXPECT_EQ(j["turn"], ++turns);
    }
    EXPECT_TRUE(j["reply"].is_null());
    EXPECT_LE(turns, world_->max_turns());
    res = post("/api/chat/" + sid + "/message", {{"text", "hello?"}});
    ASSERT_TRUE(res);
    EXPECT_EQ(res->status, 409);
    EXPECT_EQ(json::parse(res->body)["code"], "protocol");

    const auto full = json::parse(client().Get("/api/chat/" + sid)->body);
    EXPECT_EQ(full["transcript"].size(), static_cast<std::size_t>(2 * turns));
  }
  const auto m = json::parse(client().Get("/api/metrics")->body);
  EXPECT_EQ(m["sessions_done"], 2);
  EXPECT_GT(m["compliance_screened"].get<int>(), 0);
  EXPECT_EQ(m["compliance_violations"], 0);
}

TEST_F(FeedbackTest, RestartKeepsLabelsTasksAndSessions) {
  start();
  const std::string labeled = next_task("alice")["task_id"];
  ASSERT_EQ(label(labeled, "alice", "A")->status, 200);
  const std::string open = next_task("alice")["task_id"];
  const std::string sid = json::parse(post("/api/chat", {{"segment", "retail"}})->body)["session_id"];
  ASSERT_EQ(post("/api/chat/" + sid + "/message", {{"text", "ok"}})->status, 200);
  const auto before = json::parse(client().Get("/api/chat/" + sid)->body);
  stop();

  start();
  const auto m = json::parse(client().Get("/api/metrics")->body);
  EXPECT_EQ(m["labels"], 1);
  EXPECT_EQ(m["tasks_open"], 1);
  EXPECT_EQ(m["sessions"], 1);
  EXPECT_EQ(json::parse(client().Get("/api/chat/" + sid)->body), before);
  // The labeled task stays closed; the open one is offered again.
  EXPECT_EQ(next_task("carol")["task_id"], open);
  const auto dup = label(labeled, "alice", "A");
  EXPECT_EQ(json::parse(dup->body)["duplicate"], true);
  EXPECT_EQ(stored_labels(), 1u);
  // New ids never collide with replayed ones.
  EXPECT_NE(json::parse(post("/api/chat", {{"segment", "retail"}})->body)["session_id"], sid);
}

TEST_F(FeedbackTest, LabelWithoutTaskEventIsReconciled) {
  start(false);
  const auto id = *core_->enqueue_task(world_->reset("business"));
  ASSERT_EQ(next_task("alice")["task_id"], id);
  ASSERT_EQ(label(id, "alice", "A")->status, 200);
  stop();
  // Drop the trailing "labeled" event as if the process died between writes.
  auto lines = read_nonblank_lines(dir_ / "tasks.jsonl");
  ASSERT_EQ(json::parse(lines.back())["event"], "labeled");
  lines.pop_back();
  fs::remove(dir_ / "tasks.jsonl");
  for (const auto& l : lines) append_line_synced(dir_ / "tasks.jsonl", l);

  start(false);
  next_task("bob", 204);
  EXPECT_EQ(core_->metrics()["labels"], 1);
}

TEST_F(FeedbackTest, CoreValidatesInputs) {
  start();
  EXPECT_EQ(kind_of([&] { core_->next_task(""); }), ErrorKind::kConfig);
  EXPECT_EQ(kind_of([&] { core_->chat_message("s-000404", "hi"); }), ErrorKind::kNotFound);
  auto bad = options();
  bad.lease_seconds = 0;
  EXPECT_EQ(kind_of([&] { FeedbackCore(world_, toyshop_rules(), random_policy(*world_, 5), bad); }),
            ErrorKind::kConfig);
  EXPECT_EQ(http_status_for(ErrorKind::kLookup), 400);
  EXPECT_EQ(http_status_for(ErrorKind::kConflict), 409);
  EXPECT_EQ(http_status_for(ErrorKind::kNotFound), 404);
}

}  // namespace
}  // namespace talktrack
