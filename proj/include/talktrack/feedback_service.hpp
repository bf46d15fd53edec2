#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "talktrack/compliance.hpp"
#include "talktrack/error.hpp"
#include "talktrack/policy.hpp"
#include "talktrack/rlhf.hpp"
#include "talktrack/scenario.hpp"

namespace httplib {
class Server;
}

namespace talktrack {

struct LabelTask {
  std::string task_id;
  DialogueState state;
  std::string state_digest;
  std::vector<double> state_enc;
  std::size_t a = 0;
  std::size_t b = 0;
  std::string created;
  bool labeled = false;
  std::string leased_to;
  double lease_expiry = 0.0;
  std::string labeled_by;
  Choice choice = Choice::kA;
};

struct ChatSession {
  std::string session_id;
  DialogueState state;
  std::optional<std::size_t> pending_action;  // agent utterance awaiting the user
  nlohmann::json transcript = nlohmann::json::array();
  bool done = false;
};

struct FeedbackOptions {
  std::filesystem::path state_dir;
  std::filesystem::path artifact_path;  // reloaded when it changes between sessions
  double lease_seconds = 120.0;
  bool generate_tasks = true;
  std::size_t max_open_tasks = 64;
  std::uint64_t seed = 0;
  // Seconds on a monotonic scale; replaceable for tests.
  std::function<double()> clock;
};

// Transport-independent labeling queue and chat sandbox. All mutations go
// through one mutex; every acknowledged label and chat event is on disk
// before the call returns.
class FeedbackCore {
 public:
  FeedbackCore(std::shared_ptr<const Scenario> scenario, RuleSet rules, PolicyArtifact artifact,
               FeedbackOptions options);

  // An open task leased to the annotator, or nothing when the queue is empty.
  std::optional<nlohmann::json> next_task(const std::string& annotator);
  // Builds a task from the policy's two most probable allowed actions at
  // `state`. Returns its id, or nothing when fewer than two actions exist.
  std::optional<std::string> enqueue_task(const DialogueState& state);
  // Throws kNotFound for an unknown task, kConflict when another annotator
  // labeled it or holds its lease, kConfig for a bad choice.
  nlohmann::json submit_label(const std::string& task_id, const std::string& annotator, const std::string& choice);

  nlohmann::json chat_start(const std::string& segment);
  // Throws kNotFound for an unknown session, kProtocol once it is done.
  nlohmann::json chat_message(const std::string& session_id, const std::string& text);
  nlohmann::json chat_get(const std::string& session_id) const;

  nlohmann::json metrics() const;
  nlohmann::json task_json(const LabelTask& task) const;
  const ComplianceGate& gate() const { return *gate_; }
  std::filesystem::path preferences_path() const { return options_.state_dir / "preferences.jsonl"; }

 private:
  double now() const;
  void append_event(const std::filesystem::path& path, const nlohmann::json& event);
  void replay();
  LabelTask& make_task(const DialogueState& state, std::size_t first, std::size_t second);
  std::optional<std::pair<std::size_t, std::size_t>> candidates(const DialogueState& state) const;
  std::size_t agent_act(ChatSession& session);
  void maybe_reload_policy();
  std::optional<std::string> generate_task_locked();
  nlohmann::json session_json(const ChatSession& s) const;

  std::shared_ptr<const Scenario> scenario_;
  std::unique_ptr<ComplianceGate> gate_;
  std::unique_ptr<NetworkPolicy> policy_;
  std::filesystem::file_time_type artifact_mtime_{};
  FeedbackOptions options_;
  std::unique_ptr<PreferenceStore> store_;
  Rng rng_;
  std::map<std::string, LabelTask> tasks_;
  std::map<std::string, ChatSession> sessions_;
  std::uint64_t next_task_ = 1;
  std::uint64_t next_session_ = 1;
  mutable std::mutex mutex_;
};

// HTTP front end over a FeedbackCore.
class FeedbackServer {
 public:
  explicit FeedbackServer(FeedbackCore& core);
  ~FeedbackServer();
  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host, int port);
  // Serves on the calling thread until stop().
  void run(const std::string& host, int port);
  void stop();

 private:
  void routes();
  FeedbackCore& core_;
  std::unique_ptr<httplib::Server> server_;
  std::thread thread_;
};

int http_status_for(ErrorKind kind);

}  // namespace talktrack
