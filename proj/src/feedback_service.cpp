#include "talktrack/feedback_service.hpp"

#include <httplib.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <ctime>

#include "talktrack/error.hpp"
#include "talktrack/io.hpp"

namespace talktrack {

namespace {

constexpr std::uint64_t kServiceStream = 701;

std::string iso_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string make_id(char prefix, std::uint64_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%c-%06llu", prefix, static_cast<unsigned long long>(n));
  return buf;
}

std::uint64_t id_number(const std::string& id) {
  if (id.size() < 3) return 0;
  try {
    return std::stoull(id.substr(2));
  } catch (...) {
    return 0;
  }
}

}  // namespace

FeedbackCore::FeedbackCore(std::shared_ptr<const Scenario> scenario, RuleSet rules, PolicyArtifact artifact,
                           FeedbackOptions options)
    : scenario_(std::move(scenario)),
      options_(std::move(options)),
      rng_(derive_seed(options_.seed, kServiceStream)) {
  if (options_.state_dir.empty()) fail(ErrorKind::kConfig, "serve.state_dir: required");
  if (!(options_.lease_seconds > 0.0)) fail(ErrorKind::kConfig, "serve.lease_seconds: must be positive");
  std::filesystem::create_directories(options_.state_dir);
  artifact.require_compatible(artifact.encoder, scenario_->catalog());
  gate_ = std::make_unique<ComplianceGate>(scenario_->catalog(), std::move(rules),
                                           options_.state_dir / "audit.jsonl");
  policy_ = std::make_unique<NetworkPolicy>(std::move(artifact));
  if (!options_.artifact_path.empty() && std::filesystem::exists(options_.artifact_path))
    artifact_mtime_ = std::filesystem::last_write_time(options_.artifact_path);
  store_ = std::make_unique<PreferenceStore>(preferences_path());
  replay();
}

double FeedbackCore::now() const {
  if (options_.clock) return options_.clock();
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}

void FeedbackCore::append_event(const std::filesystem::path& path, const nlohmann::json& event) {
  append_line_synced(path, event.dump());
}

void FeedbackCore::replay() {
  const auto tasks_path = options_.state_dir / "tasks.jsonl";
  if (std::filesystem::exists(tasks_path)) {
    for (const auto& line : read_nonblank_lines(tasks_path)) {
      const auto ev = nlohmann::json::parse(line);
      const auto id = ev.at("task_id").get<std::string>();
      if (ev.at("event") == "created") {
        LabelTask t;
        t.task_id = id;
        t.state = state_from_json(ev.at("state"));
        t.state_digest = observation_digest(t.state);
        t.state_enc = encode_state(t.state, policy_->artifact().encoder).values;
        t.a = ev.at("a").get<std::size_t>();
        t.b = ev.at("b").get<std::size_t>();
        t.created = ev.value("created", "");
        tasks_[id] = std::move(t);
        next_task_ = std::max(next_task_, id_number(id) + 1);
      } else if (ev.at("event") == "labeled" && tasks_.count(id)) {
        auto& t = tasks_[id];
        t.labeled = true;
        t.labeled_by = ev.at("annotator").get<std::string>();
        t.choice = ev.at("choice") == "A" ? Choice::kA : Choice::kB;
      }
    }
  }
  // A label whose task event was lost still closes its task.
  for (const auto& r : store_->snapshot())
    for (auto& [id, t] : tasks_)
      if (!t.labeled && t.state_digest == r.state_digest && t.a == r.a && t.b == r.b) {
        t.labeled = true;
        t.labeled_by = r.annotator;
        t.choice = r.choice;
        break;
      }

  const auto sessions_path = options_.state_dir / "sessions.jsonl";
  if (!std::filesystem::exists(sessions_path)) return;
  for (const auto& line : read_nonblank_lines(sessions_path)) {
    const auto ev = nlohmann::json::parse(line);
    const auto id = ev.at("session_id").get<std::string>();
    const auto kind = ev.at("event").get<std::string>();
    if (kind == "start") {
      ChatSession s;
      s.session_id = id;
      s.state = scenario_->reset(ev.at("segment").get<std::string>());
      sessions_[id] = std::move(s);
      next_session_ = std::max(next_session_, id_number(id) + 1);
      continue;
    }
    auto it = sessions_.find(id);
    if (it == sessions_.end()) continue;
    auto& s = it->second;
    if (kind == "agent") {
      const auto a = scenario_->catalog().index_of(ev.at("action_id").get<std::string>());
      s.pending_action = a;
      s.transcript.push_back({{"speaker", "agent"}, {"action_id", scenario_->catalog()[a].id},
                              {"text", scenario_->catalog()[a].text}});
    } else if (kind == "user" && s.pending_action) {
      const auto a = *s.pending_action;
      const auto& entry = scenario_->entry_for(s.state, a);
      const auto text = ev.at("text").get<std::string>();
      s.state.history.push_back({Speaker::kAgent, scenario_->catalog()[a].text});
      s.state.history.push_back({Speaker::kUser, text});
      ++s.state.turn;
      s.state.phase_key = entry.next_phase;
      s.pending_action.reset();
      s.done = entry.terminal() || s.state.turn >= s.state.max_turns;
      s.transcript.push_back({{"speaker", "user"}, {"text", text}});
    }
  }
}

std::optional<std::pair<std::size_t, std::size_t>> FeedbackCore::candidates(const DialogueState& state) const {
  const auto allowed = gate_->allowed(*scenario_, state);
  const auto probs = policy_->probabilities(state, allowed);
  std::vector<std::size_t> pool;
  const auto fallback = scenario_->catalog().fallback_index();
  for (auto a : allowed)
    if (a != fallback) pool.push_back(a);
  if (pool.size() < 2) pool = allowed;
  if (pool.size() < 2) return std::nullopt;
  std::stable_sort(pool.begin(), pool.end(), [&](std::size_t x, std::size_t y) { return probs[x] > probs[y]; });
  return std::make_pair(pool[0], pool[1]);
}

LabelTask& FeedbackCore::make_task(const DialogueState& state, std::size_t first, std::size_t second) {
  if (rng_.bernoulli(0.5)) std::swap(first, second);
  LabelTask t;
  t.task_id = make_id('t', next_task_++);
  t.state = state;
  t.state_digest = observation_digest(state);
  t.state_enc = encode_state(state, policy_->artifact().encoder).values;
  t.a = first;
  t.b = second;
  t.created = iso_now();
  for (auto x : {t.a, t.b})
    if (!gate_->check(x, state).allowed) fail(ErrorKind::kProtocol, "candidate failed the compliance check");
  append_event(options_.state_dir / "tasks.jsonl", {{"event", "created"},
                                                     {"task_id", t.task_id},
                                                     {"state", state_to_json(state)},
                                                     {"a", t.a},
                                                     {"b", t.b},
                                                     {"created", t.created}});
  auto id = t.task_id;
  return tasks_[id] = std::move(t);
}

std::optional<std::string> FeedbackCore::enqueue_task(const DialogueState& state) {
  std::lock_guard lock(mutex_);
  const auto pair = candidates(state);
  if (!pair) return std::nullopt;
  return make_task(state, pair->first, pair->second).task_id;
}

std::optional<std::string> FeedbackCore::generate_task_locked() {
  const auto& segments = scenario_->spec().segments;
  for (int attempt = 0; attempt < 100; ++attempt) {
    DialogueState s = scenario_->reset(segments[rng_.uniform_index(segments.size())].id);
    const auto depth = rng_.uniform_index(static_cast<std::size_t>(scenario_->max_turns()));
    bool ended = false;
    for (std::size_t d = 0; d < depth && !ended; ++d) {
      const auto allowed = gate_->allowed(*scenario_, s);
      auto out = scenario_->step(s, allowed[rng_.uniform_index(allowed.size())], rng_);
      ended = out.done;
      s = std::move(out.next_state);
    }
    if (ended) continue;
    if (const auto pair = candidates(s)) return make_task(s, pair->first, pair->second).task_id;
  }
  return std::nullopt;
}

nlohmann::json FeedbackCore::task_json(const LabelTask& t) const {
  const auto& cat = scenario_->catalog();
  return {{"task_id", t.task_id},
          {"state", {{"history", state_to_json(t.state)["history"]},
                     {"turn", t.state.turn},
                     {"max_turns", t.state.max_turns},
                     {"segment", t.state.segment_id}}},
          {"candidates", {{"A", {{"id", cat[t.a].id}, {"text", cat[t.a].text}}},
                          {"B", {{"id", cat[t.b].id}, {"text", cat[t.b].text}}}}},
          {"created", t.created},
          {"status", t.labeled ? "labeled" : "open"}};
}

std::optional<nlohmann::json> FeedbackCore::next_task(const std::string& annotator) {
  if (annotator.empty()) fail(ErrorKind::kConfig, "annotator: required");
  std::lock_guard lock(mutex_);
  const double t = now();
  for (auto& [id, task] : tasks_)
    if (!task.labeled && task.leased_to == annotator && task.lease_expiry > t) return task_json(task);
  LabelTask* pick = nullptr;
  std::size_t open = 0;
  for (auto& [id, task] : tasks_) {
    if (task.labeled) continue;
    ++open;
    if (!pick && (task.leased_to.empty() || task.lease_expiry <= t)) pick = &task;
  }
  if (!pick && options_.generate_tasks && open < options_.max_open_tasks) {
    if (const auto id = generate_task_locked()) pick = &tasks_.at(*id);
  }
  if (!pick) return std::nullopt;
  pick->leased_to = annotator;
  pick->lease_expiry = t + options_.lease_seconds;
  return task_json(*pick);
}

nlohmann::json FeedbackCore::submit_label(const std::string& task_id, const std::string& annotator,
                                          const std::string& choice) {
  if (annotator.empty()) fail(ErrorKind::kConfig, "annotator: required");
  if (choice != "A" && choice != "B") fail(ErrorKind::kConfig, "choice: must be \"A\" or \"B\"");
  std::lock_guard lock(mutex_);
  auto it = tasks_.find(task_id);
  if (it == tasks_.end()) fail(ErrorKind::kNotFound, "unknown task " + task_id);
  auto& t = it->second;
  if (t.labeled) {
    if (t.labeled_by != annotator) fail(ErrorKind::kConflict, "task " + task_id + " was labeled by another annotator");
    return {{"task_id", task_id}, {"status", "labeled"}, {"choice", t.choice == Choice::kA ? "A" : "B"},
            {"duplicate", true}};
  }
  if (!t.leased_to.empty() && t.leased_to != annotator && t.lease_expiry > now())
    fail(ErrorKind::kConflict, "task " + task_id + " is leased to another annotator");
  PreferenceRecord r{t.state_digest, t.state_enc, t.a, t.b, choice == "A" ? Choice::kA : Choice::kB, annotator,
                     iso_now()};
  store_->append(r);
  append_event(options_.state_dir / "tasks.jsonl",
               {{"event", "labeled"}, {"task_id", task_id}, {"annotator", annotator}, {"choice", choice}});
  t.labeled = true;
  t.labeled_by = annotator;
  t.choice = r.choice;
  return {{"task_id", task_id}, {"status", "labeled"}, {"choice", choice}, {"duplicate", false}};
}

std::size_t FeedbackCore::agent_act(ChatSession& s) {
  const auto allowed = gate_->allowed(*scenario_, s.state);
  const auto a = policy_->act(s.state, allowed);
  gate_->screen(a, s.state, "agent");
  s.pending_action = a;
  const auto& u = scenario_->catalog()[a];
  s.transcript.push_back({{"speaker", "agent"}, {"action_id", u.id}, {"text", u.text}});
  append_event(options_.state_dir / "sessions.jsonl",
               {{"event", "agent"}, {"session_id", s.session_id}, {"action_id", u.id}});
  return a;
}

void FeedbackCore::maybe_reload_policy() {
  if (options_.artifact_path.empty() || !std::filesystem::exists(options_.artifact_path)) return;
  const auto mtime = std::filesystem::last_write_time(options_.artifact_path);
  if (mtime == artifact_mtime_) return;
  try {
    auto fresh = PolicyArtifact::load(options_.artifact_path);
    fresh.require_compatible(policy_->artifact().encoder, scenario_->catalog());
    policy_ = std::make_unique<NetworkPolicy>(std::move(fresh));
    artifact_mtime_ = mtime;
  } catch (const Error&) {
    // Keep serving the previous policy; a half-written file is retried later.
  }
}

nlohmann::json FeedbackCore::session_json(const ChatSession& s) const {
  nlohmann::json reply = nullptr, action_id = nullptr;
  if (s.pending_action) {
    reply = scenario_->catalog()[*s.pending_action].text;
    action_id = scenario_->catalog()[*s.pending_action].id;
  }
  return {{"session_id", s.session_id}, {"segment", s.state.segment_id}, {"turn", s.state.turn},
          {"max_turns", s.state.max_turns}, {"done", s.done},     {"reply", reply},
          {"action_id", action_id},         {"transcript", s.transcript}};
}

nlohmann::json FeedbackCore::chat_start(const std::string& segment) {
  std::lock_guard lock(mutex_);
  ChatSession s;
  s.state = scenario_->reset(segment);
  s.session_id = make_id('s', next_session_++);
  append_event(options_.state_dir / "sessions.jsonl",
               {{"event", "start"}, {"session_id", s.session_id}, {"segment", segment}});
  agent_act(s);
  auto id = s.session_id;
  return session_json(sessions_[id] = std::move(s));
}

nlohmann::json FeedbackCore::chat_message(const std::string& session_id, const std::string& text) {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session " + session_id);
  auto& s = it->second;
  if (s.done || !s.pending_action) fail(ErrorKind::kProtocol, "session " + session_id + " is finished");
  const auto a = *s.pending_action;
  const auto& entry = scenario_->entry_for(s.state, a);
  append_event(options_.state_dir / "sessions.jsonl", {{"event", "user"}, {"session_id", session_id}, {"text", text}});
  s.state.history.push_back({Speaker::kAgent, scenario_->catalog()[a].text});
  s.state.history.push_back({Speaker::kUser, text});
  ++s.state.turn;
  s.state.phase_key = entry.next_phase;
  s.pending_action.reset();
  s.transcript.push_back({{"speaker", "user"}, {"text", text}});
  s.done = entry.terminal() || s.state.turn >= s.state.max_turns;
  if (s.done) {
    maybe_reload_policy();
  } else {
    agent_act(s);
  }
  auto out = session_json(s);
  out.erase("transcript");
  return out;
}

nlohmann::json FeedbackCore::chat_get(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) fail(ErrorKind::kNotFound, "unknown session " + session_id);
  return session_json(it->second);
}

nlohmann::json FeedbackCore::metrics() const {
  std::lock_guard lock(mutex_);
  std::size_t labeled = 0, open = 0, leased = 0, done = 0;
  const double t = now();
  for (const auto& [id, task] : tasks_) {
    if (task.labeled) {
      ++labeled;
    } else {
      ++open;
      if (!task.leased_to.empty() && task.lease_expiry > t) ++leased;
    }
  }
  for (const auto& [id, s] : sessions_) done += s.done;
  return {{"labels", labeled},
          {"tasks_open", open},
          {"tasks_leased", leased},
          {"sessions", sessions_.size()},
          {"sessions_done", done},
          {"compliance_screened", gate_->screened()},
          {"compliance_violations", gate_->violations()}};
}

// ---- HTTP ----

int http_status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kNotFound: return 404;
    case ErrorKind::kConflict:
    case ErrorKind::kProtocol: return 409;
    case ErrorKind::kConfig:
    case ErrorKind::kData:
    case ErrorKind::kLookup:
    case ErrorKind::kEligibility: return 400;
    default: return 500;
  }
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json; charset=utf-8");
}

void send_error(httplib::Response& res, int status, const std::string& message, std::string_view code) {
  send_json(res, status, {{"error", message}, {"code", std::string(code)}});
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    send_error(res, http_status_for(e.kind()), e.what(), to_string(e.kind()));
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, std::string("malformed JSON body: ") + e.what(), "data");
  } catch (const std::exception& e) {
    send_error(res, 500, e.what(), "internal");
  }
}

nlohmann::json body_of(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  auto j = nlohmann::json::parse(req.body);
  if (!j.is_object()) fail(ErrorKind::kData, "request body must be a JSON object");
  return j;
}

std::string string_field(const nlohmann::json& body, const std::string& key) {
  if (!body.contains(key)) fail(ErrorKind::kConfig, key + ": required");
  if (!body[key].is_string()) fail(ErrorKind::kConfig, key + ": expected a string");
  return body[key].get<std::string>();
}

}  // namespace

FeedbackServer::FeedbackServer(FeedbackCore& core) : core_(core), server_(std::make_unique<httplib::Server>()) {
  routes();
}

FeedbackServer::~FeedbackServer() { stop(); }

void FeedbackServer::routes() {
  auto& srv = *server_;
  srv.Get("/api/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });
  srv.Get("/api/metrics", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, core_.metrics()); });
  });
  srv.Get("/api/tasks/next", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto task = core_.next_task(req.get_param_value("annotator"));
      if (task) {
        send_json(res, 200, *task);
      } else {
        res.status = 204;
      }
    });
  });
  srv.Post(R"(/api/tasks/([^/]+)/label)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = body_of(req);
      send_json(res, 200,
                core_.submit_label(req.matches[1], string_field(body, "annotator"), string_field(body, "choice")));
    });
  });
  srv.Post("/api/chat", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, core_.chat_start(string_field(body_of(req), "segment"))); });
  });
  srv.Post(R"(/api/chat/([^/]+)/message)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, core_.chat_message(req.matches[1], string_field(body_of(req), "text"))); });
  });
  srv.Get(R"(/api/chat/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, core_.chat_get(req.matches[1])); });
  });
}

int FeedbackServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = server_->bind_to_any_port(host);
  } else if (!server_->bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) fail(ErrorKind::kConfig, "serve.port: cannot bind " + host + ":" + std::to_string(port));
  thread_ = std::thread([this] { server_->listen_after_bind(); });
  server_->wait_until_ready();
  return bound;
}

void FeedbackServer::run(const std::string& host, int port) {
  if (!server_->listen(host, port))
    fail(ErrorKind::kConfig, "serve.port: cannot listen on " + host + ":" + std::to_string(port));
}

void FeedbackServer::stop() {
  if (server_) server_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace talktrack
