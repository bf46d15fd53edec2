#include "talktrack/config.hpp"

#include <cctype>
#include <charconv>
#include <fstream>
#include <sstream>

#include "talktrack/error.hpp"

namespace talktrack {

namespace {

[[noreturn]] void toml_error(std::size_t line, const std::string& message) {
  fail(ErrorKind::kConfig, "config line " + std::to_string(line) + ": " + message);
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool is_key_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; }

// Drops a trailing comment that is not inside a string.
std::string_view strip_comment(std::string_view line) {
  bool in_string = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (in_string && line[i] == '\\') {
      ++i;
    } else if (line[i] == '"') {
      in_string = !in_string;
    } else if (line[i] == '#' && !in_string) {
      return line.substr(0, i);
    }
  }
  return line;
}

class ValueParser {
 public:
  ValueParser(std::string_view text, std::size_t line) : s_(text), line_(line) {}

  nlohmann::json parse() {
    auto v = value();
    skip_ws();
    if (pos_ != s_.size()) toml_error(line_, "unexpected trailing text");
    return v;
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  nlohmann::json value() {
    skip_ws();
    if (pos_ >= s_.size()) toml_error(line_, "missing value");
    const char c = s_[pos_];
    if (c == '"') return string();
    if (c == '[') return array();
    if (s_.substr(pos_, 4) == "true") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "false") {
      pos_ += 5;
      return false;
    }
    return number();
  }

  nlohmann::json string() {
    ++pos_;
    std::string out;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      char c = s_[pos_++];
      if (c == '\\') {
        if (pos_ >= s_.size()) break;
        const char e = s_[pos_++];
        switch (e) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: toml_error(line_, std::string("unsupported escape \\") + e);
        }
      }
      out.push_back(c);
    }
    if (pos_ >= s_.size()) toml_error(line_, "unterminated string");
    ++pos_;
    return out;
  }

  nlohmann::json array() {
    ++pos_;
    auto out = nlohmann::json::array();
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return out;
    }
    while (true) {
      auto v = value();
      if (v.is_array()) toml_error(line_, "nested arrays are not supported");
      out.push_back(std::move(v));
      skip_ws();
      if (pos_ >= s_.size()) toml_error(line_, "unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return out;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return out;
      }
      toml_error(line_, "expected ',' or ']' in array");
    }
  }

  nlohmann::json number() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '+' ||
                                s_[pos_] == '-' || s_[pos_] == '.' || s_[pos_] == '_'))
      ++pos_;
    std::string tok;
    for (char c : s_.substr(start, pos_ - start))
      if (c != '_') tok.push_back(c);
    if (tok.empty()) toml_error(line_, "invalid value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    if (!is_float) {
      std::int64_t v = 0;
      const auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size()) toml_error(line_, "invalid number '" + tok + "'");
      return v;
    }
    std::istringstream in(tok);
    in.imbue(std::locale::classic());
    double d = 0.0;
    in >> d;
    if (in.fail() || !in.eof()) toml_error(line_, "invalid number '" + tok + "'");
    return d;
  }

  std::string_view s_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

// Typed access to one table, remembering which keys were consumed so that
// anything left over can be reported with its full path.
class Table {
 public:
  Table(const nlohmann::json* j, std::string prefix) : j_(j), prefix_(std::move(prefix)) {}

  bool has(const std::string& key) const { return j_ && j_->contains(key); }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  [[noreturn]] void bad(const std::string& key, const std::string& message) const {
    fail(ErrorKind::kConfig, path(key) + ": " + message);
  }

  const nlohmann::json* find(const std::string& key) {
    if (!has(key)) return nullptr;
    used_.insert(key);
    return &j_->at(key);
  }

  void get(const std::string& key, std::string& out) {
    if (auto v = find(key)) {
      if (!v->is_string()) bad(key, "expected a string");
      out = v->get<std::string>();
    }
  }
  void get(const std::string& key, double& out) {
    if (auto v = find(key)) {
      if (!v->is_number()) bad(key, "expected a number");
      out = v->get<double>();
    }
  }
  void get(const std::string& key, bool& out) {
    if (auto v = find(key)) {
      if (!v->is_boolean()) bad(key, "expected true or false");
      out = v->get<bool>();
    }
  }
  void get(const std::string& key, std::size_t& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer() || v->get<std::int64_t>() < 0) bad(key, "expected a non-negative integer");
      out = v->get<std::size_t>();
    }
  }
  void get(const std::string& key, int& out) {
    if (auto v = find(key)) {
      if (!v->is_number_integer()) bad(key, "expected an integer");
      out = v->get<int>();
    }
  }
  void get(const std::string& key, std::vector<int>& out) {
    if (auto v = find(key)) {
      if (!v->is_array()) bad(key, "expected an array of integers");
      std::vector<int> tmp;
      for (const auto& x : *v) {
        if (!x.is_number_integer() || x.get<int>() < 1) bad(key, "expected an array of positive integers");
        tmp.push_back(x.get<int>());
      }
      out = std::move(tmp);
    }
  }
  void get_path(const std::string& key, std::filesystem::path& out, const std::filesystem::path& base) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    std::filesystem::path p(s);
    out = p.is_absolute() || base.empty() ? p : base / p;
  }
  void get_optimizer(const std::string& key, OptimizerKind& out) {
    std::string s;
    get(key, s);
    if (s.empty()) return;
    if (s == "adam") out = OptimizerKind::kAdam;
    else if (s == "sgd") out = OptimizerKind::kSgd;
    else bad(key, "expected \"adam\" or \"sgd\"");
  }

  void finish() const {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (!used_.count(k)) fail(ErrorKind::kConfig, path(k) + ": unknown key");
  }

 private:
  const nlohmann::json* j_;
  std::string prefix_;
  std::set<std::string> used_;
};

const nlohmann::json* section(const nlohmann::json& root, const std::string& name) {
  if (!root.contains(name)) return nullptr;
  if (!root[name].is_object()) fail(ErrorKind::kConfig, name + ": expected a [" + name + "] section");
  return &root[name];
}

// Runs a validator and rewrites its message to carry the section path.
template <typename F>
void validate_in(const std::string& section_name, F&& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::kConfig) throw;
    std::string msg = e.what();
    if (msg.rfind(section_name + ".", 0) != 0) msg = section_name + ": " + msg;
    fail(ErrorKind::kConfig, msg);
  }
}

void read_ppo(Table& t, PpoConfig& c) {
  t.get("gamma", c.gamma);
  t.get("gae_lambda", c.gae_lambda);
  t.get("clip_epsilon", c.clip_epsilon);
  t.get("entropy_coef", c.entropy_coef);
  t.get("value_coef", c.value_coef);
  t.get("epochs_per_batch", c.epochs_per_batch);
  t.get("minibatch_size", c.minibatch_size);
  t.get("rollout_episodes", c.rollout_episodes);
  t.get("num_iterations", c.num_iterations);
  t.get("learning_rate", c.learning_rate);
  t.get("normalize_advantages", c.normalize_advantages);
  t.get("subtract_entropy", c.subtract_entropy);
  t.get("constant_reward_guard", c.constant_reward_guard);
  t.get("hidden", c.hidden);
}

void require_file(const std::string& key, const std::filesystem::path& p) {
  if (p.empty()) fail(ErrorKind::kConfig, key + ": required");
  if (!std::filesystem::exists(p)) fail(ErrorKind::kConfig, key + ": file not found: " + p.string());
}

}  // namespace

nlohmann::json parse_toml(std::string_view text) {
  nlohmann::json root = nlohmann::json::object();
  nlohmann::json* current = &root;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find('\n', pos);
    std::string_view raw = text.substr(pos, end == std::string_view::npos ? std::string_view::npos : end - pos);
    pos = end == std::string_view::npos ? text.size() + 1 : end + 1;
    ++line_no;
    const auto line = trim(strip_comment(raw));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') toml_error(line_no, "malformed section header");
      const auto name = trim(line.substr(1, line.size() - 2));
      if (name.empty() || !std::all_of(name.begin(), name.end(), is_key_char))
        toml_error(line_no, "invalid section name '" + std::string(name) + "'");
      const std::string key(name);
      if (root.contains(key)) toml_error(line_no, "duplicate section or key '" + key + "'");
      root[key] = nlohmann::json::object();
      current = &root[key];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) toml_error(line_no, "expected key = value");
    const auto key_view = trim(line.substr(0, eq));
    if (key_view.empty() || !std::all_of(key_view.begin(), key_view.end(), is_key_char))
      toml_error(line_no, "invalid key '" + std::string(key_view) + "'");
    const std::string key(key_view);
    if (current->contains(key)) toml_error(line_no, "duplicate key '" + key + "'");
    (*current)[key] = ValueParser(trim(line.substr(eq + 1)), line_no).parse();
  }
  return root;
}

RunConfig RunConfig::from_toml(std::string_view text, const std::filesystem::path& base_dir) {
  RunConfig c;
  c.source = parse_toml(text);
  const auto& root = c.source;

  Table top(&root, "");
  if (!top.has("seed")) fail(ErrorKind::kConfig, "seed: required");
  {
    const auto* v = top.find("seed");
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0) top.bad("seed", "expected a non-negative integer");
    c.seed = v->get<std::uint64_t>();
  }
  if (const auto* v = top.find("env_seed")) {
    if (!v->is_number_integer() || v->get<std::int64_t>() < 0)
      top.bad("env_seed", "expected a non-negative integer");
    c.env_seed = v->get<std::uint64_t>();
  }
  top.get("algo", c.algo);
  top.get("mode", c.mode);
  top.get_path("output_dir", c.output_dir, base_dir);
  static const std::set<std::string> algos = {"dqn", "ppo", "sft", "reward-model", "rlhf"};
  if (c.algo.empty()) fail(ErrorKind::kConfig, "algo: required");
  if (!algos.count(c.algo)) top.bad("algo", "expected one of dqn, ppo, sft, reward-model, rlhf");
  if (c.mode != "offline" && c.mode != "online" && c.mode != "aggregate")
    top.bad("mode", "expected one of offline, online, aggregate");
  if (c.output_dir.empty()) c.output_dir = base_dir.empty() ? std::filesystem::path("out") : base_dir / "out";

  Table data(section(root, "data"), "data");
  data.get_path("scenario", c.scenario, base_dir);
  data.get_path("catalog", c.catalog, base_dir);
  data.get_path("rules", c.rules, base_dir);
  data.get_path("logs", c.logs, base_dir);
  data.get_path("dialogues", c.dialogues, base_dir);
  data.get_path("preferences", c.preferences, base_dir);
  data.get_path("base_artifact", c.base_artifact, base_dir);
  data.get_path("reward_artifact", c.reward_artifact, base_dir);

  Table enc(section(root, "encoder"), "encoder");
  enc.get("dimension", c.encoder.dimension);
  enc.get("version", c.encoder.version);
  if (c.encoder.dimension < 8) enc.bad("dimension", "must be >= 8");
  if (c.encoder.version != 1) enc.bad("version", "only version 1 is supported");

  Table dqn(section(root, "dqn"), "dqn");
  dqn.get("gamma", c.dqn.gamma);
  dqn.get("epsilon_start", c.dqn.epsilon_start);
  dqn.get("epsilon_end", c.dqn.epsilon_end);
  dqn.get("epsilon_decay", c.dqn.epsilon_decay);
  dqn.get("target_update_period", c.dqn.target_update_period);
  dqn.get("batch_size", c.dqn.batch_size);
  dqn.get("buffer_capacity", c.dqn.buffer_capacity);
  dqn.get("learning_rate", c.dqn.learning_rate);
  dqn.get("num_episodes", c.dqn.num_episodes);
  dqn.get("max_env_steps", c.dqn.max_env_steps);
  dqn.get("max_turns", c.dqn.max_turns);
  dqn.get("hidden", c.dqn.hidden);
  dqn.get("offline_updates", c.dqn.offline_updates);

  Table ppo(section(root, "ppo"), "ppo");
  read_ppo(ppo, c.ppo);

  Table sft(section(root, "sft"), "sft");
  sft.get("epochs", c.sft.epochs);
  sft.get("minibatch_size", c.sft.minibatch_size);
  sft.get_optimizer("optimizer", c.sft.optimizer);
  sft.get("learning_rate", c.sft.learning_rate);
  sft.get("hidden", c.sft.hidden);

  Table rm(section(root, "reward_model"), "reward_model");
  rm.get("epochs", c.reward_model.epochs);
  rm.get("minibatch_size", c.reward_model.minibatch_size);
  rm.get("learning_rate", c.reward_model.learning_rate);
  rm.get("hidden", c.reward_model.hidden);

  Table rlhf(section(root, "rlhf"), "rlhf");
  rlhf.get("kl_coef", c.rlhf.kl_coef);
  rlhf.get("prompts_per_iteration", c.rlhf.prompts_per_iteration);
  read_ppo(rlhf, c.rlhf.ppo);

  Table serve(section(root, "serve"), "serve");
  serve.get("host", c.serve.host);
  serve.get("port", c.serve.port);
  serve.get_path("artifact", c.serve.artifact, base_dir);
  serve.get_path("state_dir", c.serve.state_dir, base_dir);
  serve.get("lease_seconds", c.serve.lease_seconds);
  serve.get("generate_tasks", c.serve.generate_tasks);
  serve.get("max_open_tasks", c.serve.max_open_tasks);
  if (c.serve.port < 0 || c.serve.port > 65535) serve.bad("port", "must lie in [0, 65535]");
  if (!(c.serve.lease_seconds > 0.0)) serve.bad("lease_seconds", "must be positive");
  if (c.serve.state_dir.empty()) c.serve.state_dir = c.output_dir;

  for (const auto& [k, v] : root.items()) {
    static const std::set<std::string> sections = {"data", "encoder", "dqn", "ppo", "sft", "reward_model", "rlhf",
                                                   "serve"};
    if (v.is_object() && !sections.count(k)) fail(ErrorKind::kConfig, k + ": unknown section");
  }
  // Section tables sit at the root next to the plain keys.
  {
    Table root_keys(&root, "");
    for (const auto& k : {"seed", "env_seed", "algo", "mode", "output_dir", "data", "encoder", "dqn", "ppo", "sft",
                          "reward_model", "rlhf", "serve"})
      root_keys.find(k);
    root_keys.finish();
  }
  data.finish();
  enc.finish();
  dqn.finish();
  ppo.finish();
  sft.finish();
  rm.finish();
  rlhf.finish();
  serve.finish();

  validate_in("dqn", [&] { c.dqn.validate(); });
  validate_in("ppo", [&] { c.ppo.validate(); });
  validate_in("sft", [&] { c.sft.validate(); });
  validate_in("reward_model", [&] { c.reward_model.validate(); });
  validate_in("rlhf", [&] {
    if (!(c.rlhf.kl_coef >= 0.0)) fail(ErrorKind::kConfig, "rlhf.kl_coef: must be >= 0");
    if (c.rlhf.prompts_per_iteration < 1) fail(ErrorKind::kConfig, "rlhf.prompts_per_iteration: must be >= 1");
    c.rlhf.ppo.validate();
  });

  // Referenced files must exist before any work starts.
  require_file("data.scenario", c.scenario);
  require_file("data.catalog", c.catalog);
  require_file("data.rules", c.rules);
  if (c.algo == "dqn" && c.mode == "offline") require_file("data.logs", c.logs);
  if (c.algo == "ppo" && c.mode == "offline")
    fail(ErrorKind::kConfig, "mode: ppo learns on-policy and cannot train offline");
  if (c.algo == "sft") require_file("data.dialogues", c.dialogues);
  if (c.algo == "reward-model") require_file("data.preferences", c.preferences);
  if (c.algo == "rlhf") {
    require_file("data.base_artifact", c.base_artifact);
    require_file("data.reward_artifact", c.reward_artifact);
    if (c.mode == "offline") fail(ErrorKind::kConfig, "mode: rlhf draws prompts from the environment; use online or aggregate");
  }
  return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kConfig, "cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return from_toml(ss.str(), path.parent_path());
}

std::string RunConfig::digest() const {
  // Where results are written does not change them.
  auto canonical = source;
  canonical.erase("output_dir");
  return hex64(fnv1a64(canonical.dump()));
}

std::uint64_t RunConfig::effective_env_seed() const { return env_seed ? *env_seed : derive_seed(seed, 1000); }

}  // namespace talktrack
