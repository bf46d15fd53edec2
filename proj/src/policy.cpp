#include "talktrack/policy.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "talktrack/error.hpp"
#include "talktrack/io.hpp"

namespace talktrack {

std::size_t masked_argmax(std::span<const double> values, std::span<const std::size_t> allowed) {
  if (allowed.empty()) fail(ErrorKind::kProtocol, "no allowed actions");
  std::size_t best = allowed.front();
  for (auto a : allowed)
    if (values[a] > values[best] || (values[a] == values[best] && a < best)) best = a;
  return best;
}

nlohmann::json PolicyArtifact::to_json() const {
  nlohmann::json nets = nlohmann::json::object();
  for (const auto& [role, net] : networks) nets[role] = net.to_json();
  return {{"format", "talktrack-policy/1"},
          {"algo", algo},
          {"encoder", {{"dimension", encoder.dimension}, {"version", encoder.version}}},
          {"encoder_fingerprint", encoder_fingerprint},
          {"action_ids", action_ids},
          {"networks", nets},
          {"config_digest", config_digest}};
}

PolicyArtifact PolicyArtifact::from_json(const nlohmann::json& j) {
  PolicyArtifact a;
  try {
    if (j.value("format", "") != "talktrack-policy/1") fail(ErrorKind::kData, "not a talktrack policy artifact");
    a.algo = j.at("algo").get<std::string>();
    a.encoder.dimension = j.at("encoder").at("dimension").get<int>();
    a.encoder.version = j.at("encoder").at("version").get<int>();
    a.encoder_fingerprint = j.at("encoder_fingerprint").get<std::string>();
    a.action_ids = j.at("action_ids").get<std::vector<std::string>>();
    for (const auto& [role, net] : j.at("networks").items()) a.networks.emplace(role, Mlp::from_json(net));
    a.config_digest = j.value("config_digest", "");
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kData, std::string("artifact: ") + ex.what());
  }
  if (a.encoder_fingerprint != a.encoder.fingerprint())
    fail(ErrorKind::kData, "artifact encoder fingerprint does not match its encoder config");
  return a;
}

std::string PolicyArtifact::serialize() const { return to_json().dump(); }

std::string PolicyArtifact::digest() const { return hex64(fnv1a64(serialize())); }

void PolicyArtifact::save(const std::filesystem::path& path) const {
  ensure_parent_dir(path);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::kData, "cannot write artifact " + path.string());
  out << serialize() << '\n';
}

PolicyArtifact PolicyArtifact::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::kData, "cannot read artifact " + path.string());
  try {
    return from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& ex) {
    fail(ErrorKind::kData, path.string() + ": " + ex.what());
  }
}

const Mlp& PolicyArtifact::network(const std::string& role) const {
  auto it = networks.find(role);
  if (it == networks.end()) fail(ErrorKind::kData, "artifact has no '" + role + "' network");
  return it->second;
}

void PolicyArtifact::require_compatible(const EncoderConfig& enc, const ActionCatalog& catalog) const {
  if (encoder_fingerprint != enc.fingerprint())
    fail(ErrorKind::kConfig, "encoder fingerprint mismatch: artifact " + encoder_fingerprint + ", config " +
                                 enc.fingerprint());
  if (action_ids.size() != catalog.size())
    fail(ErrorKind::kConfig, "artifact action count does not match catalog");
  for (std::size_t i = 0; i < action_ids.size(); ++i)
    if (action_ids[i] != catalog[i].id)
      fail(ErrorKind::kConfig, "artifact action " + std::to_string(i) + " is '" + action_ids[i] +
                                   "', catalog has '" + catalog[i].id + "'");
}

std::vector<double> Policy::probabilities(const DialogueState& state,
                                          std::span<const std::size_t> allowed) const {
  std::size_t size = 0;
  for (auto i : allowed) size = std::max(size, i + 1);
  std::vector<double> p(size, 0.0);
  p[act(state, allowed)] = 1.0;
  return p;
}

NetworkPolicy::NetworkPolicy(PolicyArtifact artifact) : artifact_(std::move(artifact)) {
  if (artifact_.has_network("policy")) {
    role_ = "policy";
  } else if (artifact_.has_network("q")) {
    role_ = "q";
  } else {
    fail(ErrorKind::kData, "artifact has neither a 'policy' nor a 'q' network");
  }
  if (head().input_dim() != static_cast<std::size_t>(artifact_.encoder.dimension))
    fail(ErrorKind::kData, "network input does not match encoder dimension");
  if (head().output_dim() != artifact_.action_ids.size())
    fail(ErrorKind::kData, "network output does not match action count");
}

std::vector<double> NetworkPolicy::head_outputs(const DialogueState& state) const {
  return head().forward(encode_state(state, artifact_.encoder).values);
}

std::size_t NetworkPolicy::act(const DialogueState& state, std::span<const std::size_t> allowed) const {
  return masked_argmax(head_outputs(state), allowed);
}

std::vector<double> NetworkPolicy::probabilities(const DialogueState& state,
                                                 std::span<const std::size_t> allowed) const {
  return masked_softmax(head_outputs(state), allowed);
}

}  // namespace talktrack
