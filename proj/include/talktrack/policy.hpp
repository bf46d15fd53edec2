#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "talktrack/dialogue.hpp"
#include "talktrack/mlp.hpp"

namespace talktrack {

// Index of the largest value among `allowed`; ties go to the lowest index.
std::size_t masked_argmax(std::span<const double> values, std::span<const std::size_t> allowed);

// Serialized training output: networks keyed by role ("q", "policy",
// "value", "reward") plus what is needed to check compatibility on load.
struct PolicyArtifact {
  std::string algo;
  EncoderConfig encoder;
  std::string encoder_fingerprint;
  std::vector<std::string> action_ids;
  std::map<std::string, Mlp> networks;
  std::string config_digest;

  nlohmann::json to_json() const;
  static PolicyArtifact from_json(const nlohmann::json& j);
  std::string serialize() const;
  // FNV-1a of the serialized form.
  std::string digest() const;
  void save(const std::filesystem::path& path) const;
  static PolicyArtifact load(const std::filesystem::path& path);

  const Mlp& network(const std::string& role) const;
  bool has_network(const std::string& role) const { return networks.count(role) > 0; }

  // Throws ErrorKind::kConfig on encoder fingerprint or action-set mismatch.
  void require_compatible(const EncoderConfig& encoder, const ActionCatalog& catalog) const;
};

// Anything that can choose among allowed actions.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::size_t act(const DialogueState& state, std::span<const std::size_t> allowed) const = 0;
  // Distribution over the catalog, zero outside `allowed`.
  virtual std::vector<double> probabilities(const DialogueState& state,
                                            std::span<const std::size_t> allowed) const;
};

// Greedy policy backed by an artifact: masked argmax over Q-values for
// value-based artifacts, over logits for policy networks.
class NetworkPolicy : public Policy {
 public:
  explicit NetworkPolicy(PolicyArtifact artifact);

  std::size_t act(const DialogueState& state, std::span<const std::size_t> allowed) const override;
  // Softmax of the head output over `allowed`.
  std::vector<double> probabilities(const DialogueState& state,
                                    std::span<const std::size_t> allowed) const override;

  const PolicyArtifact& artifact() const { return artifact_; }
  std::vector<double> head_outputs(const DialogueState& state) const;
  const Mlp& head() const { return artifact_.network(role_); }

 private:
  PolicyArtifact artifact_;
  std::string role_;
};

// Always the fallback utterance.
class FallbackPolicy : public Policy {
 public:
  explicit FallbackPolicy(std::size_t fallback_index) : fallback_(fallback_index) {}
  std::size_t act(const DialogueState&, std::span<const std::size_t>) const override { return fallback_; }

 private:
  std::size_t fallback_;
};

}  // namespace talktrack
