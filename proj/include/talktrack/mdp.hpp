#pragma once

#include <functional>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "talktrack/policy.hpp"
#include "talktrack/scenario.hpp"

namespace talktrack {

// Finite MDP over the (phase, turn) grid of one segment plus one absorbing
// terminal state. Transitions are sparse: a list of (next state, probability)
// per allowed action.
struct ExplicitMdp {
  struct Outcome {
    std::size_t next = 0;
    double probability = 1.0;
  };

  std::string segment;
  std::vector<std::string> phases;
  int max_turns = 1;
  std::size_t num_actions = 0;
  std::size_t start = 0;

  std::vector<std::vector<std::size_t>> allowed;                  // per state
  std::vector<std::vector<std::vector<Outcome>>> transitions;     // [s][a]
  std::vector<std::vector<double>> expected_reward;               // [s][a]
  std::vector<std::vector<double>> expected_conversion;           // [s][a]

  std::size_t num_states() const { return allowed.size(); }
  std::size_t terminal() const { return num_states() - 1; }
  std::size_t state_index(std::size_t phase, int turn) const {
    return phase * static_cast<std::size_t>(max_turns) + static_cast<std::size_t>(turn);
  }
  std::size_t phase_of(std::size_t s) const { return s / static_cast<std::size_t>(max_turns); }
  int turn_of(std::size_t s) const { return static_cast<int>(s % static_cast<std::size_t>(max_turns)); }
  std::size_t phase_index(std::string_view phase) const;
  bool is_allowed(std::size_t s, std::size_t a) const;
};

// Returns the actions an agent may take in a state. The state passed in has
// the correct segment, phase and turn but an empty history.
using ActionFilter = std::function<std::vector<std::size_t>(const DialogueState&)>;

inline constexpr std::size_t kDefaultOracleCap = 10000;

// Throws ErrorKind::kOracleSize when phases x max_turns exceeds `cap`.
ExplicitMdp enumerate_mdp(const Scenario& scenario, std::string_view segment,
                          const ActionFilter& filter = nullptr,
                          std::size_t cap = kDefaultOracleCap);

struct ValueIterationResult {
  std::vector<std::vector<double>> q;  // NaN for disallowed actions
  std::vector<double> v;
  std::vector<int> greedy;             // -1 where no action exists
  double residual = 0.0;
  int sweeps = 0;

  // Actions within `tol` of the best Q value.
  std::vector<std::size_t> optimal_actions(std::size_t s, double tol = 1e-9) const;
};

ValueIterationResult value_iteration(const ExplicitMdp& mdp, double gamma, double tol = 1e-10);

// Stochastic policy as per-state action probabilities (size num_actions).
using TabularPolicy = std::vector<std::vector<double>>;

enum class RewardChannel { kReturn, kConversion };

std::vector<double> evaluate_policy(const ExplicitMdp& mdp, const TabularPolicy& policy,
                                    double gamma, RewardChannel channel = RewardChannel::kReturn,
                                    double tol = 1e-12);

TabularPolicy uniform_policy(const ExplicitMdp& mdp);
TabularPolicy greedy_policy(const ExplicitMdp& mdp, const ValueIterationResult& vi);

// States with positive probability of being visited from `start` under some
// sequence of allowed actions. Excludes the terminal state.
std::vector<std::size_t> reachable_states(const ExplicitMdp& mdp);

// Index of a live dialogue state in the segment's MDP.
std::size_t mdp_state_of(const ExplicitMdp& mdp, const DialogueState& state);

// Acts greedily on the exact Q values of every segment.
class OraclePolicy : public Policy {
 public:
  OraclePolicy(const Scenario& scenario, const ActionFilter& filter, double gamma);
  std::size_t act(const DialogueState& state, std::span<const std::size_t> allowed) const override;
  const ExplicitMdp& mdp(const std::string& segment) const { return solved_.at(segment).first; }
  const ValueIterationResult& solution(const std::string& segment) const { return solved_.at(segment).second; }

 private:
  std::map<std::string, std::pair<ExplicitMdp, ValueIterationResult>> solved_;
};

}  // namespace talktrack
