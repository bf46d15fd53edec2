#include "talktrack/mdp.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "talktrack/error.hpp"

namespace talktrack {

std::size_t ExplicitMdp::phase_index(std::string_view phase) const {
  for (std::size_t i = 0; i < phases.size(); ++i)
    if (phases[i] == phase) return i;
  fail(ErrorKind::kLookup, "unknown phase '" + std::string(phase) + "'");
}

bool ExplicitMdp::is_allowed(std::size_t s, std::size_t a) const {
  return std::find(allowed[s].begin(), allowed[s].end(), a) != allowed[s].end();
}

ExplicitMdp enumerate_mdp(const Scenario& scenario, std::string_view segment,
                          const ActionFilter& filter, std::size_t cap) {
  const auto& spec = scenario.spec();
  const std::size_t grid = spec.phases.size() * static_cast<std::size_t>(spec.max_turns);
  if (grid > cap)
    fail(ErrorKind::kOracleSize, "phase x turn grid of " + std::to_string(grid) +
                                     " exceeds oracle cap " + std::to_string(cap));

  ExplicitMdp mdp;
  const auto& seg = spec.segment(segment);
  mdp.segment = seg.id;
  mdp.phases = spec.phases;
  mdp.max_turns = spec.max_turns;
  mdp.num_actions = scenario.catalog().size();
  const std::size_t n = grid + 1;
  mdp.allowed.resize(n);
  mdp.transitions.assign(n, std::vector<std::vector<ExplicitMdp::Outcome>>(mdp.num_actions));
  mdp.expected_reward.assign(n, std::vector<double>(mdp.num_actions, 0.0));
  mdp.expected_conversion.assign(n, std::vector<double>(mdp.num_actions, 0.0));
  mdp.start = mdp.state_index(mdp.phase_index(seg.start_phase), 0);

  const auto eligible = scenario.eligible_actions(seg.id);
  for (std::size_t p = 0; p < mdp.phases.size(); ++p) {
    for (int t = 0; t < mdp.max_turns; ++t) {
      const std::size_t s = mdp.state_index(p, t);
      DialogueState proto;
      proto.segment_id = seg.id;
      proto.phase_key = mdp.phases[p];
      proto.turn = t;
      proto.max_turns = mdp.max_turns;
      std::vector<std::size_t> candidates = filter ? filter(proto) : eligible;
      for (std::size_t a : candidates) {
        if (!scenario.eligible(seg.id, a)) continue;
        const auto* e = spec.find(mdp.phases[p], scenario.catalog()[a].id);
        // Phases this segment cannot reach may lack entries.
        if (!e) continue;
        mdp.allowed[s].push_back(a);
        std::size_t next = mdp.terminal();
        if (!e->terminal() && t + 1 < mdp.max_turns)
          next = mdp.state_index(mdp.phase_index(e->next_phase), t + 1);
        // The reply does not influence the next phase, so one outcome carries all mass.
        mdp.transitions[s][a] = {{next, 1.0}};
        const double conv = e->terminal() ? e->conversion_probability : 0.0;
        mdp.expected_conversion[s][a] = conv;
        mdp.expected_reward[s][a] = e->immediate_reward + conv * spec.conversion_value;
      }
      std::sort(mdp.allowed[s].begin(), mdp.allowed[s].end());
    }
  }
  return mdp;
}

std::vector<std::size_t> ValueIterationResult::optimal_actions(std::size_t s, double tol) const {
  std::vector<std::size_t> out;
  if (greedy[s] < 0) return out;
  const double best = q[s][static_cast<std::size_t>(greedy[s])];
  for (std::size_t a = 0; a < q[s].size(); ++a)
    if (!std::isnan(q[s][a]) && q[s][a] >= best - tol) out.push_back(a);
  return out;
}

ValueIterationResult value_iteration(const ExplicitMdp& mdp, double gamma, double tol) {
  if (!(gamma >= 0.0 && gamma <= 1.0)) fail(ErrorKind::kConfig, "gamma must lie in [0, 1]");
  if (!(tol > 0.0)) fail(ErrorKind::kConfig, "tolerance must be positive");
  const std::size_t n = mdp.num_states();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ValueIterationResult r;
  r.v.assign(n, 0.0);
  r.q.assign(n, std::vector<double>(mdp.num_actions, nan));
  r.greedy.assign(n, -1);

  // Gauss-Seidel sweeps; with gamma = 1 convergence relies on the finite horizon.
  const int max_sweeps = 100000;
  for (r.sweeps = 1; r.sweeps <= max_sweeps; ++r.sweeps) {
    double residual = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      if (mdp.allowed[s].empty()) continue;
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a : mdp.allowed[s]) {
        double q = mdp.expected_reward[s][a];
        for (const auto& o : mdp.transitions[s][a])
          if (o.next != mdp.terminal()) q += gamma * o.probability * r.v[o.next];
        best = std::max(best, q);
      }
      residual = std::max(residual, std::abs(best - r.v[s]));
      r.v[s] = best;
    }
    r.residual = residual;
    if (residual < tol) break;
  }

  // Final Q from the converged values, plus a Bellman residual on them.
  double residual = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    if (mdp.allowed[s].empty()) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a : mdp.allowed[s]) {
      double q = mdp.expected_reward[s][a];
      for (const auto& o : mdp.transitions[s][a])
        if (o.next != mdp.terminal()) q += gamma * o.probability * r.v[o.next];
      r.q[s][a] = q;
      if (q > best) {
        best = q;
        r.greedy[s] = static_cast<int>(a);
      }
    }
    residual = std::max(residual, std::abs(best - r.v[s]));
  }
  r.residual = residual;
  return r;
}

std::vector<double> evaluate_policy(const ExplicitMdp& mdp, const TabularPolicy& policy,
                                    double gamma, RewardChannel channel, double tol) {
  const std::size_t n = mdp.num_states();
  if (policy.size() != n) fail(ErrorKind::kConfig, "policy has wrong number of states");
  const auto& reward = channel == RewardChannel::kReturn ? mdp.expected_reward : mdp.expected_conversion;
  std::vector<double> v(n, 0.0);
  for (int sweep = 0; sweep < 100000; ++sweep) {
    double residual = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      double value = 0.0;
      for (std::size_t a : mdp.allowed[s]) {
        const double p = policy[s][a];
        if (p == 0.0) continue;
        double q = reward[s][a];
        for (const auto& o : mdp.transitions[s][a])
          if (o.next != mdp.terminal()) q += gamma * o.probability * v[o.next];
        value += p * q;
      }
      residual = std::max(residual, std::abs(value - v[s]));
      v[s] = value;
    }
    if (residual < tol) break;
  }
  return v;
}

TabularPolicy uniform_policy(const ExplicitMdp& mdp) {
  TabularPolicy pi(mdp.num_states(), std::vector<double>(mdp.num_actions, 0.0));
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    for (std::size_t a : mdp.allowed[s]) pi[s][a] = 1.0 / static_cast<double>(mdp.allowed[s].size());
  return pi;
}

TabularPolicy greedy_policy(const ExplicitMdp& mdp, const ValueIterationResult& vi) {
  TabularPolicy pi(mdp.num_states(), std::vector<double>(mdp.num_actions, 0.0));
  for (std::size_t s = 0; s < mdp.num_states(); ++s)
    if (vi.greedy[s] >= 0) pi[s][static_cast<std::size_t>(vi.greedy[s])] = 1.0;
  return pi;
}

std::vector<std::size_t> reachable_states(const ExplicitMdp& mdp) {
  std::vector<bool> seen(mdp.num_states(), false);
  std::deque<std::size_t> frontier{mdp.start};
  seen[mdp.start] = true;
  while (!frontier.empty()) {
    const auto s = frontier.front();
    frontier.pop_front();
    for (std::size_t a : mdp.allowed[s])
      for (const auto& o : mdp.transitions[s][a])
        if (o.probability > 0.0 && !seen[o.next]) {
          seen[o.next] = true;
          frontier.push_back(o.next);
        }
  }
  std::vector<std::size_t> out;
  for (std::size_t s = 0; s + 1 < mdp.num_states(); ++s)
    if (seen[s]) out.push_back(s);
  return out;
}

std::size_t mdp_state_of(const ExplicitMdp& mdp, const DialogueState& state) {
  if (state.phase_key == kTerminalPhase || state.turn >= mdp.max_turns) return mdp.terminal();
  return mdp.state_index(mdp.phase_index(state.phase_key), state.turn);
}

OraclePolicy::OraclePolicy(const Scenario& scenario, const ActionFilter& filter, double gamma) {
  for (const auto& seg : scenario.spec().segments) {
    auto mdp = enumerate_mdp(scenario, seg.id, filter);
    auto vi = value_iteration(mdp, gamma);
    solved_.emplace(seg.id, std::make_pair(std::move(mdp), std::move(vi)));
  }
}

std::size_t OraclePolicy::act(const DialogueState& state, std::span<const std::size_t> allowed) const {
  const auto& [mdp, vi] = solved_.at(state.segment_id);
  const int a = vi.greedy[mdp_state_of(mdp, state)];
  if (a < 0 || std::find(allowed.begin(), allowed.end(), static_cast<std::size_t>(a)) == allowed.end())
    fail(ErrorKind::kEligibility, "oracle action is not allowed in this state");
  return static_cast<std::size_t>(a);
}

}  // namespace talktrack
