#include <gtest/gtest.h>

#include <cmath>

#include "talktrack/dqn.hpp"
#include "talktrack/error.hpp"
#include "talktrack/mdp.hpp"
#include "test_support.hpp"

using namespace talktrack;
using namespace talktrack::testing;

namespace {

// Independent forward pass over the documented parameter layout.
std::vector<double> reference_forward(const Mlp& net, std::vector<double> x) {
  const auto& dims = net.layer_dims();
  const auto& p = net.parameters();
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int in = dims[l], out = dims[l + 1];
    std::vector<double> y(static_cast<std::size_t>(out));
    for (int o = 0; o < out; ++o) {
      double z = p[off + static_cast<std::size_t>(in * out + o)];
      for (int i = 0; i < in; ++i) z += p[off + static_cast<std::size_t>(o * in + i)] * x[static_cast<std::size_t>(i)];
      y[static_cast<std::size_t>(o)] = l + 2 < dims.size() ? std::tanh(z) : z;
    }
    off += static_cast<std::size_t>(in * out + out);
    x = std::move(y);
  }
  return x;
}

std::vector<Transition> random_transitions(Rng& rng, std::size_t n, std::size_t dim, std::size_t actions) {
  std::vector<Transition> out;
  for (std::size_t i = 0; i < n; ++i) {
    Transition t;
    for (std::size_t d = 0; d < dim; ++d) {
      t.state_enc.push_back(rng.uniform(-1, 1));
      t.next_state_enc.push_back(rng.uniform(-1, 1));
    }
    t.action = rng.uniform_index(actions);
    t.reward = rng.uniform(-1, 1);
    t.done = rng.bernoulli(0.3);
    if (!t.done)
      for (std::size_t a = 0; a < actions; ++a)
        if (a == 0 || rng.bernoulli(0.5)) t.allowed_next.push_back(a);
    out.push_back(t);
  }
  return out;
}

std::vector<const Transition*> pointers(const std::vector<Transition>& ts) {
  std::vector<const Transition*> out;
  for (const auto& t : ts) out.push_back(&t);
  return out;
}

}  // namespace

TEST(Dqn, SelectActionGreedyConsumesNoRandomness) {
  auto net = Mlp::random({4, 5, 3}, 1);
  const std::vector<double> x = {0.1, 0.2, -0.3, 1.0};
  Rng rng(2);
  const std::vector<std::size_t> allowed = {0, 2};
  const auto q = reference_forward(net, x);
  const std::size_t expect = q[2] > q[0] ? 2 : 0;
  for (int i = 0; i < 10; ++i) EXPECT_EQ(select_action(net, x, 0.0, allowed, rng), expect);
  EXPECT_EQ(rng.draws(), 0u);
}

TEST(Dqn, SelectActionExploresOnlyAllowed) {
  auto net = Mlp::random({2, 3}, 1);
  const std::vector<double> x = {0.0, 0.0};
  Rng rng(3);
  const std::vector<std::size_t> allowed = {1, 2};
  int counts[3] = {0, 0, 0};
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++counts[select_action(net, x, 1.0, allowed, rng)];
  EXPECT_EQ(counts[0], 0);
  EXPECT_NEAR(counts[1], n / 2, 4 * std::sqrt(n * 0.25));
}

TEST(Dqn, TdTargetsAndLossMatchReference) {
  Rng rng(11);
  const auto ts = random_transitions(rng, 40, 6, 4);
  const auto batch = pointers(ts);
  const auto q = Mlp::random({6, 8, 4}, 5);
  const auto target = Mlp::random({6, 8, 4}, 6);
  const double gamma = 0.9;
  const auto y = td_targets(batch, target, gamma);
  double loss = 0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    double expect = ts[i].reward;
    if (!ts[i].done) {
      const auto qn = reference_forward(target, ts[i].next_state_enc);
      double best = -1e300;
      for (auto a : ts[i].allowed_next) best = std::max(best, qn[a]);
      expect += gamma * best;
    }
    EXPECT_NEAR(y[i], expect, 1e-12);
    const double err = reference_forward(q, ts[i].state_enc)[ts[i].action] - expect;
    loss += err * err / static_cast<double>(ts.size());
  }
  EXPECT_NEAR(td_loss(q, target, batch, gamma), loss, 1e-12);
}

TEST(Dqn, TrainOnBatchGradientMatchesFiniteDifferences) {
  Rng rng(12);
  const auto ts = random_transitions(rng, 16, 5, 3);
  const auto batch = pointers(ts);
  auto q = Mlp::random({5, 6, 3}, 7);
  const auto target = Mlp::random({5, 6, 3}, 8);
  // With plain SGD at lr 1, the parameter change equals minus the gradient.
  Mlp stepped = q;
  Optimizer sgd({OptimizerKind::kSgd, 1.0}, q.num_parameters());
  const double loss = train_on_batch(stepped, target, batch, 0.95, sgd);
  EXPECT_NEAR(loss, td_loss(q, target, batch, 0.95), 1e-12);
  const double h = 1e-5;
  for (std::size_t i = 0; i < q.num_parameters(); ++i) {
    const double grad = q.parameters()[i] - stepped.parameters()[i];
    const double keep = q.parameters()[i];
    q.parameters()[i] = keep + h;
    const double up = td_loss(q, target, batch, 0.95);
    q.parameters()[i] = keep - h;
    const double down = td_loss(q, target, batch, 0.95);
    q.parameters()[i] = keep;
    const double fd = (up - down) / (2 * h);
    EXPECT_LT(std::abs(fd - grad) / std::max(1e-6, std::abs(fd) + std::abs(grad)), 1e-4) << i;
  }
}

TEST(Dqn, TrainStepRequiresWarmup) {
  ReplayBuffer buf(100);
  Rng rng(1);
  for (const auto& t : random_transitions(rng, 5, 3, 2)) buf.push(t);
  auto q = Mlp::random({3, 2}, 1);
  Optimizer opt({}, q.num_parameters());
  DqnConfig cfg;
  cfg.batch_size = 8;
  EXPECT_THROW(train_step(q, q, buf, cfg, opt, rng), Error);
}

TEST(Dqn, ConfigValidation) {
  DqnConfig cfg;
  cfg.gamma = 1.5;
  EXPECT_THROW(cfg.validate(), Error);
  cfg = {};
  cfg.buffer_capacity = 4;
  EXPECT_THROW(cfg.validate(), Error);
}

TEST(Dqn, LearnsSinglePhaseChoice) {
  // One turn: `go` converts with probability 0.8, `wait` pays nothing.
  const auto world = single_phase({{"ok", 1.0}}, 0.8, 0.0, 1);
  Environment env(world, FeedbackMode::kSampled, 4);
  ComplianceGate gate(go_wait_catalog(), RuleSet());
  DqnConfig cfg;
  cfg.num_episodes = 600;
  cfg.epsilon_decay = 0.99;
  cfg.hidden = {16};
  cfg.batch_size = 16;
  cfg.target_update_period = 50;
  const EncoderConfig enc{16, 1};
  const auto r = run_dqn(env, gate, enc, cfg, 9);
  NetworkPolicy pi(r.artifact);
  const std::vector<std::size_t> both = {0, 1};
  EXPECT_EQ(pi.act(world->reset("s"), both), 0u);
  EXPECT_EQ(gate.violations(), 0u);
  EXPECT_EQ(gate.screened(), r.env_steps);
  EXPECT_EQ(r.metrics.size(), r.episodes);
}

TEST(Dqn, OnlineTrainingIsSeedDeterministicAndCompliant) {
  const auto world = toyshop();
  auto run = [&](std::uint64_t seed) {
    Environment env(world, FeedbackMode::kSampled, 100);
    ComplianceGate gate(toyshop_catalog(), toyshop_rules());
    DqnConfig cfg;
    cfg.num_episodes = 150;
    cfg.hidden = {16};
    auto r = run_dqn(env, gate, EncoderConfig{32, 1}, cfg, seed);
    EXPECT_EQ(gate.violations(), 0u);
    return r.artifact.digest();
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(Dqn, OfflineTrainingNeedsData) {
  EXPECT_THROW(run_dqn_offline({}, toyshop_catalog(), EncoderConfig{32, 1}, DqnConfig{}, 1), Error);
}
