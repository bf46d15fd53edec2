#include "talktrack/mlp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "talktrack/error.hpp"
#include "talktrack/rng.hpp"

namespace talktrack {

Mlp::Mlp(std::vector<int> layer_dims) : dims_(std::move(layer_dims)) {
  if (dims_.size() < 2) fail(ErrorKind::kConfig, "an MLP needs at least input and output dims");
  std::size_t total = 0;
  for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
    if (dims_[l] < 1 || dims_[l + 1] < 1) fail(ErrorKind::kConfig, "layer dims must be positive");
    offsets_.push_back(total);
    total += static_cast<std::size_t>(dims_[l] + 1) * static_cast<std::size_t>(dims_[l + 1]);
  }
  params_.assign(total, 0.0);
}

Mlp Mlp::random(std::vector<int> layer_dims, std::uint64_t seed) {
  Mlp net(std::move(layer_dims));
  Rng rng(seed);
  for (std::size_t l = 0; l < net.num_layers(); ++l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(net.dims_[l]));
    const std::size_t n = static_cast<std::size_t>(net.dims_[l] + 1) * static_cast<std::size_t>(net.dims_[l + 1]);
    for (std::size_t i = 0; i < n; ++i) net.params_[net.offsets_[l] + i] = rng.uniform(-bound, bound);
  }
  return net;
}

std::size_t Mlp::bias_offset(std::size_t layer) const {
  return offsets_[layer] + static_cast<std::size_t>(dims_[layer]) * static_cast<std::size_t>(dims_[layer + 1]);
}

std::vector<double> Mlp::forward(std::span<const double> x) const {
  Cache cache;
  return forward(x, cache);
}

std::vector<double> Mlp::forward(std::span<const double> x, Cache& cache) const {
  if (x.size() != input_dim())
    fail(ErrorKind::kConfig, "input has dimension " + std::to_string(x.size()) + ", network expects " +
                                 std::to_string(input_dim()));
  cache.activations.resize(dims_.size());
  cache.activations[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < num_layers(); ++l) {
    const auto in = static_cast<std::size_t>(dims_[l]);
    const auto out = static_cast<std::size_t>(dims_[l + 1]);
    const double* w = params_.data() + offsets_[l];
    const double* b = params_.data() + bias_offset(l);
    const auto& a = cache.activations[l];
    auto& z = cache.activations[l + 1];
    z.resize(out);
    const bool hidden = l + 1 < num_layers();
    for (std::size_t o = 0; o < out; ++o) {
      double acc = b[o];
      const double* row = w + o * in;
      for (std::size_t i = 0; i < in; ++i) acc += row[i] * a[i];
      z[o] = hidden ? std::tanh(acc) : acc;
    }
  }
  return cache.activations.back();
}

void Mlp::backward(const Cache& cache, std::span<const double> output_grad,
                   std::span<double> grad) const {
  if (cache.activations.size() != dims_.size() || cache.activations.back().size() != output_dim())
    fail(ErrorKind::kConfig, "cache does not come from this network");
  if (output_grad.size() != output_dim()) fail(ErrorKind::kConfig, "output gradient has wrong size");
  if (grad.size() != params_.size()) fail(ErrorKind::kConfig, "gradient buffer has wrong size");

  std::vector<double> delta(output_grad.begin(), output_grad.end());
  std::vector<double> prev;
  for (std::size_t l = num_layers(); l-- > 0;) {
    const auto in = static_cast<std::size_t>(dims_[l]);
    const auto out = static_cast<std::size_t>(dims_[l + 1]);
    const double* w = params_.data() + offsets_[l];
    double* gw = grad.data() + offsets_[l];
    double* gb = grad.data() + bias_offset(l);
    const auto& a = cache.activations[l];
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      gb[o] += d;
      if (d == 0.0) continue;
      double* grow = gw + o * in;
      for (std::size_t i = 0; i < in; ++i) grow[i] += d * a[i];
    }
    if (l == 0) break;
    // Propagate through W and the tanh of layer l.
    prev.assign(in, 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double d = delta[o];
      if (d == 0.0) continue;
      const double* row = w + o * in;
      for (std::size_t i = 0; i < in; ++i) prev[i] += row[i] * d;
    }
    for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - a[i] * a[i];
    delta.swap(prev);
  }
}

nlohmann::json Mlp::to_json() const {
  return {{"layer_dims", dims_}, {"activation", "tanh"}, {"parameters", params_}};
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  try {
    Mlp net(j.at("layer_dims").get<std::vector<int>>());
    auto params = j.at("parameters").get<std::vector<double>>();
    if (params.size() != net.params_.size())
      fail(ErrorKind::kData, "parameter count does not match layer_dims");
    for (double p : params)
      if (!std::isfinite(p)) fail(ErrorKind::kData, "non-finite network parameter");
    net.params_ = std::move(params);
    return net;
  } catch (const nlohmann::json::exception& ex) {
    fail(ErrorKind::kData, std::string("network: ") + ex.what());
  }
}

Optimizer::Optimizer(OptimizerConfig cfg, std::size_t num_parameters) : cfg_(cfg) {
  if (!(cfg_.learning_rate > 0.0)) fail(ErrorKind::kConfig, "learning rate must be positive");
  if (cfg_.kind == OptimizerKind::kAdam) {
    m_.assign(num_parameters, 0.0);
    v_.assign(num_parameters, 0.0);
  }
}

void Optimizer::step(Mlp& net, std::span<const double> grad) {
  auto& w = net.parameters();
  if (grad.size() != w.size()) fail(ErrorKind::kConfig, "gradient does not match network");
  for (double g : grad)
    if (!std::isfinite(g)) fail(ErrorKind::kDivergence, "non-finite gradient");
  ++t_;
  if (cfg_.kind == OptimizerKind::kSgd) {
    for (std::size_t i = 0; i < w.size(); ++i) w[i] -= cfg_.learning_rate * grad[i];
    return;
  }
  if (m_.size() != w.size()) fail(ErrorKind::kConfig, "optimizer state does not match network");
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < w.size(); ++i) {
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
    const double m_hat = m_[i] / c1;
    const double v_hat = v_[i] / c2;
    w[i] -= cfg_.learning_rate * m_hat / (std::sqrt(v_hat) + cfg_.epsilon);
  }
}

double log_sum_exp(std::span<const double> logits, std::span<const std::size_t> allowed) {
  double hi = -std::numeric_limits<double>::infinity();
  for (auto a : allowed) hi = std::max(hi, logits[a]);
  double sum = 0.0;
  for (auto a : allowed) sum += std::exp(logits[a] - hi);
  return hi + std::log(sum);
}

std::vector<double> masked_softmax(std::span<const double> logits,
                                   std::span<const std::size_t> allowed) {
  std::vector<double> p(logits.size(), 0.0);
  const double lse = log_sum_exp(logits, allowed);
  for (auto a : allowed) p[a] = std::exp(logits[a] - lse);
  return p;
}

}  // namespace talktrack
