#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

namespace talktrack {

// Fully connected network: tanh hidden layers, linear output head. All
// parameters live in one flat buffer, layer by layer, each layer storing its
// row-major weight matrix (out x in) followed by its bias.
class Mlp {
 public:
  struct Cache {
    // activations[0] is the input, activations.back() the output.
    std::vector<std::vector<double>> activations;
  };

  Mlp() = default;
  // Zero-initialized.
  explicit Mlp(std::vector<int> layer_dims);
  // Weights and biases uniform in +-1/sqrt(fan_in).
  static Mlp random(std::vector<int> layer_dims, std::uint64_t seed);

  const std::vector<int>& layer_dims() const { return dims_; }
  std::size_t input_dim() const { return static_cast<std::size_t>(dims_.front()); }
  std::size_t output_dim() const { return static_cast<std::size_t>(dims_.back()); }
  std::size_t num_layers() const { return dims_.size() - 1; }
  std::size_t num_parameters() const { return params_.size(); }

  std::vector<double>& parameters() { return params_; }
  const std::vector<double>& parameters() const { return params_; }
  std::size_t weight_offset(std::size_t layer) const { return offsets_[layer]; }
  std::size_t bias_offset(std::size_t layer) const;

  std::vector<double> forward(std::span<const double> x) const;
  std::vector<double> forward(std::span<const double> x, Cache& cache) const;

  // Adds d(loss)/d(parameters) to `grad` given d(loss)/d(output).
  void backward(const Cache& cache, std::span<const double> output_grad,
                std::span<double> grad) const;

  nlohmann::json to_json() const;
  static Mlp from_json(const nlohmann::json& j);

  bool operator==(const Mlp&) const = default;

 private:
  std::vector<int> dims_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

enum class OptimizerKind { kSgd, kAdam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::kAdam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

// Minimizes: parameters move against the gradient.
class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig cfg, std::size_t num_parameters);

  // Throws ErrorKind::kDivergence on non-finite gradients.
  void step(Mlp& net, std::span<const double> grad);

  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t steps() const { return t_; }

 private:
  OptimizerConfig cfg_;
  std::vector<double> m_;
  std::vector<double> v_;
  std::int64_t t_ = 0;
};

// Helpers shared by the policy heads.
double log_sum_exp(std::span<const double> logits, std::span<const std::size_t> allowed);
// Softmax restricted to `allowed`; every other entry is exactly zero.
std::vector<double> masked_softmax(std::span<const double> logits,
                                   std::span<const std::size_t> allowed);

}  // namespace talktrack
