#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ets/nn/kernels.hpp"
#include "ets/rng.hpp"
#include "ets/tensor.hpp"

namespace ets::nn {

/// A trainable tensor with its gradient accumulator. A frozen parameter never
/// accumulates gradient, so its grad stays zero after every backward pass.
struct Parameter {
  Tensor value;
  Tensor grad;
  bool frozen = false;

  Parameter() = default;
  explicit Parameter(Tensor v) : value(std::move(v)), grad(value.shape()) {}

  void zero_grad() { grad.fill(0.0); }
};

struct ForwardContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;  // required for dropout in train mode
};

using ParameterVisitor = std::function<void(const std::string& name, Parameter&)>;
using BufferVisitor = std::function<void(const std::string& name, Tensor&)>;

class Layer {
 public:
  virtual ~Layer() = default;

  /// Caches whatever the backward pass needs.
  virtual Tensor forward(const Tensor& input, const ForwardContext& ctx) = 0;
  /// Accumulates parameter gradients (skipping frozen ones) and returns the
  /// gradient with respect to the last forward input. Throws std::logic_error
  /// when no forward pass has been cached.
  virtual Tensor backward(const Tensor& grad_output) = 0;

  virtual std::string kind() const = 0;
  virtual void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
    (void)prefix;
    (void)visit;
  }
  /// Non-trainable state that must be checkpointed (batch-norm running stats).
  virtual void visit_buffers(const std::string& prefix, const BufferVisitor& visit) {
    (void)prefix;
    (void)visit;
  }
  virtual void initialize(Rng& rng) { (void)rng; }

  void set_frozen(bool frozen);
  bool fully_frozen();
  std::size_t parameter_count();
  void zero_grad();
};

/// Kaiming-uniform with fan-in scaling: U(-sqrt(6 / fan_in), sqrt(6 / fan_in)).
void kaiming_uniform(Tensor& weights, std::size_t fan_in, Rng& rng);

class Conv1d final : public Layer {
 public:
  /// Padding defaults to "same" behaviour: ceil(L / stride) outputs.
  Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride = 1);
  Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv1dGeometry geometry);

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "conv1d"; }
  void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) override;
  void initialize(Rng& rng) override;

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  std::size_t stride() const { return stride_; }
  std::size_t output_length(std::size_t length) const;

 private:
  Conv1dGeometry geometry_for(std::size_t length) const;

  Parameter weight_;
  Parameter bias_;
  std::size_t kernel_;
  std::size_t stride_;
  std::optional<Conv1dGeometry> fixed_geometry_;
  std::optional<Tensor> input_;
};

class BatchNorm1d final : public Layer {
 public:
  explicit BatchNorm1d(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "batch_norm1d"; }
  void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) override;
  void visit_buffers(const std::string& prefix, const BufferVisitor& visit) override;

  Parameter& gamma() { return gamma_; }
  Parameter& beta() { return beta_; }
  BatchNormStats& stats() { return stats_; }

 private:
  Parameter gamma_;
  Parameter beta_;
  BatchNormStats stats_;
  double momentum_;
  double eps_;
  std::optional<BatchNormCache> cache_;
};

class Relu final : public Layer {
 public:
  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "relu"; }

 private:
  std::optional<Tensor> input_;
};

class Sigmoid final : public Layer {
 public:
  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "sigmoid"; }

 private:
  std::optional<Tensor> output_;
};

class Dropout final : public Layer {
 public:
  explicit Dropout(double rate);

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "dropout"; }
  double rate() const { return rate_; }

 private:
  double rate_;
  std::optional<Tensor> mask_;
};

class Dense final : public Layer {
 public:
  Dense(std::size_t in_features, std::size_t out_features);

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "dense"; }
  void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) override;
  void initialize(Rng& rng) override;

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  std::size_t in_features() const { return weight_.value.dim(1); }
  std::size_t out_features() const { return weight_.value.dim(0); }

 private:
  Parameter weight_;
  Parameter bias_;
  std::optional<Tensor> input_;
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "global_avg_pool"; }

 private:
  std::optional<Shape> input_shape_;
};

/// conv -> BN -> ReLU -> dropout -> conv -> BN on the main path, identity or a
/// strided 1x1 convolution on the skip path, then ReLU -> dropout after the sum.
class ResidualBlock final : public Layer {
 public:
  ResidualBlock(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                double dropout_rate);

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "residual_block"; }
  void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) override;
  void visit_buffers(const std::string& prefix, const BufferVisitor& visit) override;
  void initialize(Rng& rng) override;

  bool has_projection() const { return skip_ != nullptr; }
  Conv1d& conv1() { return conv1_; }
  Conv1d& conv2() { return conv2_; }
  BatchNorm1d& bn1() { return bn1_; }
  BatchNorm1d& bn2() { return bn2_; }
  std::size_t output_length(std::size_t length) const { return conv1_.output_length(length); }

 private:
  Conv1d conv1_;
  BatchNorm1d bn1_;
  Relu relu1_;
  Dropout drop1_;
  Conv1d conv2_;
  BatchNorm1d bn2_;
  std::unique_ptr<Conv1d> skip_;
  Relu relu_out_;
  Dropout drop_out_;
};

/// Ordered chain of owned layers, named "0", "1", ... in parameter paths.
class Sequential final : public Layer {
 public:
  Sequential() = default;

  template <class L, class... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }
  void push(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }

  Tensor forward(const Tensor& input, const ForwardContext& ctx) override;
  Tensor backward(const Tensor& grad_output) override;
  std::string kind() const override { return "sequential"; }
  void visit_parameters(const std::string& prefix, const ParameterVisitor& visit) override;
  void visit_buffers(const std::string& prefix, const BufferVisitor& visit) override;
  void initialize(Rng& rng) override;

  std::size_t size() const { return layers_.size(); }
  Layer& operator[](std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Joins a parameter path: join_name("a", "b") == "a.b"; empty prefix passes through.
std::string join_name(const std::string& prefix, const std::string& name);

}  // namespace ets::nn
