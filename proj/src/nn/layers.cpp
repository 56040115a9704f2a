#include "ets/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace ets::nn {
namespace {

template <class T>
const T& cached(const std::optional<T>& slot, const char* layer) {
  if (!slot) throw std::logic_error(std::string(layer) + ": backward called without a cached forward pass");
  return *slot;
}

Tensor* grad_target(Parameter& p) { return p.frozen ? nullptr : &p.grad; }

}  // namespace

std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

void Layer::set_frozen(bool frozen) {
  visit_parameters("", [frozen](const std::string&, Parameter& p) {
    p.frozen = frozen;
    if (frozen) p.zero_grad();
  });
}

bool Layer::fully_frozen() {
  bool all = true;
  visit_parameters("", [&all](const std::string&, Parameter& p) { all = all && p.frozen; });
  return all;
}

std::size_t Layer::parameter_count() {
  std::size_t n = 0;
  visit_parameters("", [&n](const std::string&, Parameter& p) { n += p.value.size(); });
  return n;
}

void Layer::zero_grad() {
  visit_parameters("", [](const std::string&, Parameter& p) { p.zero_grad(); });
}

void kaiming_uniform(Tensor& weights, std::size_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& w : weights.values()) w = (2.0 * uniform01(rng) - 1.0) * bound;
}

// ---------------------------------------------------------------- Conv1d

Conv1d::Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride)
    : weight_(Tensor({out_channels, in_channels, kernel})),
      bias_(Tensor({out_channels})),
      kernel_(kernel),
      stride_(stride) {
  if (in_channels == 0 || out_channels == 0) throw ShapeError("conv1d: channel counts must be positive");
  if (kernel == 0) throw ShapeError("conv1d: kernel size must be >= 1");
  if (stride == 0) throw ShapeError("conv1d: stride must be >= 1");
}

Conv1d::Conv1d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv1dGeometry geometry)
    : Conv1d(in_channels, out_channels, kernel, geometry.stride) {
  fixed_geometry_ = geometry;
}

Conv1dGeometry Conv1d::geometry_for(std::size_t length) const {
  return fixed_geometry_ ? *fixed_geometry_ : Conv1dGeometry::same(length, kernel_, stride_);
}

std::size_t Conv1d::output_length(std::size_t length) const {
  return geometry_for(length).output_length(length, kernel_);
}

Tensor Conv1d::forward(const Tensor& input, const ForwardContext&) {
  expect_finite(input, "conv1d input");
  const std::size_t length = input.shape().back();
  Tensor out = conv1d_forward(input, weight_.value, bias_.value.values(), geometry_for(length));
  expect_finite(out, "conv1d output");
  input_ = input;
  return out;
}

Tensor Conv1d::backward(const Tensor& grad_output) {
  const Tensor& input = cached(input_, "conv1d");
  return conv1d_backward(input, weight_.value, grad_output, geometry_for(input.shape().back()),
                         grad_target(weight_), grad_target(bias_));
}

void Conv1d::visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
  visit(join_name(prefix, "weight"), weight_);
  visit(join_name(prefix, "bias"), bias_);
}

void Conv1d::initialize(Rng& rng) {
  kaiming_uniform(weight_.value, weight_.value.dim(1) * kernel_, rng);
  bias_.value.fill(0.0);
}

// ---------------------------------------------------------------- BatchNorm1d

BatchNorm1d::BatchNorm1d(std::size_t channels, double momentum, double eps)
    : gamma_(Tensor({channels}, 1.0)),
      beta_(Tensor({channels})),
      stats_{Tensor({channels}, 0.0), Tensor({channels}, 1.0)},
      momentum_(momentum),
      eps_(eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("batch_norm1d: eps must be > 0");
  if (!(momentum >= 0.0 && momentum <= 1.0)) throw std::invalid_argument("batch_norm1d: momentum outside [0, 1]");
}

Tensor BatchNorm1d::forward(const Tensor& input, const ForwardContext& ctx) {
  BatchNormCache cache;
  Tensor out = batch_norm1d_forward(input, gamma_.value, beta_.value, eps_, ctx.mode, momentum_, stats_, &cache);
  expect_finite(out, "batch_norm1d output");
  cache_ = std::move(cache);
  return out;
}

Tensor BatchNorm1d::backward(const Tensor& grad_output) {
  return batch_norm1d_backward(grad_output, gamma_.value, cached(cache_, "batch_norm1d"), grad_target(gamma_),
                               grad_target(beta_));
}

void BatchNorm1d::visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
  visit(join_name(prefix, "gamma"), gamma_);
  visit(join_name(prefix, "beta"), beta_);
}

void BatchNorm1d::visit_buffers(const std::string& prefix, const BufferVisitor& visit) {
  visit(join_name(prefix, "running_mean"), stats_.running_mean);
  visit(join_name(prefix, "running_var"), stats_.running_var);
}

// ---------------------------------------------------------------- pointwise

Tensor Relu::forward(const Tensor& input, const ForwardContext&) {
  input_ = input;
  return relu_forward(input);
}

Tensor Relu::backward(const Tensor& grad_output) { return relu_backward(cached(input_, "relu"), grad_output); }

Tensor Sigmoid::forward(const Tensor& input, const ForwardContext&) {
  Tensor out = sigmoid_forward(input);
  output_ = out;
  return out;
}

Tensor Sigmoid::backward(const Tensor& grad_output) {
  return sigmoid_backward(cached(output_, "sigmoid"), grad_output);
}

Dropout::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
}

Tensor Dropout::forward(const Tensor& input, const ForwardContext& ctx) {
  Tensor mask;
  Tensor out = dropout_forward(input, rate_, ctx.mode, ctx.rng, &mask);
  mask_ = std::move(mask);
  return out;
}

Tensor Dropout::backward(const Tensor& grad_output) {
  const Tensor& mask = cached(mask_, "dropout");
  expect_shape(grad_output, mask.shape(), "dropout backward");
  Tensor out(mask.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = grad_output[i] * mask[i];
  return out;
}

// ---------------------------------------------------------------- Dense

Dense::Dense(std::size_t in_features, std::size_t out_features)
    : weight_(Tensor({out_features, in_features})), bias_(Tensor({out_features})) {
  if (in_features == 0 || out_features == 0) throw ShapeError("dense: feature counts must be positive");
}

Tensor Dense::forward(const Tensor& input, const ForwardContext&) {
  expect_finite(input, "dense input");
  Tensor out = dense_forward(input, weight_.value, bias_.value.values());
  expect_finite(out, "dense output");
  input_ = input;
  return out;
}

Tensor Dense::backward(const Tensor& grad_output) {
  return dense_backward(cached(input_, "dense"), weight_.value, grad_output, grad_target(weight_),
                        grad_target(bias_));
}

void Dense::visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
  visit(join_name(prefix, "weight"), weight_);
  visit(join_name(prefix, "bias"), bias_);
}

void Dense::initialize(Rng& rng) {
  kaiming_uniform(weight_.value, in_features(), rng);
  bias_.value.fill(0.0);
}

// ---------------------------------------------------------------- pooling

Tensor GlobalAvgPool::forward(const Tensor& input, const ForwardContext&) {
  Tensor out = global_avg_pool_forward(input);
  input_shape_ = input.shape();
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_output) {
  return global_avg_pool_backward(cached(input_shape_, "global_avg_pool"), grad_output);
}

// ---------------------------------------------------------------- ResidualBlock

ResidualBlock::ResidualBlock(std::size_t in_channels, std::size_t out_channels, std::size_t kernel,
                             std::size_t stride, double dropout_rate)
    : conv1_(in_channels, out_channels, kernel, stride),
      bn1_(out_channels),
      drop1_(dropout_rate),
      conv2_(out_channels, out_channels, kernel, 1),
      bn2_(out_channels),
      drop_out_(dropout_rate) {
  if (in_channels != out_channels || stride != 1) {
    skip_ = std::make_unique<Conv1d>(in_channels, out_channels, 1, Conv1dGeometry{stride, 0, 0});
  }
}

Tensor ResidualBlock::forward(const Tensor& input, const ForwardContext& ctx) {
  Tensor main = conv1_.forward(input, ctx);
  main = bn1_.forward(main, ctx);
  main = relu1_.forward(main, ctx);
  main = drop1_.forward(main, ctx);
  main = conv2_.forward(main, ctx);
  main = bn2_.forward(main, ctx);
  Tensor skip = skip_ ? skip_->forward(input, ctx) : input;
  if (skip.shape() != main.shape()) {
    throw ShapeError("residual_block: skip path " + shape_to_string(skip.shape()) + " vs main path " +
                     shape_to_string(main.shape()));
  }
  for (std::size_t i = 0; i < main.size(); ++i) main[i] += skip[i];
  main = relu_out_.forward(main, ctx);
  return drop_out_.forward(main, ctx);
}

Tensor ResidualBlock::backward(const Tensor& grad_output) {
  Tensor g_sum = relu_out_.backward(drop_out_.backward(grad_output));
  Tensor g = bn2_.backward(g_sum);
  g = conv2_.backward(g);
  g = drop1_.backward(g);
  g = relu1_.backward(g);
  g = bn1_.backward(g);
  Tensor grad_input = conv1_.backward(g);
  const Tensor g_skip = skip_ ? skip_->backward(g_sum) : g_sum;
  for (std::size_t i = 0; i < grad_input.size(); ++i) grad_input[i] += g_skip[i];
  return grad_input;
}

void ResidualBlock::visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
  conv1_.visit_parameters(join_name(prefix, "conv1"), visit);
  bn1_.visit_parameters(join_name(prefix, "bn1"), visit);
  conv2_.visit_parameters(join_name(prefix, "conv2"), visit);
  bn2_.visit_parameters(join_name(prefix, "bn2"), visit);
  if (skip_) skip_->visit_parameters(join_name(prefix, "skip"), visit);
}

void ResidualBlock::visit_buffers(const std::string& prefix, const BufferVisitor& visit) {
  bn1_.visit_buffers(join_name(prefix, "bn1"), visit);
  bn2_.visit_buffers(join_name(prefix, "bn2"), visit);
}

void ResidualBlock::initialize(Rng& rng) {
  conv1_.initialize(rng);
  conv2_.initialize(rng);
  if (skip_) skip_->initialize(rng);
}

// ---------------------------------------------------------------- Sequential

Tensor Sequential::forward(const Tensor& input, const ForwardContext& ctx) {
  Tensor x = input;
  for (auto& layer : layers_) x = layer->forward(x, ctx);
  return x;
}

Tensor Sequential::backward(const Tensor& grad_output) {
  Tensor g = grad_output;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

void Sequential::visit_parameters(const std::string& prefix, const ParameterVisitor& visit) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->visit_parameters(join_name(prefix, std::to_string(i)), visit);
}

void Sequential::visit_buffers(const std::string& prefix, const BufferVisitor& visit) {
  for (std::size_t i = 0; i < layers_.size(); ++i) layers_[i]->visit_buffers(join_name(prefix, std::to_string(i)), visit);
}

void Sequential::initialize(Rng& rng) {
  for (auto& layer : layers_) layer->initialize(rng);
}

}  // namespace ets::nn
