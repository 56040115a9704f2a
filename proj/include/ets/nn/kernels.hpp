#pragma once

// Stateless forward/backward kernels for the layer set. Inputs are batched
// ([N, C, L] for sequences, [N, D] for vectors); the layer classes in
// layers.hpp own parameters and caches and delegate the arithmetic here.

#include <cstddef>
#include <span>

#include "ets/rng.hpp"
#include "ets/tensor.hpp"

namespace ets::nn {

struct Conv1dGeometry {
  std::size_t stride = 1;
  std::size_t pad_left = 0;
  std::size_t pad_right = 0;

  static Conv1dGeometry symmetric(std::size_t stride, std::size_t padding) {
    return {stride, padding, padding};
  }
  /// Padding that yields ceil(L / stride) outputs for any kernel size.
  static Conv1dGeometry same(std::size_t length, std::size_t kernel, std::size_t stride);

  std::size_t output_length(std::size_t length, std::size_t kernel) const;
};

/// Cross-correlation. input [N, C_in, L] (or [C_in, L]), weights [C_out, C_in, K].
Tensor conv1d_forward(const Tensor& input, const Tensor& weights, std::span<const double> bias,
                      const Conv1dGeometry& geom);

/// Accumulates into grad_weights / grad_bias when they are non-null; returns
/// the gradient with respect to `input`.
Tensor conv1d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                       const Conv1dGeometry& geom, Tensor* grad_weights, Tensor* grad_bias);

/// input [N, D_in] (or [D_in]), weights [D_out, D_in].
Tensor dense_forward(const Tensor& input, const Tensor& weights, std::span<const double> bias);
Tensor dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                      Tensor* grad_weights, Tensor* grad_bias);

enum class Mode { train, eval };

struct BatchNormStats {
  Tensor running_mean;  // [C]
  Tensor running_var;   // [C]
};

/// Per-forward intermediate values needed by the backward pass.
struct BatchNormCache {
  Mode mode = Mode::eval;
  Tensor normalized;  // x_hat, same shape as input
  Tensor inv_std;     // [C]
};

/// input [N, C, L] or [N, C]. Train mode normalizes with batch statistics over
/// (N, L) and updates `stats` with `momentum`; eval mode uses `stats`.
Tensor batch_norm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps,
                            Mode mode, double momentum, BatchNormStats& stats, BatchNormCache* cache);
Tensor batch_norm1d_backward(const Tensor& grad_output, const Tensor& gamma, const BatchNormCache& cache,
                             Tensor* grad_gamma, Tensor* grad_beta);

Tensor relu_forward(const Tensor& input);
Tensor relu_backward(const Tensor& input, const Tensor& grad_output);

Tensor sigmoid_forward(const Tensor& input);
Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output);

/// Inverted dropout. Writes the applied scale (0 or 1/(1-rate)) per element
/// into `mask` so the backward pass can replay it.
Tensor dropout_forward(const Tensor& input, double rate, Mode mode, Rng* rng, Tensor* mask);

/// [N, C, L] -> [N, C]
Tensor global_avg_pool_forward(const Tensor& input);
Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output);

}  // namespace ets::nn
