#include "ets/nn/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <string>

namespace ets::nn {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

struct SeqDims {
  std::size_t n, c, l;
  bool batched;
};

SeqDims sequence_dims(const Tensor& t, const char* what) {
  if (t.rank() == 3) return {t.dim(0), t.dim(1), t.dim(2), true};
  if (t.rank() == 2) return {1, t.dim(0), t.dim(1), false};
  throw ShapeError(std::string(what) + ": expected [N, C, L] or [C, L], got " + shape_to_string(t.shape()));
}

// cols[(c * K + k), j] = x[c, j * stride + k - pad_left], zero outside the signal.
void im2col(const double* x, std::size_t channels, std::size_t length, std::size_t kernel,
            const Conv1dGeometry& g, std::size_t out_len, double* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    const double* xc = x + c * length;
    for (std::size_t k = 0; k < kernel; ++k) {
      double* row = cols + (c * kernel + k) * out_len;
      for (std::size_t j = 0; j < out_len; ++j) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(j * g.stride + k) -
                                   static_cast<std::ptrdiff_t>(g.pad_left);
        row[j] = (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length)) ? xc[pos] : 0.0;
      }
    }
  }
}

void col2im_add(const double* cols, std::size_t channels, std::size_t length, std::size_t kernel,
                const Conv1dGeometry& g, std::size_t out_len, double* dx) {
  for (std::size_t c = 0; c < channels; ++c) {
    double* dxc = dx + c * length;
    for (std::size_t k = 0; k < kernel; ++k) {
      const double* row = cols + (c * kernel + k) * out_len;
      for (std::size_t j = 0; j < out_len; ++j) {
        const std::ptrdiff_t pos = static_cast<std::ptrdiff_t>(j * g.stride + k) -
                                   static_cast<std::ptrdiff_t>(g.pad_left);
        if (pos >= 0 && pos < static_cast<std::ptrdiff_t>(length)) dxc[pos] += row[j];
      }
    }
  }
}

void check_conv_weights(const Tensor& weights, std::size_t in_channels) {
  if (weights.rank() != 3) {
    throw ShapeError("conv1d: weights must be [C_out, C_in, K], got " + shape_to_string(weights.shape()));
  }
  if (weights.dim(1) != in_channels) {
    throw ShapeError("conv1d: input has " + std::to_string(in_channels) + " channels but weights expect " +
                     std::to_string(weights.dim(1)));
  }
}

}  // namespace

Conv1dGeometry Conv1dGeometry::same(std::size_t length, std::size_t kernel, std::size_t stride) {
  const std::size_t out = (length + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + kernel;
  const std::size_t total = needed > length ? needed - length : 0;
  return {stride, total / 2, total - total / 2};
}

std::size_t Conv1dGeometry::output_length(std::size_t length, std::size_t kernel) const {
  if (stride == 0) throw ShapeError("conv1d: stride must be >= 1");
  if (kernel == 0) throw ShapeError("conv1d: kernel size must be >= 1");
  const std::size_t padded = length + pad_left + pad_right;
  if (padded < kernel) {
    throw ShapeError("conv1d: padded length " + std::to_string(padded) + " shorter than kernel " +
                     std::to_string(kernel));
  }
  return (padded - kernel) / stride + 1;
}

Tensor conv1d_forward(const Tensor& input, const Tensor& weights, std::span<const double> bias,
                      const Conv1dGeometry& geom) {
  const auto d = sequence_dims(input, "conv1d");
  check_conv_weights(weights, d.c);
  const std::size_t c_out = weights.dim(0), kernel = weights.dim(2);
  if (bias.size() != c_out) {
    throw ShapeError("conv1d: bias length " + std::to_string(bias.size()) + " != C_out " + std::to_string(c_out));
  }
  const std::size_t out_len = geom.output_length(d.l, kernel);
  Tensor out(d.batched ? Shape{d.n, c_out, out_len} : Shape{c_out, out_len});

  const std::size_t patch = d.c * kernel;
  AlignedBuffer cols(patch * out_len);
  ConstMapMat w(weights.data(), c_out, patch);
  ConstMapMat col_mat(cols.data(), patch, out_len);
  Eigen::Map<const Eigen::VectorXd> b(bias.data(), c_out);
  for (std::size_t s = 0; s < d.n; ++s) {
    im2col(input.data() + s * d.c * d.l, d.c, d.l, kernel, geom, out_len, cols.data());
    MapMat y(out.data() + s * c_out * out_len, c_out, out_len);
    y.noalias() = w * col_mat;
    y.colwise() += b;
  }
  return out;
}

Tensor conv1d_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                       const Conv1dGeometry& geom, Tensor* grad_weights, Tensor* grad_bias) {
  const auto d = sequence_dims(input, "conv1d backward");
  check_conv_weights(weights, d.c);
  const std::size_t c_out = weights.dim(0), kernel = weights.dim(2);
  const std::size_t out_len = geom.output_length(d.l, kernel);
  expect_shape(grad_output, d.batched ? Shape{d.n, c_out, out_len} : Shape{c_out, out_len},
               "conv1d backward grad_output");

  const std::size_t patch = d.c * kernel;
  Tensor grad_input(input.shape());
  AlignedBuffer cols(patch * out_len), dcols(patch * out_len);
  ConstMapMat w(weights.data(), c_out, patch);
  MapMat col_mat(cols.data(), patch, out_len);
  MapMat dcol_mat(dcols.data(), patch, out_len);
  for (std::size_t s = 0; s < d.n; ++s) {
    ConstMapMat gy(grad_output.data() + s * c_out * out_len, c_out, out_len);
    if (grad_weights) {
      im2col(input.data() + s * d.c * d.l, d.c, d.l, kernel, geom, out_len, cols.data());
      MapMat gw(grad_weights->data(), c_out, patch);
      gw.noalias() += gy * col_mat.transpose();
    }
    if (grad_bias) {
      for (std::size_t o = 0; o < c_out; ++o) {
        const double* row = grad_output.data() + (s * c_out + o) * out_len;
        double acc = 0.0;
        for (std::size_t j = 0; j < out_len; ++j) acc += row[j];
        (*grad_bias)[o] += acc;
      }
    }
    dcol_mat.noalias() = w.transpose() * gy;
    col2im_add(dcols.data(), d.c, d.l, kernel, geom, out_len, grad_input.data() + s * d.c * d.l);
  }
  return grad_input;
}

Tensor dense_forward(const Tensor& input, const Tensor& weights, std::span<const double> bias) {
  if (weights.rank() != 2) throw ShapeError("dense: weights must be [D_out, D_in]");
  const std::size_t d_out = weights.dim(0), d_in = weights.dim(1);
  const bool batched = input.rank() == 2;
  if (!(batched || input.rank() == 1)) throw ShapeError("dense: input must be [N, D] or [D]");
  const std::size_t n = batched ? input.dim(0) : 1;
  const std::size_t width = batched ? input.dim(1) : input.dim(0);
  if (width != d_in) {
    throw ShapeError("dense: input width " + std::to_string(width) + " != weights D_in " + std::to_string(d_in));
  }
  if (bias.size() != d_out) throw ShapeError("dense: bias length does not match D_out");
  Tensor out(batched ? Shape{n, d_out} : Shape{d_out});
  ConstMapMat x(input.data(), n, d_in);
  ConstMapMat w(weights.data(), d_out, d_in);
  MapMat y(out.data(), n, d_out);
  y.noalias() = x * w.transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data(), d_out);
  return out;
}

Tensor dense_backward(const Tensor& input, const Tensor& weights, const Tensor& grad_output,
                      Tensor* grad_weights, Tensor* grad_bias) {
  const std::size_t d_out = weights.dim(0), d_in = weights.dim(1);
  const std::size_t n = input.rank() == 2 ? input.dim(0) : 1;
  if (grad_output.size() != n * d_out) throw ShapeError("dense backward: grad_output shape mismatch");
  ConstMapMat x(input.data(), n, d_in);
  ConstMapMat w(weights.data(), d_out, d_in);
  ConstMapMat gy(grad_output.data(), n, d_out);
  if (grad_weights) {
    MapMat gw(grad_weights->data(), d_out, d_in);
    gw.noalias() += gy.transpose() * x;
  }
  if (grad_bias) {
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < d_out; ++o) (*grad_bias)[o] += grad_output[s * d_out + o];
  }
  Tensor grad_input(input.shape());
  MapMat gx(grad_input.data(), n, d_in);
  gx.noalias() = gy * w;
  return grad_input;
}

Tensor batch_norm1d_forward(const Tensor& input, const Tensor& gamma, const Tensor& beta, double eps,
                            Mode mode, double momentum, BatchNormStats& stats, BatchNormCache* cache) {
  if (input.rank() != 2 && input.rank() != 3) throw ShapeError("batch_norm1d: input must be [N, C, L] or [N, C]");
  const std::size_t n = input.dim(0), c = input.dim(1), l = input.rank() == 3 ? input.dim(2) : 1;
  if (n == 0 || l == 0) throw ShapeError("batch_norm1d: empty batch");
  if (gamma.size() != c || beta.size() != c) throw ShapeError("batch_norm1d: gamma/beta length != channels");
  if (!(eps >= 0.0)) throw std::invalid_argument("batch_norm1d: eps must be >= 0");

  Tensor mean({c}), inv_std({c});
  const double count = static_cast<double>(n * l);
  if (mode == Mode::train) {
    if (n * l < 2) throw ShapeError("batch_norm1d: train mode needs at least 2 values per channel");
    for (std::size_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* row = input.data() + (s * c + ch) * l;
        for (std::size_t j = 0; j < l; ++j) sum += row[j];
      }
      const double mu = sum / count;
      double sq = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        const double* row = input.data() + (s * c + ch) * l;
        for (std::size_t j = 0; j < l; ++j) sq += (row[j] - mu) * (row[j] - mu);
      }
      const double var = sq / count;
      if (!(var + eps > 0.0)) throw NumericalError("batch_norm1d: zero variance with eps = 0");
      mean[ch] = mu;
      inv_std[ch] = 1.0 / std::sqrt(var + eps);
      stats.running_mean[ch] = (1.0 - momentum) * stats.running_mean[ch] + momentum * mu;
      stats.running_var[ch] = (1.0 - momentum) * stats.running_var[ch] + momentum * (sq / (count - 1.0));
    }
  } else {
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = stats.running_mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(stats.running_var[ch] + eps);
    }
  }

  Tensor out(input.shape());
  Tensor normalized(input.shape());
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (s * c + ch) * l;
      for (std::size_t j = 0; j < l; ++j) {
        const double xh = (input[off + j] - mean[ch]) * inv_std[ch];
        normalized[off + j] = xh;
        out[off + j] = gamma[ch] * xh + beta[ch];
      }
    }
  }
  if (cache) {
    cache->mode = mode;
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
  }
  return out;
}

Tensor batch_norm1d_backward(const Tensor& grad_output, const Tensor& gamma, const BatchNormCache& cache,
                             Tensor* grad_gamma, Tensor* grad_beta) {
  const Tensor& xh = cache.normalized;
  expect_shape(grad_output, xh.shape(), "batch_norm1d backward grad_output");
  const std::size_t n = xh.dim(0), c = xh.dim(1), l = xh.rank() == 3 ? xh.dim(2) : 1;
  const double count = static_cast<double>(n * l);
  Tensor grad_input(xh.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * l;
      for (std::size_t j = 0; j < l; ++j) {
        sum_g += grad_output[off + j];
        sum_gx += grad_output[off + j] * xh[off + j];
      }
    }
    if (grad_gamma) (*grad_gamma)[ch] += sum_gx;
    if (grad_beta) (*grad_beta)[ch] += sum_g;
    const double scale = gamma[ch] * cache.inv_std[ch];
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t off = (s * c + ch) * l;
      for (std::size_t j = 0; j < l; ++j) {
        if (cache.mode == Mode::train) {
          grad_input[off + j] = scale * (grad_output[off + j] - sum_g / count - xh[off + j] * sum_gx / count);
        } else {
          grad_input[off + j] = scale * grad_output[off + j];
        }
      }
    }
  }
  return grad_input;
}

Tensor relu_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? input[i] : 0.0;
  return out;
}

Tensor relu_backward(const Tensor& input, const Tensor& grad_output) {
  expect_shape(grad_output, input.shape(), "relu backward");
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > 0.0 ? grad_output[i] : 0.0;
  return out;
}

Tensor sigmoid_forward(const Tensor& input) {
  Tensor out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double x = input[i];
    if (x >= 0.0) {
      out[i] = 1.0 / (1.0 + std::exp(-x));
    } else {
      const double e = std::exp(x);
      out[i] = e / (1.0 + e);
    }
  }
  return out;
}

Tensor sigmoid_backward(const Tensor& output, const Tensor& grad_output) {
  expect_shape(grad_output, output.shape(), "sigmoid backward");
  Tensor out(output.shape());
  for (std::size_t i = 0; i < output.size(); ++i) out[i] = grad_output[i] * output[i] * (1.0 - output[i]);
  return out;
}

Tensor dropout_forward(const Tensor& input, double rate, Mode mode, Rng* rng, Tensor* mask) {
  if (!(rate >= 0.0 && rate < 1.0)) throw std::invalid_argument("dropout: rate must be in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) {
    if (mask) *mask = Tensor(input.shape(), 1.0);
    return input;
  }
  if (!rng) throw std::invalid_argument("dropout: train mode requires an RNG stream");
  const double keep_scale = 1.0 / (1.0 - rate);
  Tensor out(input.shape());
  Tensor m(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) {
    const double s = uniform01(*rng) < rate ? 0.0 : keep_scale;
    m[i] = s;
    out[i] = input[i] * s;
  }
  if (mask) *mask = std::move(m);
  return out;
}

Tensor global_avg_pool_forward(const Tensor& input) {
  if (input.rank() != 3) throw ShapeError("global_avg_pool: expected [N, C, L], got " + shape_to_string(input.shape()));
  const std::size_t n = input.dim(0), c = input.dim(1), l = input.dim(2);
  Tensor out({n, c});
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* row = input.data() + (s * c + ch) * l;
      double sum = 0.0;
      for (std::size_t j = 0; j < l; ++j) sum += row[j];
      out.at(s, ch) = sum / static_cast<double>(l);
    }
  }
  return out;
}

Tensor global_avg_pool_backward(const Shape& input_shape, const Tensor& grad_output) {
  const std::size_t n = input_shape[0], c = input_shape[1], l = input_shape[2];
  expect_shape(grad_output, {n, c}, "global_avg_pool backward");
  Tensor out(input_shape);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double g = grad_output.at(s, ch) / static_cast<double>(l);
      double* row = out.data() + (s * c + ch) * l;
      for (std::size_t j = 0; j < l; ++j) row[j] = g;
    }
  }
  return out;
}

}  // namespace ets::nn
