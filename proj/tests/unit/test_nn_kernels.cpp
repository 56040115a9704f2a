#include <cmath>
#include <vector>

#include "doctest.h"
#include "ets/nn/kernels.hpp"
#include "ets/nn/layers.hpp"
#include "gradcheck.hpp"

using namespace ets;
using namespace ets::nn;

namespace {

// Naive sliding-window oracle for a single sample.
std::vector<double> naive_conv(const std::vector<std::vector<double>>& x, const Tensor& w,
                               const std::vector<double>& b, std::size_t stride, std::size_t pad) {
  const std::size_t cin = x.size(), len = x[0].size(), cout = w.dim(0), k = w.dim(2);
  const std::size_t out_len = (len + 2 * pad - k) / stride + 1;
  std::vector<double> out(cout * out_len);
  for (std::size_t o = 0; o < cout; ++o) {
    for (std::size_t j = 0; j < out_len; ++j) {
      double acc = b[o];
      for (std::size_t c = 0; c < cin; ++c) {
        for (std::size_t t = 0; t < k; ++t) {
          const long pos = static_cast<long>(j * stride + t) - static_cast<long>(pad);
          if (pos >= 0 && pos < static_cast<long>(len)) acc += w.at(o, c, t) * x[c][pos];
        }
      }
      out[o * out_len + j] = acc;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("conv1d matches the hand-computed difference kernel") {
  Tensor input({1, 4}, {1, 2, 3, 4});
  Tensor weights({1, 1, 3}, {1, 0, -1});
  const std::vector<double> bias{0.0};
  const Tensor out = conv1d_forward(input, weights, bias, Conv1dGeometry::symmetric(1, 0));
  CHECK(out.shape() == Shape{1, 2});
  CHECK(out[0] == -2.0);
  CHECK(out[1] == -2.0);
}

TEST_CASE("conv1d with a unit kernel is the identity") {
  Rng rng(3);
  const Tensor input = testing::random_tensor({1, 37}, rng);
  Tensor weights({1, 1, 1}, {1.0});
  const std::vector<double> bias{0.0};
  CHECK(conv1d_forward(input, weights, bias, Conv1dGeometry::symmetric(1, 0)) == input);
}

TEST_CASE("conv1d output length follows floor((L + 2p - K) / s) + 1") {
  Tensor input({1, 4096});
  Tensor weights({1, 1, 16});
  const std::vector<double> bias{0.0};
  CHECK(conv1d_forward(input, weights, bias, Conv1dGeometry::symmetric(1, 8)).dim(1) == 4097);
  CHECK(Conv1dGeometry::symmetric(2, 3).output_length(10, 4) == 7);
  CHECK(Conv1dGeometry::same(4096, 16, 16).output_length(4096, 16) == 256);
  CHECK(Conv1dGeometry::same(63, 16, 2).output_length(63, 16) == 32);
}

TEST_CASE("conv1d agrees with a naive loop on random multi-channel input") {
  Rng rng(11);
  for (std::size_t stride : {1u, 2u, 3u}) {
    for (std::size_t pad : {0u, 2u}) {
      const Tensor input = testing::random_tensor({3, 20}, rng);
      const Tensor weights = testing::random_tensor({4, 3, 5}, rng);
      const std::vector<double> bias{0.1, -0.2, 0.3, 0.0};
      std::vector<std::vector<double>> rows(3, std::vector<double>(20));
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t j = 0; j < 20; ++j) rows[c][j] = input.at(c, j);
      const auto expected = naive_conv(rows, weights, bias, stride, pad);
      const Tensor out = conv1d_forward(input, weights, bias, Conv1dGeometry::symmetric(stride, pad));
      REQUIRE(out.size() == expected.size());
      for (std::size_t i = 0; i < expected.size(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv1d rejects shape mismatches") {
  Tensor input({2, 10});
  Tensor weights({1, 3, 3});
  const std::vector<double> bias{0.0};
  CHECK_THROWS_AS(conv1d_forward(input, weights, bias, {}), ShapeError);
  Tensor short_input({3, 2});
  CHECK_THROWS_AS(conv1d_forward(short_input, weights, bias, {}), ShapeError);
  Tensor ok({3, 10});
  const std::vector<double> bad_bias{0.0, 1.0};
  CHECK_THROWS_AS(conv1d_forward(ok, weights, bad_bias, {}), ShapeError);
}

TEST_CASE("batch norm train mode") {
  BatchNormStats stats{Tensor({1}, 0.0), Tensor({1}, 1.0)};
  Tensor gamma({1}, 1.0), beta({1}, 0.0);

  SUBCASE("two values normalize to -1, 1 with eps = 0") {
    Tensor input({1, 1, 2}, {1.0, 3.0});
    const Tensor out = batch_norm1d_forward(input, gamma, beta, 0.0, Mode::train, 0.1, stats, nullptr);
    CHECK(out[0] == -1.0);
    CHECK(out[1] == 1.0);
    CHECK(stats.running_mean[0] == doctest::Approx(0.2));
    CHECK(stats.running_var[0] == doctest::Approx(0.9 + 0.1 * 2.0));
  }
  SUBCASE("standardized input passes through") {
    Tensor input({4, 1, 1}, {-1.0, 1.0, -1.0, 1.0});
    const Tensor out = batch_norm1d_forward(input, gamma, beta, 1e-6, Mode::train, 0.1, stats, nullptr);
    for (std::size_t i = 0; i < 4; ++i) CHECK(std::abs(out[i] - input[i]) <= 1e-6);
  }
  SUBCASE("gamma = 0 yields beta") {
    Tensor g0({1}, 0.0), b({1}, 0.7);
    Rng rng(1);
    const Tensor input = testing::random_tensor({3, 1, 5}, rng);
    const Tensor out = batch_norm1d_forward(input, g0, b, 1e-5, Mode::train, 0.1, stats, nullptr);
    for (double v : out.values()) CHECK(v == 0.7);
  }
  SUBCASE("single value in train mode is rejected") {
    Tensor input({1, 1, 1}, {2.0});
    CHECK_THROWS_AS(batch_norm1d_forward(input, gamma, beta, 1e-5, Mode::train, 0.1, stats, nullptr), ShapeError);
  }
  SUBCASE("empty batch is rejected") {
    Tensor input({0, 1, 4});
    CHECK_THROWS(batch_norm1d_forward(input, gamma, beta, 1e-5, Mode::eval, 0.1, stats, nullptr));
  }
}

TEST_CASE("batch norm layer refuses non-positive eps") {
  CHECK_THROWS_AS(BatchNorm1d(3, 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("dense forward") {
  SUBCASE("identity weights") {
    Tensor w({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const std::vector<double> b(3, 0.0);
    Tensor x = Tensor::from({0.5, -2.0, 7.0});
    CHECK(dense_forward(x, w, b) == x);
  }
  SUBCASE("forced arithmetic") {
    Tensor w({1, 2}, {1, 1});
    const std::vector<double> b{1.0};
    CHECK(dense_forward(Tensor::from({2, 3}), w, b)[0] == 6.0);
  }
  SUBCASE("random 3x5 against a naive loop") {
    Rng rng(5);
    const Tensor w = testing::random_tensor({3, 5}, rng);
    const Tensor x = testing::random_tensor({5}, rng);
    const std::vector<double> b{0.3, -0.1, 2.0};
    const Tensor y = dense_forward(x, w, b);
    for (std::size_t o = 0; o < 3; ++o) {
      double acc = b[o];
      for (std::size_t i = 0; i < 5; ++i) acc += w.at(o, i) * x[i];
      CHECK(y[o] == doctest::Approx(acc).epsilon(1e-14));
    }
  }
  SUBCASE("shape mismatch") {
    Tensor w({2, 4});
    const std::vector<double> b(2, 0.0);
    CHECK_THROWS_AS(dense_forward(Tensor::from({1, 2, 3}), w, b), ShapeError);
  }
}

TEST_CASE("pointwise kernels") {
  CHECK(relu_forward(Tensor::from({-1, 0, 2})) == Tensor::from({0, 0, 2}));
  CHECK(sigmoid_forward(Tensor::from({0.0}))[0] == 0.5);
  const Tensor extreme = sigmoid_forward(Tensor::from({-800.0, 800.0}));
  CHECK(extreme[0] >= 0.0);
  CHECK(extreme[1] == 1.0);

  Rng rng(2);
  const Tensor x = testing::random_tensor({50}, rng);
  CHECK(dropout_forward(x, 0.0, Mode::train, &rng, nullptr) == x);
  CHECK(dropout_forward(x, 0.2, Mode::eval, nullptr, nullptr) == x);
  CHECK_THROWS(dropout_forward(x, 0.2, Mode::train, nullptr, nullptr));
}

TEST_CASE("dropout preserves the expectation in train mode") {
  Rng rng(77);
  Tensor x({100000}, 1.5);
  const Tensor y = dropout_forward(x, 0.2, Mode::train, &rng, nullptr);
  double sum = 0.0;
  std::size_t zeros = 0;
  for (double v : y.values()) {
    sum += v;
    zeros += v == 0.0;
  }
  const double mean = sum / static_cast<double>(y.size());
  CHECK(std::abs(mean - 1.5) / 1.5 < 0.01);
  CHECK(std::abs(static_cast<double>(zeros) / 1e5 - 0.2) < 0.01);
}

TEST_CASE("residual block wiring") {
  SUBCASE("zero main path reduces to ReLU of the input") {
    ResidualBlock block(3, 3, 5, 1, 0.2);
    CHECK_FALSE(block.has_projection());
    Rng rng(8);
    const Tensor x = testing::random_tensor({2, 3, 16}, rng);
    const Tensor y = block.forward(x, {Mode::eval, nullptr});
    CHECK(y == relu_forward(x));
  }
  SUBCASE("channel doubling with stride 2 halves the length") {
    ResidualBlock block(4, 8, 16, 2, 0.2);
    CHECK(block.has_projection());
    Rng rng(9);
    block.initialize(rng);
    const Tensor y = block.forward(testing::random_tensor({1, 4, 64}, rng), {Mode::eval, nullptr});
    CHECK(y.shape() == Shape{1, 8, 32});
  }
  SUBCASE("matches a straight-line oracle of the same wiring") {
    ResidualBlock block(1, 1, 3, 1, 0.0);
    Rng rng(21);
    testing::randomize_parameters(block, rng);
    const Tensor x = testing::random_tensor({1, 1, 8}, rng);
    const Tensor y = block.forward(x, {Mode::eval, nullptr});

    // Eval-mode BN with default running stats (mean 0, var 1).
    const double inv = 1.0 / std::sqrt(1.0 + 1e-5);
    auto conv_same3 = [](const std::vector<double>& in, const Tensor& w, double b) {
      std::vector<double> out(in.size());
      for (std::size_t j = 0; j < in.size(); ++j) {
        double acc = b;
        for (int t = 0; t < 3; ++t) {
          const long pos = static_cast<long>(j) + t - 1;
          if (pos >= 0 && pos < static_cast<long>(in.size())) acc += w[t] * in[pos];
        }
        out[j] = acc;
      }
      return out;
    };
    std::vector<double> in(x.values().begin(), x.values().end());
    auto h = conv_same3(in, block.conv1().weight().value, block.conv1().bias().value[0]);
    for (auto& v : h) v = std::max(0.0, block.bn1().gamma().value[0] * v * inv + block.bn1().beta().value[0]);
    h = conv_same3(h, block.conv2().weight().value, block.conv2().bias().value[0]);
    for (std::size_t j = 0; j < h.size(); ++j) {
      const double main = block.bn2().gamma().value[0] * h[j] * inv + block.bn2().beta().value[0];
      const double expected = std::max(0.0, main + in[j]);
      CHECK(std::abs(y[j] - expected) <= 1e-12);
    }
  }
}

TEST_CASE("layers reject non-finite input and backward without forward") {
  Dense dense(2, 1);
  CHECK_THROWS_AS(dense.backward(Tensor({1, 1})), std::logic_error);
  Tensor bad({1, 2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(dense.forward(bad, {}), NumericalError);
  Conv1d conv(1, 1, 3);
  CHECK_THROWS_AS(conv.backward(Tensor({1, 1, 4})), std::logic_error);
}

TEST_CASE("frozen conv keeps zero gradient but propagates upstream") {
  Conv1d conv(2, 3, 4, 1);
  Rng rng(4);
  conv.initialize(rng);
  conv.set_frozen(true);
  const Tensor x = testing::random_tensor({2, 2, 12}, rng);
  const Tensor y = conv.forward(x, {});
  const Tensor gx = conv.backward(testing::random_tensor(y.shape(), rng));
  for (double g : conv.weight().grad.values()) CHECK(g == 0.0);
  for (double g : conv.bias().grad.values()) CHECK(g == 0.0);
  double norm = 0.0;
  for (double g : gx.values()) norm += g * g;
  CHECK(norm > 0.0);
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
  ResidualBlock block(2, 4, 3, 2, 0.2);
  Rng rng(6);
  block.initialize(rng);
  const Tensor x = testing::random_tensor({3, 2, 10}, rng);
  const Tensor y = block.forward(x, {Mode::train, &rng});
  block.backward(Tensor(y.shape()));
  block.visit_parameters("", [](const std::string&, Parameter& p) {
    for (double g : p.grad.values()) CHECK(g == 0.0);
  });
}
