#include <gtest/gtest.h>

#include <random>

#include "oracles.hpp"
#include "tebm/tensor.hpp"

using tebm::ConvLayer;
using tebm::Tensor;

namespace {

Tensor<double> random_tensor(int c, int n, int h, int w, std::mt19937_64& rng) {
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor<double> t(c, n, h, w);
  for (auto& v : t.data) v = d(rng);
  return t;
}

ConvLayer<double> random_layer(int out, int in, int k, int stride, int pad, std::mt19937_64& rng) {
  ConvLayer<double> l(out, in, k, stride, pad);
  std::normal_distribution<double> d(0.0, 1.0);
  for (Eigen::Index i = 0; i < l.kernel.size(); ++i) l.kernel.data()[i] = d(rng);
  for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = d(rng);
  return l;
}

Eigen::VectorXd as_vector(const Tensor<double>& t) { return Eigen::Map<const Eigen::VectorXd>(t.data.data(), Eigen::Index(t.size())); }

}  // namespace

TEST(Conv2d, ScalarCase) {
  ConvLayer<double> l(1, 1, 1, 1, 0);
  l.kernel(0, 0) = 1.5;
  l.bias[0] = -0.25;
  Tensor<double> x = Tensor<double>::single(1, 1, 1, 2.0);
  const auto y = tebm::conv2d_forward(x, l);
  ASSERT_EQ(y.size(), 1u);
  EXPECT_DOUBLE_EQ(y.data[0], 2.0 * 1.5 - 0.25);
}

TEST(Conv2d, SumOfOnes) {
  ConvLayer<double> l(1, 1, 4, 1, 0);
  l.kernel.setOnes();
  const auto y = tebm::conv2d_forward(Tensor<double>::single(1, 4, 4, 1.0), l);
  ASSERT_EQ(y.height, 1);
  ASSERT_EQ(y.width, 1);
  EXPECT_DOUBLE_EQ(y.data[0], 16.0);
}

TEST(Conv2d, MatchesDenseMatrixOracle) {
  std::mt19937_64 rng(11);
  const auto l = random_layer(2, 1, 3, 2, 1, rng);
  const auto x = random_tensor(1, 1, 8, 8, rng);
  ConvLayer<double> nobias = l;
  nobias.bias.setZero();
  const Eigen::MatrixXd M = oracle::probe(64, [&](const Eigen::VectorXd& e) {
    Tensor<double> u = Tensor<double>::single(1, 8, 8);
    Eigen::Map<Eigen::VectorXd>(u.data.data(), 64) = e;
    return as_vector(tebm::conv2d_forward(u, nobias));
  });
  ASSERT_EQ(M.rows(), 2 * 4 * 4);
  const Eigen::VectorXd expect = M * as_vector(x) + Eigen::VectorXd(l.bias.replicate(1, 16).transpose().reshaped());
  const Eigen::VectorXd got = as_vector(tebm::conv2d_forward(x, l));
  EXPECT_LE((got - expect).cwiseAbs().maxCoeff(), 1e-12);
  // and against a direct loop implementation
  EXPECT_LE((got - as_vector(oracle::naive_conv(x, l))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Conv2d, BatchedEqualsPerImage) {
  std::mt19937_64 rng(5);
  const auto l = random_layer(3, 2, 4, 2, 1, rng);
  const auto x = random_tensor(2, 3, 8, 8, rng);
  const auto y = tebm::conv2d_forward(x, l);
  EXPECT_LE((as_vector(y) - as_vector(oracle::naive_conv(x, l))).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Conv2d, ShapeMismatchIsRejected) {
  ConvLayer<double> l(1, 2, 3, 1, 1);
  EXPECT_THROW(tebm::conv2d_forward(Tensor<double>::single(1, 5, 5), l), tebm::ShapeError);
  ConvLayer<double> big(1, 1, 7, 1, 0);
  EXPECT_THROW(tebm::conv2d_forward(Tensor<double>::single(1, 5, 5), big), tebm::ShapeError);
  EXPECT_THROW((ConvLayer<double>(1, 1, 3, 3, 0)), std::invalid_argument);
}

TEST(Conv2d, StrideTwoHalvesEvenExtents) {
  for (int n : {2, 4, 8, 16, 30, 64, 128}) EXPECT_EQ(tebm::conv_output_extent(n, 4, 2, 1), n / 2) << n;
}

TEST(Conv2dBackward, ZeroCotangentGivesZeroGradients) {
  std::mt19937_64 rng(3);
  const auto l = random_layer(2, 3, 3, 1, 1, rng);
  const auto x = random_tensor(3, 1, 6, 6, rng);
  const auto g = tebm::conv2d_backward(x, l, Tensor<double>(2, 1, 6, 6));
  EXPECT_EQ(as_vector(g.grad_input).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.grad_kernel.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(g.grad_bias.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Conv2dBackward, ScalarProductRule) {
  ConvLayer<double> l(1, 1, 1, 1, 0);
  l.kernel(0, 0) = 3.0;
  const auto x = Tensor<double>::single(1, 1, 1, -2.0);
  const auto g = tebm::conv2d_backward(x, l, Tensor<double>::single(1, 1, 1, 1.0));
  EXPECT_DOUBLE_EQ(g.grad_input.data[0], 3.0);
  EXPECT_DOUBLE_EQ(g.grad_kernel(0, 0), -2.0);
  EXPECT_DOUBLE_EQ(g.grad_bias[0], 1.0);
}

TEST(Conv2dBackward, RejectsWrongCotangentShape) {
  ConvLayer<double> l(2, 1, 3, 1, 1);
  EXPECT_THROW(tebm::conv2d_backward(Tensor<double>::single(1, 4, 4), l, Tensor<double>::single(2, 3, 3)), tebm::ShapeError);
}

// Loss = sum(w .* conv(x)) with fixed random w (w = 1 is the plain sum).
class ConvFiniteDifference : public ::testing::TestWithParam<std::tuple<int, int, int, bool>> {};

TEST_P(ConvFiniteDifference, AllGradientsMatch) {
  const auto [k, stride, pad, unit_weights] = GetParam();
  std::mt19937_64 rng(100 + k * 10 + stride);
  auto l = random_layer(2, 2, k, stride, pad, rng);
  auto x = random_tensor(2, 2, 7, 6, rng);
  const auto y0 = tebm::conv2d_forward(x, l);
  Tensor<double> w = unit_weights ? Tensor<double>(y0.channels, y0.batch, y0.height, y0.width, 1.0)
                                  : random_tensor(y0.channels, y0.batch, y0.height, y0.width, rng);
  auto loss = [&](const Tensor<double>& in, const ConvLayer<double>& layer) {
    return as_vector(tebm::conv2d_forward(in, layer)).dot(as_vector(w));
  };
  const auto g = tebm::conv2d_backward(x, l, w);
  const double h = 1e-4;

  Eigen::VectorXd fd_in(Eigen::Index(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp.data[i] += h;
    xm.data[i] -= h;
    fd_in[Eigen::Index(i)] = (loss(xp, l) - loss(xm, l)) / (2 * h);
  }
  EXPECT_LE(oracle::relative_error(as_vector(g.grad_input), fd_in), 1e-5);

  Eigen::VectorXd fd_k(l.kernel.size()), an_k(l.kernel.size());
  for (Eigen::Index i = 0; i < l.kernel.size(); ++i) {
    auto lp = l, lm = l;
    lp.kernel.data()[i] += h;
    lm.kernel.data()[i] -= h;
    fd_k[i] = (loss(x, lp) - loss(x, lm)) / (2 * h);
    an_k[i] = g.grad_kernel.data()[i];
  }
  EXPECT_LE(oracle::relative_error(an_k, fd_k), 1e-5);

  Eigen::VectorXd fd_b(l.out_ch);
  for (int o = 0; o < l.out_ch; ++o) {
    auto lp = l, lm = l;
    lp.bias[o] += h;
    lm.bias[o] -= h;
    fd_b[o] = (loss(x, lp) - loss(x, lm)) / (2 * h);
  }
  EXPECT_LE(oracle::relative_error(g.grad_bias, fd_b), 1e-5);
}

INSTANTIATE_TEST_SUITE_P(Shapes, ConvFiniteDifference,
                         ::testing::Values(std::make_tuple(3, 1, 1, true), std::make_tuple(3, 1, 1, false),
                                           std::make_tuple(4, 2, 1, true), std::make_tuple(4, 2, 1, false),
                                           std::make_tuple(4, 1, 0, false), std::make_tuple(1, 1, 0, false)));

TEST(Conv2dBackward, AdjointIdentity) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    auto l = random_layer(4, 3, 4, 2, 1, rng);
    l.bias.setZero();
    const auto u = random_tensor(3, 2, 16, 16, rng);
    const auto y = tebm::conv2d_forward(u, l);
    const auto w = random_tensor(y.channels, y.batch, y.height, y.width, rng);
    const double lhs = as_vector(y).dot(as_vector(w));
    const double rhs = as_vector(u).dot(as_vector(tebm::conv2d_backward(u, l, w).grad_input));
    EXPECT_LE(std::abs(lhs - rhs), 1e-10 * std::abs(lhs)) << "seed " << seed;
  }
}

TEST(LeakyRelu, Values) {
  EXPECT_DOUBLE_EQ(tebm::leaky_relu(-1.0, 0.05), -0.05);
  EXPECT_DOUBLE_EQ(tebm::leaky_relu(2.0, 0.05), 2.0);
  EXPECT_DOUBLE_EQ(tebm::leaky_relu(2.0, 0.7), 2.0);
  EXPECT_DOUBLE_EQ(tebm::leaky_relu_derivative(-3.0, 0.05), 0.05);
  EXPECT_DOUBLE_EQ(tebm::leaky_relu_derivative(0.0, 0.05), 1.0);
  EXPECT_DOUBLE_EQ(tebm::leaky_relu_derivative(4.0, 0.05), 1.0);
}

TEST(LeakyRelu, TensorFormAndLeakRange) {
  Tensor<double> t = Tensor<double>::single(1, 1, 3);
  t.data = {-2.0, 0.0, 5.0};
  const auto y = tebm::leaky_relu(t, 0.1);
  EXPECT_DOUBLE_EQ(y.data[0], -0.2);
  EXPECT_DOUBLE_EQ(y.data[1], 0.0);
  EXPECT_DOUBLE_EQ(y.data[2], 5.0);
  EXPECT_THROW(tebm::leaky_relu(t, 1.0), std::invalid_argument);
  EXPECT_THROW(tebm::leaky_relu(t, -0.1), std::invalid_argument);
}

TEST(LeakyRelu, BackwardMatchesFiniteDifference) {
  std::mt19937_64 rng(9);
  auto x = random_tensor(2, 1, 5, 5, rng);
  Tensor<double> g(2, 1, 5, 5, 1.0);
  tebm::leaky_relu_backward_inplace(x, 0.05, g);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = 1e-6;
    const double fd = (tebm::leaky_relu(x.data[i] + h, 0.05) - tebm::leaky_relu(x.data[i] - h, 0.05)) / (2 * h);
    EXPECT_NEAR(g.data[i], fd, 1e-8);
  }
}

TEST(Conv2d, FloatAndDoubleAgree) {
  std::mt19937_64 rng(21);
  const auto l = random_layer(3, 1, 3, 1, 1, rng);
  const auto x = random_tensor(1, 1, 8, 8, rng);
  ConvLayer<float> lf(3, 1, 3, 1, 1);
  lf.kernel = l.kernel.cast<float>();
  lf.bias = l.bias.cast<float>();
  Tensor<float> xf(1, 1, 8, 8);
  for (std::size_t i = 0; i < x.size(); ++i) xf.data[i] = float(x.data[i]);
  const auto yd = tebm::conv2d_forward(x, l);
  const auto yf = tebm::conv2d_forward(xf, lf);
  for (std::size_t i = 0; i < yd.size(); ++i) EXPECT_NEAR(yd.data[i], yf.data[i], 1e-5);
}
