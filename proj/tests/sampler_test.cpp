#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "oracles.hpp"
#include "tebm/sampler.hpp"

using tebm::Image;
using tebm::SamplerConfig;

namespace {

// Gradient of ||x - mu||^2 / (2 s^2).
auto quadratic_grad(double mu, double s2) {
  return [mu, s2](const Image& x) {
    Image g = x;
    g.values = (x.values - mu) / s2;
    return g;
  };
}

// Recorded from a run whose single steps were checked against the explicit update.
constexpr double kGolden0 = 0.43556075227337065, kGolden5 = 0.30293874809625931, kGolden10 = 0.32090414456375793,
                 kGolden15 = 0.3552494416601934;

}  // namespace

TEST(SamplerConfig, Validation) {
  SamplerConfig c;
  EXPECT_NO_THROW(c.validate());
  c.beta = 0.0;
  EXPECT_NO_THROW(c.validate());
  c.beta = -1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.epsilon = 0.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = {};
  c.steps = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(UlaStep, NoDriftNoNoise) {
  SamplerConfig c;
  c.beta = 0.0;
  std::mt19937_64 rng(1);
  const Image x = oracle::random_image(5, 5, 2);
  const Image y = tebm::ula_step(x, [](const Image& v) { return Image::zeros_like(v); }, c, rng);
  EXPECT_TRUE((x.values == y.values).all());
}

TEST(UlaStep, ExactUpdateAndDeterminism) {
  SamplerConfig c;
  c.epsilon = 0.3;
  c.beta = 0.2;
  const Image x = oracle::random_image(4, 4, 3);
  auto grad = quadratic_grad(0.1, 2.0);
  std::mt19937_64 r1(9), r2(9), r3(9);
  const Image a = tebm::ula_step(x, grad, c, r1);
  const Image b = tebm::ula_step(x, grad, c, r2);
  EXPECT_TRUE((a.values == b.values).all());
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < x.values.size(); ++i) {
    const double want = x.values[i] - 0.15 * (x.values[i] - 0.1) / 2.0 + std::sqrt(0.06) * n(r3);
    EXPECT_NEAR(a.values[i], want, 1e-15);
  }
}

TEST(UlaStep, NonFiniteGradientSignalsDivergence) {
  SamplerConfig c;
  std::mt19937_64 rng(1);
  auto bad = [](const Image& v) {
    Image g = Image::zeros_like(v);
    g.values[3] = std::numeric_limits<double>::quiet_NaN();
    return g;
  };
  EXPECT_THROW(tebm::ula_step(Image(3, 3), bad, c, rng), tebm::DivergenceError);
}

TEST(UlaRun, ZeroStepsReturnsStart) {
  SamplerConfig c;
  c.steps = 0;
  std::mt19937_64 rng(1);
  const Image x = oracle::random_image(4, 4, 5);
  int taps = 0;
  const Image y = tebm::ula_run(x, quadratic_grad(0, 1), c, rng, [&](int, const Image&) { ++taps; });
  EXPECT_TRUE((x.values == y.values).all());
  EXPECT_EQ(taps, 1);
}

TEST(UlaRun, DivergenceCarriesStepIndex) {
  SamplerConfig c;
  c.steps = 10;
  c.beta = 0.0;
  std::mt19937_64 rng(1);
  int calls = 0;
  auto grad = [&](const Image& v) {
    Image g = Image::zeros_like(v);
    if (++calls == 4) g.values[0] = std::numeric_limits<double>::infinity();
    return g;
  };
  try {
    tebm::ula_run(Image(2, 2), grad, c, rng);
    FAIL();
  } catch (const tebm::DivergenceError& e) {
    EXPECT_EQ(e.step(), 4u);
  }
}

TEST(UlaRun, TrajectoryTapStride) {
  SamplerConfig c;
  c.steps = 10;
  std::mt19937_64 rng(1);
  std::vector<int> seen;
  tebm::ula_run(Image(2, 2), quadratic_grad(0, 1), c, rng, [&](int k, const Image&) { seen.push_back(k); }, 4);
  EXPECT_EQ(seen, (std::vector<int>{0, 4, 8}));
}

// Discrete OU recursion x' = (1 - eps/(2 s^2)) x + sqrt(beta eps) xi has
// stationary variance beta eps / (1 - a^2) = beta s^2 / (1 - eps / (4 s^2)).
TEST(UlaRun, QuadraticStationaryMoments) {
  const double s2 = 1.0, eps = 0.1, beta = 1.0;
  const double want_var = beta * s2 / (1.0 - eps / (4.0 * s2));
  EXPECT_NEAR(want_var, 1.0256, 1e-4);
  SamplerConfig c;
  c.epsilon = eps;
  c.beta = beta;
  c.steps = 40000;
  std::mt19937_64 rng(77);
  const int N = 32;
  Eigen::ArrayXd sum = Eigen::ArrayXd::Zero(N * N), sq = Eigen::ArrayXd::Zero(N * N);
  long count = 0;
  tebm::ula_run(
      Image(N, N, 0.5), quadratic_grad(0.5, s2), c, rng,
      [&](int k, const Image& x) {
        if (k > 30000) {
          sum += x.values;
          sq += (x.values - 0.5).square();
          ++count;
        }
      },
      1);
  const double mean = sum.sum() / double(count * N * N);
  const double var = sq.sum() / double(count * N * N) - (mean - 0.5) * (mean - 0.5);
  EXPECT_NEAR(mean, 0.5, 0.02 * 0.5);
  EXPECT_NEAR(var, want_var, 0.05 * want_var);
}

TEST(UlaRun, GoldenTrajectory) {
  SamplerConfig c;
  c.epsilon = 0.5;
  c.beta = 0.01;
  c.steps = 25;
  std::mt19937_64 rng(2024);
  Image x0(4, 4);
  for (int i = 0; i < 16; ++i) x0.values[i] = 0.0625 * i;
  // Toy energy sum((x - 0.3)^2) + 0.1 sum(x^4).
  auto grad = [](const Image& x) {
    Image g = x;
    g.values = 2.0 * (x.values - 0.3) + 0.4 * x.values.cube();
    return g;
  };
  const Image x = tebm::ula_run(x0, grad, c, rng);
  const double golden[4] = {kGolden0, kGolden5, kGolden10, kGolden15};
  EXPECT_NEAR(x.values[0], golden[0], 1e-12);
  EXPECT_NEAR(x.values[5], golden[1], 1e-12);
  EXPECT_NEAR(x.values[10], golden[2], 1e-12);
  EXPECT_NEAR(x.values[15], golden[3], 1e-12);
}

TEST(UlaRunBatch, ChainsUseOnlyTheirOwnStreams) {
  SamplerConfig c;
  c.epsilon = 0.2;
  c.beta = 0.5;
  c.steps = 30;
  auto grad = quadratic_grad(0.2, 0.5);
  std::vector<Image> chains = {oracle::random_image(3, 3, 1), oracle::random_image(3, 3, 2), oracle::random_image(3, 3, 3)};
  std::vector<std::mt19937_64> rngs;
  for (std::uint64_t i = 0; i < 3; ++i) rngs.push_back(tebm::stream_rng(5, 1, i));
  auto singles = chains;
  tebm::ula_run_batch(
      chains,
      [&](std::span<const Image> xs, std::vector<Image>& gs) {
        gs.clear();
        for (const auto& x : xs) gs.push_back(grad(x));
      },
      c, rngs);
  for (std::uint64_t i = 0; i < 3; ++i) {
    std::mt19937_64 r = tebm::stream_rng(5, 1, i);
    const Image y = tebm::ula_run(singles[i], grad, c, r);
    EXPECT_TRUE((y.values == chains[i].values).all()) << i;
  }
}

TEST(UlaStep, OptionalClamp) {
  SamplerConfig c;
  c.clamp = true;
  c.beta = 0.0;
  std::mt19937_64 rng(1);
  Image x(2, 2);
  x.values << -5, 0.5, 5, 1.0;
  const Image y = tebm::ula_step(x, [](const Image& v) { return Image::zeros_like(v); }, c, rng);
  EXPECT_DOUBLE_EQ(y.values[0], -0.1);
  EXPECT_DOUBLE_EQ(y.values[1], 0.5);
  EXPECT_DOUBLE_EQ(y.values[2], 1.1);
}

TEST(ReplayBuffer, Initialization) {
  tebm::ReplayBuffer b(8000, 8, 8, 0.01, 1);
  EXPECT_EQ(b.size(), 8000u);
  double lo = 1, hi = 0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    lo = std::min(lo, b.entry(i).values.minCoeff());
    hi = std::max(hi, b.entry(i).values.maxCoeff());
  }
  EXPECT_GE(lo, 0.0);
  EXPECT_LE(hi, 1.0);
  tebm::ReplayBuffer other(10, 8, 8, 0.01, 2);
  EXPECT_FALSE((b.entry(0).values == other.entry(0).values).all());
  EXPECT_THROW(tebm::ReplayBuffer(0, 8, 8, 0.01, 1), std::invalid_argument);
  EXPECT_THROW(tebm::ReplayBuffer(4, 8, 8, 1.5, 1), std::invalid_argument);
}

TEST(ReplayBuffer, TransactionOrder) {
  tebm::ReplayBuffer b(20, 4, 4, 0.0, 3);
  std::vector<Image> x(5, Image(4, 4));
  auto data = [](std::size_t) { return Image(4, 4, 0.5); };
  EXPECT_THROW(b.refill(std::span<const Image>(x), data), tebm::UsageError);
  b.draw(5);
  EXPECT_TRUE(b.transaction_open());
  EXPECT_THROW(b.draw(5), tebm::UsageError);
  std::vector<Image> wrong(4, Image(4, 4));
  EXPECT_THROW(b.refill(std::span<const Image>(wrong), data), std::invalid_argument);
  b.refill(std::span<const Image>(x), data);
  EXPECT_FALSE(b.transaction_open());
  EXPECT_THROW(b.draw(21), std::invalid_argument);
}

TEST(ReplayBuffer, NoReinitKeepsChainResults) {
  tebm::ReplayBuffer b(50, 4, 4, 0.0, 4);
  for (int t = 0; t < 30; ++t) {
    auto drawn = b.draw(10);
    for (auto& x : drawn) x.values = -1.0 - t;  // marker outside [0, 1]
    b.refill(std::span<const Image>(drawn), [](std::size_t) { return Image(4, 4, 0.5); });
    EXPECT_EQ(b.size(), 50u);
  }
  const auto c = b.counts();
  EXPECT_EQ(c.chain, 300u);
  EXPECT_EQ(c.data + c.noise, 0u);
}

TEST(ReplayBuffer, DrawsDistinctSlots) {
  tebm::ReplayBuffer b(25, 2, 2, 0.0, 5);
  auto drawn = b.draw(25);
  std::set<std::vector<double>> seen;
  for (const auto& x : drawn) seen.insert(std::vector<double>(x.values.begin(), x.values.end()));
  EXPECT_EQ(seen.size(), 25u);
  b.refill(std::span<const Image>(drawn), [](std::size_t) { return Image(2, 2); });
}

TEST(ReplayBuffer, RefillBranchRates) {
  for (double p : {1.0, 0.3}) {
    tebm::ReplayBuffer b(1000, 2, 2, p, 6);
    const int trials = 20000;
    for (int t = 0; t < trials / 20; ++t) {
      auto drawn = b.draw(20);
      b.refill(std::span<const Image>(drawn), [](std::size_t) { return Image(2, 2, 0.5); });
    }
    const auto c = b.counts();
    const double n = trials;
    const double sd = std::sqrt(n * p * 0.5 * (1 - p * 0.5));
    EXPECT_NEAR(double(c.noise), n * p * 0.5, 3 * sd) << p;
    EXPECT_NEAR(double(c.data), n * p * 0.5, 3 * sd) << p;
    EXPECT_EQ(c.chain + c.data + c.noise, std::size_t(trials));
    if (p == 1.0) {
      EXPECT_NEAR(double(c.noise) / n, 0.5, 0.03);
    }
  }
}
