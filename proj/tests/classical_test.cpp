#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "tebm/classical.hpp"
#include "tebm/phantom.hpp"

using tebm::Image;
using tebm::Projector;
using tebm::Sinogram;

TEST(Psnr, ClosedForms) {
  const Image a = oracle::random_image(8, 8, 1);
  EXPECT_TRUE(std::isinf(tebm::psnr(a, a)));
  Image b = a;
  b.values += 0.1;
  EXPECT_NEAR(tebm::psnr(b, a), 20.0, 1e-9);
  Image chk(8, 8), zero(8, 8);
  for (int r = 0; r < 8; ++r)
    for (int c = 0; c < 8; ++c) chk(r, c) = ((r + c) % 2) ? 0.5 : -0.5;
  EXPECT_NEAR(tebm::psnr(chk, zero), 10.0 * std::log10(1.0 / 0.25), 1e-12);
  EXPECT_NEAR(tebm::psnr(chk, zero, 2.0), 10.0 * std::log10(4.0 / 0.25), 1e-12);
}

TEST(Psnr, ShiftInvarianceAndErrors) {
  const Image x = oracle::random_image(10, 10, 2), y = oracle::random_image(10, 10, 3);
  Image xs = x, ys = y;
  xs.values += 3.7;
  ys.values += 3.7;
  EXPECT_NEAR(tebm::psnr(xs, ys), tebm::psnr(x, y), 1e-9);
  EXPECT_THROW(tebm::psnr(x, Image(10, 9)), tebm::ShapeError);
  EXPECT_THROW(tebm::psnr(x, y, 0.0), std::invalid_argument);
}

TEST(Gradient, AdjointPair) {
  const Image x = oracle::random_image(9, 7, 4, -1, 1);
  tebm::ImageGradient p{oracle::random_image(9, 7, 5, -1, 1), oracle::random_image(9, 7, 6, -1, 1)};
  const auto gx = tebm::forward_gradient(x);
  const double lhs = tebm::dot(gx.dx, p.dx) + tebm::dot(gx.dy, p.dy);
  EXPECT_NEAR(lhs, tebm::dot(x, tebm::gradient_adjoint(p)), 1e-12);
  // Neumann: last column / row differences are zero.
  for (int r = 0; r < 9; ++r) EXPECT_EQ(gx.dx(r, 6), 0.0);
  for (int c = 0; c < 7; ++c) EXPECT_EQ(gx.dy(8, c), 0.0);
  EXPECT_EQ(tebm::total_variation(Image(5, 5, 2.0)), 0.0);
}

TEST(Sart, SinglePixelRecoveredInOneSweep) {
  const auto g = tebm::make_geometry(1, tebm::uniform_angles(0, std::numbers::pi, 4));
  Image truth(1, 1, 0.625);
  const Sinogram f = tebm::forward_project(truth, g);
  const Image x = tebm::sart(f, 1, 1.0, Image(1, 1), true);
  EXPECT_DOUBLE_EQ(x.values[0], 0.625);
}

TEST(Sart, ZeroStaysZero) {
  const auto g = tebm::few_view_geometry(16, 10);
  const Image x = tebm::sart(Sinogram(g), 5, 1.0, Image(16, 16), false);
  EXPECT_EQ(x.values.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Sart, Validation) {
  const auto g = tebm::few_view_geometry(16, 10);
  EXPECT_THROW(tebm::sart(Sinogram(g), 5, 0.0, Image(16, 16), false), std::invalid_argument);
  EXPECT_THROW(tebm::sart(Sinogram(g), 5, 2.5, Image(16, 16), false), std::invalid_argument);
  EXPECT_THROW(tebm::sart(Sinogram(g), 5, 1.0, Image(8, 8), false), tebm::ShapeError);
}

TEST(Sart, ResidualDecreasesOverFirstSweeps) {
  const Image ph = tebm::shepp_logan(32);
  const Projector A(tebm::few_view_geometry(32, 60));
  const Sinogram f = A.forward(ph);
  std::vector<double> res;
  tebm::SartConfig cfg;
  cfg.iterations = 20;
  tebm::sart(A, f, Image(32, 32), cfg, [&](int, const Image& x) { res.push_back(std::sqrt((A.forward(x).values - f.values).square().sum())); });
  ASSERT_EQ(res.size(), 20u);
  const double r0 = std::sqrt(f.values.square().sum());
  EXPECT_LT(res[0], r0);
  for (int i = 1; i < 5; ++i) EXPECT_LT(res[i], res[i - 1]) << i;
}

// Simultaneous SART from the dense matrix with rows in a random order: the
// update is a sum over rows, so the order cannot matter.
TEST(Sart, MatchesDenseFormulaUnderRowPermutation) {
  const auto g = tebm::few_view_geometry(8, 9);
  const Projector A(g);
  const Eigen::MatrixXd D = oracle::dense_projector(g);
  const Image truth = oracle::random_image(8, 8, 12);
  const Sinogram f = A.forward(truth);
  std::vector<int> perm(std::size_t(D.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(3));
  Eigen::MatrixXd P(D.rows(), D.cols());
  Eigen::VectorXd fp(D.rows());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    P.row(Eigen::Index(i)) = D.row(perm[i]);
    fp[Eigen::Index(i)] = f.values[perm[i]];
  }
  const Eigen::VectorXd R = P.rowwise().sum().cwiseMax(1e-12), C = P.colwise().sum().transpose().cwiseMax(1e-12);
  Eigen::VectorXd x = Eigen::VectorXd::Zero(64);
  for (int it = 0; it < 3; ++it) x += 0.8 * (P.transpose() * ((fp - P * x).cwiseQuotient(R))).cwiseQuotient(C);
  tebm::SartConfig cfg;
  cfg.iterations = 3;
  cfg.relax = 0.8;
  cfg.nonneg = false;
  const Image got = tebm::sart(A, f, Image(8, 8), cfg);
  EXPECT_LE((got.values.matrix() - x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Sart, BlockedSweepsAlsoConverge) {
  const Image ph = tebm::shepp_logan(32);
  const Projector A(tebm::few_view_geometry(32, 60));
  const Sinogram f = A.forward(ph);
  tebm::SartConfig cfg;
  cfg.iterations = 10;
  cfg.blocks = 6;
  const Image blocked = tebm::sart(A, f, Image(32, 32), cfg);
  cfg.blocks = 1;
  const Image simultaneous = tebm::sart(A, f, Image(32, 32), cfg);
  EXPECT_GT(tebm::psnr(blocked, ph), tebm::psnr(simultaneous, ph));
}

TEST(Tv, ZeroLambdaMatchesLeastSquares) {
  const auto g = tebm::few_view_geometry(16, 40);
  const Projector A(g);
  const Sinogram f = A.forward(oracle::random_image(16, 16, 21));
  tebm::TvConfig cfg;
  cfg.lambda = 0.0;
  cfg.iterations = 4000;
  const Image tv = tebm::tv_reconstruct(A, f, cfg);
  const Image ls = tebm::least_squares_cg(A, f, 500, 1e-14);
  EXPECT_LE((tv.values - ls.values).abs().mean(), 1e-3);
}

TEST(Tv, LargeLambdaFlattens) {
  const Image ph = tebm::shepp_logan(16);
  const auto g = tebm::few_view_geometry(16, 20);
  const Projector A(g);
  const Sinogram f = A.forward(ph);
  const double scale = A.norm_estimate() * A.norm_estimate();
  tebm::TvConfig cfg;
  cfg.lambda = 1e3 * scale;
  // The constraint grad x = 0 is only reached at the primal-dual O(1/n) rate.
  cfg.iterations = 10000;
  const Image x = tebm::tv_reconstruct(A, f, cfg);
  EXPECT_LE(tebm::total_variation(x), 1e-3 * tebm::total_variation(tebm::fbp(f)));
}

TEST(Tv, ObjectiveDecreasesAfterBurnIn) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    std::mt19937_64 rng(seed);
    const Image ph = tebm::random_discs(32, rng);
    const Projector A(tebm::few_view_geometry(32, 20));
    const Sinogram f = tebm::add_noise(A.forward(ph), 0.01, seed);
    tebm::TvConfig cfg;
    cfg.lambda = 0.05;
    cfg.iterations = 200;
    tebm::TvTrace trace;
    tebm::tv_reconstruct(A, f, cfg, &trace);
    ASSERT_EQ(trace.objective.size(), 200u);
    EXPECT_LT(trace.objective[199], trace.objective[9]) << seed;
  }
}

TEST(Tv, FewViewOrderingOnSheppLogan) {
  const Image ph = tebm::shepp_logan(64);
  const Projector A(tebm::few_view_geometry(64, 20));
  const Sinogram f = tebm::add_noise(A.forward(ph), 0.001, 1);
  const double p_fbp = tebm::psnr(tebm::fbp(f), ph);
  tebm::SartConfig sc;
  sc.iterations = 100;
  const double p_sart = tebm::psnr(tebm::sart(A, f, Image(64, 64), sc), ph);
  tebm::TvConfig tc;
  tc.lambda = 0.03;
  tc.iterations = 500;
  const double p_tv = tebm::psnr(tebm::tv_reconstruct(A, f, tc), ph);
  EXPECT_GT(p_tv, p_sart);
  EXPECT_GT(p_sart, p_fbp);
}

TEST(Tv, GridSearchPicksBest) {
  const Image ph = tebm::shepp_logan(32);
  const Projector A(tebm::few_view_geometry(32, 16));
  const Sinogram f = tebm::add_noise(A.forward(ph), 0.001, 2);
  tebm::TvConfig cfg;
  cfg.iterations = 150;
  const std::vector<double> grid = {1e-3, 1e-2, 1e-1};
  const auto best = tebm::tv_grid_search(A, f, ph, grid, cfg);
  for (double l : grid) {
    cfg.lambda = l;
    EXPECT_GE(best.psnr, tebm::psnr(tebm::tv_reconstruct(A, f, cfg), ph));
  }
  EXPECT_EQ(tebm::default_tv_lambda_grid().size(), 13u);
  EXPECT_NEAR(tebm::default_tv_lambda_grid().back(), 1.0, 1e-12);
}
