#pragma once

// Baseline reconstructions (SART, TV-regularized least squares) and PSNR.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <stdexcept>
#include <vector>

#include "tebm/cg.hpp"
#include "tebm/image.hpp"
#include "tebm/tomo.hpp"

namespace tebm {

// ---------------------------------------------------------------- metrics

/// 10 log10(peak^2 / MSE); +infinity when the images are identical.
inline double psnr(const Image& x, const Image& reference, double peak = 1.0) {
  require_same_size(x, reference, "psnr");
  if (!(peak > 0)) throw std::invalid_argument("psnr: peak must be positive");
  const double mse = (x.values - reference.values).square().mean();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

// ---------------------------------------------------------------- gradients

/// Forward differences with Neumann boundary (last row/column difference 0).
struct ImageGradient {
  Image dx, dy;
};

inline ImageGradient forward_gradient(const Image& x) {
  ImageGradient g{Image::zeros_like(x), Image::zeros_like(x)};
  for (int r = 0; r < x.height; ++r)
    for (int c = 0; c < x.width; ++c) {
      if (c + 1 < x.width) g.dx(r, c) = x(r, c + 1) - x(r, c);
      if (r + 1 < x.height) g.dy(r, c) = x(r + 1, c) - x(r, c);
    }
  return g;
}

/// Adjoint of forward_gradient (= minus the discrete divergence).
inline Image gradient_adjoint(const ImageGradient& g) {
  Image out = Image::zeros_like(g.dx);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      double v = 0.0;
      if (c + 1 < out.width) v -= g.dx(r, c);
      if (c > 0) v += g.dx(r, c - 1);
      if (r + 1 < out.height) v -= g.dy(r, c);
      if (r > 0) v += g.dy(r - 1, c);
      out(r, c) = v;
    }
  return out;
}

/// Isotropic total variation.
inline double total_variation(const Image& x) {
  const auto g = forward_gradient(x);
  return (g.dx.values.square() + g.dy.values.square()).sqrt().sum();
}

// ---------------------------------------------------------------- SART

struct SartConfig {
  int iterations = 50;
  double relax = 1.0;
  bool nonneg = true;
  int blocks = 1;  // 1: simultaneous update over all views; n: n interleaved view subsets per sweep
};

namespace detail {
inline constexpr double kSartWeightFloor = 1e-12;
}

/// x <- x + relax C^-1 A^T R^-1 (f - A x), with R and C the row and column
/// sums of A (restricted to the active view block). Optionally clamps to
/// x >= 0 after each sweep. observer(sweep, x) is called after every sweep.
inline Image sart(const Projector& A, const Sinogram& f, const Image& x0, const SartConfig& cfg,
                  const std::function<void(int, const Image&)>& observer = {}) {
  if (!(cfg.relax > 0.0 && cfg.relax <= 2.0)) throw std::invalid_argument("sart: relax must be in (0, 2]");
  if (cfg.iterations < 0) throw std::invalid_argument("sart: iterations must be >= 0");
  const Geometry& g = A.geometry();
  if (x0.height != g.image_height || x0.width != g.image_width) throw ShapeError("sart: x0 does not match geometry image size");
  if (f.values.size() != Eigen::Index(g.sinogram_size())) throw ShapeError("sart: sinogram does not match geometry");
  const int blocks = std::clamp(cfg.blocks, 1, g.n_theta());

  std::vector<Eigen::ArrayXd> row_mask(blocks), inv_rows(blocks), inv_cols(blocks);
  const Eigen::ArrayXd rsum = A.row_sums();
  for (int b = 0; b < blocks; ++b) {
    Sinogram mask(g);
    for (int a = b; a < g.n_theta(); a += blocks) mask.values.segment(Eigen::Index(a) * g.n_d, g.n_d).setOnes();
    row_mask[b] = mask.values;
    inv_rows[b] = mask.values / rsum.max(detail::kSartWeightFloor);
    inv_cols[b] = 1.0 / A.adjoint(mask).values.max(detail::kSartWeightFloor);
  }

  Image x = x0;
  for (int it = 0; it < cfg.iterations; ++it) {
    for (int b = 0; b < blocks; ++b) {
      Sinogram resid = A.forward(x);
      resid.values = (f.values - resid.values) * inv_rows[b];
      x.values += cfg.relax * inv_cols[b] * A.adjoint(resid).values;
    }
    if (cfg.nonneg) x.values = x.values.max(0.0);
    if (observer) observer(it + 1, x);
  }
  return x;
}

inline Image sart(const Sinogram& s, int iterations, double relax, const Image& x0, bool nonneg) {
  SartConfig cfg;
  cfg.iterations = iterations;
  cfg.relax = relax;
  cfg.nonneg = nonneg;
  return sart(Projector(s.geometry), s, x0, cfg);
}

// ---------------------------------------------------------------- least squares

/// CG on the normal equations A^T A x = A^T f, started at zero.
inline Image least_squares_cg(const Projector& A, const Sinogram& f, int iterations, double tol = 0.0) {
  const Image rhs = A.adjoint(f);
  return conjugate_gradient([&](const Image& v) { return A.normal(v); }, rhs, Image::zeros_like(rhs), iterations, tol).x;
}

// ---------------------------------------------------------------- TV

struct TvConfig {
  double lambda = 0.01;
  int iterations = 300;
  double step_safety = 0.99;  // sigma tau L^2 = step_safety^2
  int power_iterations = 30;
};

struct TvTrace {
  std::vector<double> objective;  // objective at every primal iterate
};

inline double tv_objective(const Projector& A, const Sinogram& f, const Image& x, double lambda) {
  const Sinogram r = A.forward(x);
  return 0.5 * (r.values - f.values).square().sum() + lambda * total_variation(x);
}

/// Chambolle-Pock primal-dual iteration for 1/2 ||Ax - f||^2 + lambda TV(x).
/// The gradient operator is rescaled by c = ||A|| / sqrt(8) (and the TV dual
/// bound by 1/c) so both blocks of K = (A, c grad) have comparable norms.
inline Image tv_reconstruct(const Projector& A, const Sinogram& f, const TvConfig& cfg, TvTrace* trace = nullptr,
                            const Image* x_init = nullptr) {
  if (!(cfg.lambda >= 0.0)) throw std::invalid_argument("tv_reconstruct: lambda must be >= 0");
  if (cfg.iterations < 1) throw std::invalid_argument("tv_reconstruct: iterations must be >= 1");
  const Geometry& g = A.geometry();
  const int H = g.image_height, W = g.image_width;

  const double a_norm = A.norm_estimate(cfg.power_iterations);
  const double c = a_norm > 0 ? a_norm / std::sqrt(8.0) : 1.0;

  // Power iteration for ||K||^2 = ||A^T A + c^2 grad^T grad||.
  Image v(H, W);
  {
    std::mt19937_64 rng(12345);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (Eigen::Index i = 0; i < v.values.size(); ++i) v.values[i] = u(rng);
  }
  double L2 = 0.0;
  for (int i = 0; i < cfg.power_iterations; ++i) {
    v.values /= std::sqrt(squared_norm(v));
    Image w = A.normal(v);
    w.values += c * c * gradient_adjoint(forward_gradient(v)).values;
    L2 = std::sqrt(squared_norm(w));
    v = std::move(w);
  }
  const double L = std::sqrt(L2) * 1.01;
  const double tau = cfg.step_safety / L, sigma = cfg.step_safety / L;
  const double bound = cfg.lambda / c;

  Image x = x_init ? *x_init : Image(H, W);
  Image xbar = x;
  Sinogram q(g);
  ImageGradient p{Image(H, W), Image(H, W)};
  if (trace) trace->objective.clear();
  for (int it = 0; it < cfg.iterations; ++it) {
    Sinogram ax = A.forward(xbar);
    q.values = (q.values + sigma * (ax.values - f.values)) / (1.0 + sigma);
    ImageGradient gx = forward_gradient(xbar);
    p.dx.values += sigma * c * gx.dx.values;
    p.dy.values += sigma * c * gx.dy.values;
    const Eigen::ArrayXd mag = (p.dx.values.square() + p.dy.values.square()).sqrt();
    const Eigen::ArrayXd shrink = (mag / std::max(bound, 1e-300)).max(1.0);
    if (bound > 0) {
      p.dx.values /= shrink;
      p.dy.values /= shrink;
    } else {
      p.dx.values.setZero();
      p.dy.values.setZero();
    }
    Image x_new = x;
    x_new.values -= tau * (A.adjoint(q).values + c * gradient_adjoint(p).values);
    xbar.values = 2.0 * x_new.values - x.values;
    x = std::move(x_new);
    if (trace) trace->objective.push_back(tv_objective(A, f, x, cfg.lambda));
  }
  return x;
}

inline Image tv_reconstruct(const Sinogram& s, const TvConfig& cfg) { return tv_reconstruct(Projector(s.geometry), s, cfg); }

/// Picks lambda from a grid by PSNR against a reference image.
struct TvSearchResult {
  double lambda = 0.0;
  double psnr = -std::numeric_limits<double>::infinity();
  Image image;
};

inline TvSearchResult tv_grid_search(const Projector& A, const Sinogram& f, const Image& reference, const std::vector<double>& lambdas,
                                     TvConfig cfg) {
  TvSearchResult best;
  for (double l : lambdas) {
    cfg.lambda = l;
    Image x = tv_reconstruct(A, f, cfg);
    const double p = psnr(x, reference);
    if (p > best.psnr) best = {l, p, std::move(x)};
  }
  return best;
}

/// {1e-3, ..., 1} in steps of 10^(1/4).
inline std::vector<double> default_tv_lambda_grid() {
  std::vector<double> g;
  for (int i = 0; i <= 12; ++i) g.push_back(std::pow(10.0, -3.0 + 0.25 * i));
  return g;
}

}  // namespace tebm
