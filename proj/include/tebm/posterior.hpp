#pragma once

// Posterior exploration: Langevin sampling of exp(-(D + R) / beta) with
// streaming per-pixel moments, the corruption/variance experiment and the
// rotation (out-of-distribution) denoising sweep.

#include <Eigen/Core>
#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "tebm/classical.hpp"
#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/sampler.hpp"
#include "tebm/solver.hpp"
#include "tebm/tomo.hpp"

namespace tebm {

/// Single-pass (Welford) per-pixel mean and variance.
class MomentAccumulator {
 public:
  MomentAccumulator() = default;
  MomentAccumulator(int height, int width) : mean_(height, width), m2_(height, width) {}

  void add(const Image& x) {
    if (count_ == 0 && mean_.size() == 0) {
      mean_ = Image::zeros_like(x);
      m2_ = Image::zeros_like(x);
    }
    require_same_size(mean_, x, "MomentAccumulator::add");
    ++count_;
    const Eigen::ArrayXd delta = x.values - mean_.values;
    mean_.values += delta / double(count_);
    m2_.values += delta * (x.values - mean_.values);
  }

  /// Parallel combination (Chan et al.); associative up to rounding.
  void merge(const MomentAccumulator& o) {
    if (o.count_ == 0) return;
    if (count_ == 0) {
      *this = o;
      return;
    }
    require_same_size(mean_, o.mean_, "MomentAccumulator::merge");
    const double n = double(count_) + double(o.count_);
    const Eigen::ArrayXd delta = o.mean_.values - mean_.values;
    mean_.values += delta * (double(o.count_) / n);
    m2_.values += o.m2_.values + delta.square() * (double(count_) * double(o.count_) / n);
    count_ += o.count_;
  }

  std::size_t count() const noexcept { return count_; }
  const Image& mean() const noexcept { return mean_; }
  const Image& m2() const noexcept { return m2_; }

  /// Unbiased variance M2 / (count - 1); needs count >= 2.
  Image variance() const {
    if (count_ < 2) throw std::logic_error("MomentAccumulator::variance: need at least two samples");
    Image v = m2_;
    v.values = (v.values / double(count_ - 1)).max(0.0);
    return v;
  }

 private:
  std::size_t count_ = 0;
  Image mean_;
  Image m2_;
};

struct PosteriorResult {
  MomentAccumulator moments;
  bool partial = false;  // chain diverged; moments cover the samples before that
  std::string error;
  std::vector<MomentAccumulator> blocks;  // per-block moments when blocks were requested
};

struct PosteriorConfig {
  SamplerConfig sampler{};  // sampler.steps is ignored
  int burn_in = 1000;
  int n_samples = 200;
  int stride = 10;
  int blocks = 0;  // >0: also keep moments of this many consecutive sample blocks
  std::uint64_t seed = 0;

  void validate() const {
    sampler.validate();
    if (burn_in < 0) throw std::invalid_argument("posterior: burn_in must be >= 0");
    if (n_samples < 2) throw std::invalid_argument("posterior: n_samples must be >= 2");
    if (stride < 1) throw std::invalid_argument("posterior: stride must be >= 1");
    if (blocks < 0 || (blocks > 0 && n_samples / blocks < 2)) throw std::invalid_argument("posterior: each block needs >= 2 samples");
  }
};

/// Caps epsilon at 1 / L_D so the explicit Langevin step stays stable on the
/// data term.
inline SamplerConfig stable_posterior_sampler(const DataTerm& d, SamplerConfig cfg) {
  const double L = d.lipschitz();
  if (L > 0 && cfg.epsilon * L > 1.0) cfg.epsilon = 1.0 / L;
  return cfg;
}

/// ULA on E = D + R from x0; discards burn_in steps, then records every
/// stride-th state until n_samples are collected.
template <Regularizer Reg>
PosteriorResult posterior_sample(const DataTerm& d, Reg& R, const Image& x0, const PosteriorConfig& cfg,
                                 const std::function<void(int, const Image&)>& dump = {}) {
  cfg.validate();
  d.check(x0);
  PosteriorResult res;
  std::mt19937_64 rng = stream_rng(cfg.seed, 0x9057);
  auto grad = [&](const Image& x) {
    Image g;
    R.value_and_gradient(x, g);
    g.values += d.gradient(x).values;
    return g;
  };
  const int per_block = cfg.blocks > 0 ? cfg.n_samples / cfg.blocks : 0;
  if (cfg.blocks > 0) res.blocks.resize(std::size_t(cfg.blocks));
  Image x = x0;
  const long total = long(cfg.burn_in) + long(cfg.n_samples) * cfg.stride;
  int collected = 0;
  for (long k = 1; k <= total; ++k) {
    try {
      x = ula_step(x, grad, cfg.sampler, rng);
    } catch (const DivergenceError&) {
      res.partial = true;
      res.error = "posterior chain diverged at step " + std::to_string(k);
      return res;
    }
    if (k > cfg.burn_in && (k - cfg.burn_in) % cfg.stride == 0) {
      res.moments.add(x);
      if (per_block > 0 && collected / per_block < cfg.blocks) res.blocks[std::size_t(collected / per_block)].add(x);
      if (dump) dump(collected, x);
      ++collected;
    }
  }
  return res;
}

// ---------------------------------------------------------------- corruption

struct CorruptionReport {
  bool inside_defined = false;
  double clean_inside = std::numeric_limits<double>::quiet_NaN();
  double clean_outside = std::numeric_limits<double>::quiet_NaN();
  double corrupted_inside = std::numeric_limits<double>::quiet_NaN();
  double corrupted_outside = std::numeric_limits<double>::quiet_NaN();
  std::size_t samples = 0;
  // One-sided Welch test of corrupted_inside > clean_inside over block means.
  double t_statistic = std::numeric_limits<double>::quiet_NaN();
  double p_value = std::numeric_limits<double>::quiet_NaN();
  bool partial = false;
  Image clean_mean, clean_variance, corrupted_mean, corrupted_variance, corrupted_scan;
};

/// Opaque overlay: the reference with values replaced by the overlay wherever
/// mask > 0.5.
inline Image apply_overlay(const Image& reference, const Image& overlay, const Image& mask) {
  require_same_size(reference, overlay, "corruption overlay");
  require_same_size(reference, mask, "corruption mask");
  Image out = reference;
  for (Eigen::Index i = 0; i < out.values.size(); ++i)
    if (mask.values[i] > 0.5) out.values[i] = overlay.values[i];
  return out;
}

namespace detail {

inline std::pair<double, double> masked_means(const Image& v, const Image& mask) {
  double in = 0, out = 0;
  std::size_t nin = 0, nout = 0;
  for (Eigen::Index i = 0; i < v.values.size(); ++i) {
    if (mask.values[i] > 0.5) {
      in += v.values[i];
      ++nin;
    } else {
      out += v.values[i];
      ++nout;
    }
  }
  return {nin ? in / double(nin) : std::numeric_limits<double>::quiet_NaN(),
          nout ? out / double(nout) : std::numeric_limits<double>::quiet_NaN()};
}

// One-sided Welch t-test that mean(a) > mean(b).
inline std::pair<double, double> welch_greater(const std::vector<double>& a, const std::vector<double>& b) {
  auto stats = [](const std::vector<double>& v) {
    double m = 0;
    for (double x : v) m += x;
    m /= double(v.size());
    double s = 0;
    for (double x : v) s += (x - m) * (x - m);
    return std::pair{m, s / double(v.size() - 1)};
  };
  const auto [ma, va] = stats(a);
  const auto [mb, vb] = stats(b);
  const double sa = va / double(a.size()), sb = vb / double(b.size());
  const double se = std::sqrt(sa + sb);
  if (se == 0.0) return {ma > mb ? std::numeric_limits<double>::infinity() : 0.0, ma > mb ? 0.0 : 1.0};
  const double t = (ma - mb) / se;
  const double dof = (sa + sb) * (sa + sb) / (sa * sa / double(a.size() - 1) + sb * sb / double(b.size() - 1));
  boost::math::students_t dist(std::max(1.0, dof));
  return {t, boost::math::cdf(boost::math::complement(dist, t))};
}

}  // namespace detail

/// Posterior variance inside/outside `mask` for a clean scan and for the same
/// scan with `overlay` pasted into the mask, both measured with geometry g.
template <Regularizer Reg>
CorruptionReport corruption_experiment(const Image& reference, const Image& overlay, const Image& mask, const Geometry& g,
                                       double noise_level, double sigma2, Reg& R, PosteriorConfig cfg) {
  require_same_size(reference, overlay, "corruption_experiment");
  require_same_size(reference, mask, "corruption_experiment");
  if (cfg.blocks < 2) cfg.blocks = 10;
  CorruptionReport rep;
  const bool any_inside = (mask.values > 0.5).any();
  rep.inside_defined = any_inside;
  rep.corrupted_scan = apply_overlay(reference, overlay, mask);
  auto A = std::make_shared<const Projector>(g);

  auto run = [&](const Image& scan, std::uint64_t noise_seed) {
    const Sinogram f = add_noise(A->forward(scan), noise_level, noise_seed);
    const DataTerm d = DataTerm::tomographic(A, f, sigma2);
    PosteriorConfig c = cfg;
    c.sampler = stable_posterior_sampler(d, cfg.sampler);
    return posterior_sample(d, R, fbp(f), c);
  };
  const PosteriorResult clean = run(reference, cfg.seed + 1);
  const PosteriorResult corrupt = run(rep.corrupted_scan, cfg.seed + 1);
  rep.partial = clean.partial || corrupt.partial;
  rep.samples = std::min(clean.moments.count(), corrupt.moments.count());
  if (rep.samples < 2) return rep;
  rep.clean_mean = clean.moments.mean();
  rep.clean_variance = clean.moments.variance();
  rep.corrupted_mean = corrupt.moments.mean();
  rep.corrupted_variance = corrupt.moments.variance();
  std::tie(rep.clean_inside, rep.clean_outside) = detail::masked_means(rep.clean_variance, mask);
  std::tie(rep.corrupted_inside, rep.corrupted_outside) = detail::masked_means(rep.corrupted_variance, mask);
  if (!any_inside) return rep;
  if (!rep.partial) {
    std::vector<double> a, b;
    for (const auto& blk : corrupt.blocks)
      if (blk.count() >= 2) a.push_back(detail::masked_means(blk.variance(), mask).first);
    for (const auto& blk : clean.blocks)
      if (blk.count() >= 2) b.push_back(detail::masked_means(blk.variance(), mask).first);
    if (a.size() >= 2 && b.size() >= 2) std::tie(rep.t_statistic, rep.p_value) = detail::welch_greater(a, b);
  }
  return rep;
}

// ---------------------------------------------------------------- rotation

/// Bilinear rotation by kappa degrees (counter-clockwise) about the image
/// centre; samples falling outside the grid read as 0.
inline Image rotate(const Image& x, double kappa_degrees) {
  double c, s;
  const double q = kappa_degrees / 90.0;
  if (q == std::round(q)) {
    // Lattice-aligned: use exact cosines so the result is a pure permutation.
    const int k = ((static_cast<int>(std::round(q)) % 4) + 4) % 4;
    constexpr int cs[4] = {1, 0, -1, 0}, ss[4] = {0, 1, 0, -1};
    c = cs[k];
    s = ss[k];
  } else {
    const double r = kappa_degrees * std::numbers::pi / 180.0;
    c = std::cos(r);
    s = std::sin(r);
  }
  const double cx = (x.width - 1) / 2.0, cy = (x.height - 1) / 2.0;
  Image out = Image::zeros_like(x);
  auto px = [&](int r, int col) { return (r >= 0 && r < x.height && col >= 0 && col < x.width) ? x(r, col) : 0.0; };
  for (int r = 0; r < x.height; ++r)
    for (int col = 0; col < x.width; ++col) {
      // Output point in centred (x right, y up) coordinates, rotated back by -kappa.
      const double ox = col - cx, oy = cy - r;
      const double sx = c * ox + s * oy, sy = -s * ox + c * oy;
      const double fc = sx + cx, fr = cy - sy;
      const double r0f = std::floor(fr), c0f = std::floor(fc);
      const int r0 = int(r0f), c0 = int(c0f);
      const double wr = fr - r0f, wc = fc - c0f;
      double v = 0.0;
      if (wr == 0.0 && wc == 0.0) {
        v = px(r0, c0);
      } else {
        v = (1 - wr) * ((1 - wc) * px(r0, c0) + wc * px(r0, c0 + 1)) + wr * ((1 - wc) * px(r0 + 1, c0) + wc * px(r0 + 1, c0 + 1));
      }
      out(r, col) = v;
    }
  return out;
}

// ---------------------------------------------------------------- OOD sweep

struct OodRow {
  double kappa = 0.0;
  double psnr = 0.0;        // mean PSNR of the MAP estimate against rot_kappa(x)
  double psnr_noisy = 0.0;  // mean PSNR of the noisy input
};

/// For each kappa: x_k = rot_k(x_i) + eta with eta ~ N(0, (level max(rot_k x_i))^2),
/// MAP-denoise with D = ||x - x_k||^2 / (2 sigma^2), and record PSNR against
/// rot_k(x_i). sigma^2 is the noise variance (1 when noise_level == 0).
/// render(i, kappa) supplies rot_kappa(x_i).
template <Regularizer Reg, typename Render>
  requires std::is_invocable_r_v<Image, Render&, std::size_t, double>
std::vector<OodRow> ood_denoise_sweep(Render&& render, std::size_t count, Reg& R, std::span<const double> kappas, double noise_level,
                                      const SolverConfig& solver, std::uint64_t seed) {
  if (count == 0) throw std::invalid_argument("ood_denoise_sweep: empty image set");
  std::vector<OodRow> rows;
  for (double kappa : kappas) {
    OodRow row;
    row.kappa = kappa;
    for (std::size_t i = 0; i < count; ++i) {
      const Image truth = render(i, kappa);
      Image noisy = truth;
      double sigma2 = 1.0;
      if (noise_level > 0) {
        const double sigma = noise_level * truth.values.maxCoeff();
        std::mt19937_64 rng = stream_rng(seed, i);
        std::normal_distribution<double> n(0.0, sigma);
        for (Eigen::Index j = 0; j < noisy.values.size(); ++j) noisy.values[j] += n(rng);
        sigma2 = sigma * sigma;
      }
      const DataTerm d = DataTerm::identity(noisy, sigma2);
      const ApgdResult r = map_reconstruct(d, R, solver);
      row.psnr += psnr(r.x, truth) / double(count);
      row.psnr_noisy += psnr(noisy, truth) / double(count);
    }
    rows.push_back(row);
  }
  return rows;
}

/// Same sweep on a fixed image set, rotated with bilinear interpolation.
template <Regularizer Reg>
std::vector<OodRow> ood_denoise_sweep(std::span<const Image> images, Reg& R, std::span<const double> kappas, double noise_level,
                                      const SolverConfig& solver, std::uint64_t seed) {
  return ood_denoise_sweep([&](std::size_t i, double kappa) { return rotate(images[i], kappa); }, images.size(), R, kappas, noise_level,
                           solver, seed);
}

/// Reference curve (kappa in degrees, PSNR in dB) reported for the full-scale
/// model; kept for comparison output only.
inline const std::vector<std::pair<double, double>>& reference_ood_curve() {
  static const std::vector<std::pair<double, double>> curve = {
      {0, 33.39}, {1, 32.62}, {2, 31.81}, {3, 31.43}, {4, 30.73}, {5, 30.25}, {10, 29.62},
      {15, 28.50}, {20, 28.33}, {25, 28.17}, {30, 28.09}, {35, 28.35}, {40, 28.20}};
  return curve;
}

}  // namespace tebm
