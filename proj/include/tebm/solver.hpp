#pragma once

// Variational reconstruction: minimise D(x, f) + R(x) with accelerated
// proximal gradient. R is handled by gradient steps under Lipschitz
// backtracking, D = ||Ax - f||^2 / (2 sigma^2) through its proximal map, which
// for a tomographic operator is an SPD solve done with a few CG iterations.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tebm/cg.hpp"
#include "tebm/energy_model.hpp"
#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/tomo.hpp"

namespace tebm {

// ---------------------------------------------------------------- data term

enum class DataKind { tomographic, identity, none };

struct DataTerm {
  DataKind kind = DataKind::identity;
  std::shared_ptr<const Projector> projector;  // tomographic only
  Eigen::ArrayXd observation;                  // sinogram values or image values
  double sigma2 = 1.0;
  int height = 0;
  int width = 0;

  static DataTerm tomographic(std::shared_ptr<const Projector> A, const Sinogram& f, double sigma2) {
    if (!A) throw std::invalid_argument("DataTerm: projector required");
    if (f.values.size() != Eigen::Index(A->geometry().sinogram_size())) throw ShapeError("DataTerm: sinogram does not match projector");
    DataTerm d;
    d.kind = DataKind::tomographic;
    d.projector = std::move(A);
    d.observation = f.values;
    d.sigma2 = sigma2;
    d.height = d.projector->geometry().image_height;
    d.width = d.projector->geometry().image_width;
    d.validate();
    return d;
  }
  static DataTerm identity(const Image& f, double sigma2) {
    DataTerm d;
    d.kind = DataKind::identity;
    d.observation = f.values;
    d.sigma2 = sigma2;
    d.height = f.height;
    d.width = f.width;
    d.validate();
    return d;
  }
  /// D == 0 (mode finding of the prior alone).
  static DataTerm none(int height, int width) {
    DataTerm d;
    d.kind = DataKind::none;
    d.height = height;
    d.width = width;
    return d;
  }

  void validate() const {
    if (kind != DataKind::none && !(sigma2 > 0)) throw std::invalid_argument("DataTerm: sigma^2 must be > 0");
  }

  void check(const Image& x) const {
    if (x.height != height || x.width != width) throw ShapeError("DataTerm: image is " + x.size_string() + ", problem expects " +
                                                                 std::to_string(height) + "x" + std::to_string(width));
  }

  Eigen::ArrayXd residual(const Image& x) const {
    check(x);
    switch (kind) {
      case DataKind::tomographic: return projector->forward(x).values - observation;
      case DataKind::identity: return x.values - observation;
      case DataKind::none: break;
    }
    return {};
  }

  double value(const Image& x) const {
    if (kind == DataKind::none) return 0.0;
    return residual(x).square().sum() / (2.0 * sigma2);
  }

  Image gradient(const Image& x) const {
    if (kind == DataKind::none) return Image::zeros_like(x);
    const Eigen::ArrayXd r = residual(x) / sigma2;
    if (kind == DataKind::identity) return Image(height, width, r);
    return projector->adjoint(Sinogram(projector->geometry(), r));
  }

  /// Lipschitz constant of grad D.
  double lipschitz() const {
    switch (kind) {
      case DataKind::tomographic: {
        const double n = projector->norm_estimate(40);
        return n * n / sigma2;
      }
      case DataKind::identity: return 1.0 / sigma2;
      case DataKind::none: return 0.0;
    }
    return 0.0;
  }
};

// ---------------------------------------------------------------- prox

struct ProxResult {
  Image x;
  bool breakdown = false;
};

/// argmin_x alpha D(x) + 1/2 ||x - y||^2.
inline ProxResult prox_data(const Image& y, double alpha, const DataTerm& d, int cg_iters = 10) {
  if (!(alpha >= 0)) throw std::invalid_argument("prox_data: alpha must be >= 0");
  d.check(y);
  if (alpha == 0.0 || d.kind == DataKind::none) return {y, false};
  const double c = alpha / d.sigma2;
  if (d.kind == DataKind::identity) {
    // Pixels already at f stay put; the division alone can round them away.
    Image x = y;
    x.values = (y.values == d.observation).select(y.values, (y.values + c * d.observation) / (1.0 + c));
    return {std::move(x), false};
  }
  const Projector& A = *d.projector;
  Image rhs = y;
  rhs.values += c * A.adjoint(Sinogram(A.geometry(), d.observation)).values;
  auto op = [&](const Image& v) {
    Image out = v;
    out.values += c * A.normal(v).values;
    return out;
  };
  CgResult r = conjugate_gradient(op, rhs, y, cg_iters);
  return {std::move(r.x), r.breakdown};
}

// ---------------------------------------------------------------- regularizers

/// R(x) = 0.
struct ZeroRegularizer {
  double value(const Image&) { return 0.0; }
  double value_and_gradient(const Image& x, Image& g) {
    g = Image::zeros_like(x);
    return 0.0;
  }
};

/// R(x) = weight ||x - center||^2 / 2.
struct QuadraticRegularizer {
  double weight = 1.0;
  Image center;

  double value(const Image& x) {
    const Eigen::ArrayXd d = center.size() ? Eigen::ArrayXd(x.values - center.values) : Eigen::ArrayXd(x.values);
    return 0.5 * weight * d.square().sum();
  }
  double value_and_gradient(const Image& x, Image& g) {
    const Eigen::ArrayXd d = center.size() ? Eigen::ArrayXd(x.values - center.values) : Eigen::ArrayXd(x.values);
    g = Image(x.height, x.width, weight * d);
    return 0.5 * weight * d.square().sum();
  }
};

/// The learned energy R(x, phi) (including its temperature), optionally scaled.
template <typename Real>
class ModelRegularizer {
 public:
  explicit ModelRegularizer(ModelParams<Real> phi, double weight = 1.0) : phi_(std::move(phi)), eval_(phi_), weight_(weight) {}
  ModelRegularizer(const ModelRegularizer& o) : phi_(o.phi_), eval_(phi_), weight_(o.weight_) {}
  ModelRegularizer& operator=(const ModelRegularizer&) = delete;

  const ModelParams<Real>& params() const noexcept { return phi_; }
  double weight() const noexcept { return weight_; }

  double value(const Image& x) { return weight_ * eval_.energies(std::span<const Image>(&x, 1))[0]; }
  double value_and_gradient(const Image& x, Image& g) {
    std::vector<Image> gs;
    const double e = eval_.energies_and_input_grads(std::span<const Image>(&x, 1), gs)[0];
    g = std::move(gs[0]);
    if (weight_ != 1.0) g.values *= weight_;
    return weight_ * e;
  }

 private:
  ModelParams<Real> phi_;
  EnergyEvaluator<Real> eval_;
  double weight_;
};

template <typename R>
concept Regularizer = requires(R r, const Image& x, Image& g) {
  { r.value(x) } -> std::convertible_to<double>;
  { r.value_and_gradient(x, g) } -> std::convertible_to<double>;
};

// ---------------------------------------------------------------- APGD

struct SolverConfig {
  int iterations = 1000;  // J
  double alpha0 = 1e-2;
  double gamma1 = 0.5;
  double gamma2 = 1.0 / 1.5;
  int cg_iters = 10;
  double alpha_min = 1e-12;
  double alpha_max = 1e8;  // growth cap; with R == 0 every step is accepted
  // Leaky-ReLU energies are piecewise linear, and iterates that settle on a
  // convex kink make the backtracking shrink alpha forever. When false, the
  // underflow ends the run and the last accepted iterate is returned.
  bool underflow_throws = true;

  void validate() const {
    if (iterations < 0) throw std::invalid_argument("SolverConfig: J must be >= 0");
    if (!(alpha0 > 0)) throw std::invalid_argument("SolverConfig: alpha0 must be > 0");
    if (!(gamma1 > 0 && gamma1 < 1)) throw std::invalid_argument("SolverConfig: gamma1 must be in (0, 1)");
    if (!(gamma2 > 0 && gamma2 < 1)) throw std::invalid_argument("SolverConfig: gamma2 must be in (0, 1)");
    if (cg_iters < 0) throw std::invalid_argument("SolverConfig: cg_iters must be >= 0");
    if (!(alpha_max >= alpha0)) throw std::invalid_argument("SolverConfig: alpha_max must be >= alpha0");
  }
};

struct ApgdLogEntry {
  int t = 0;
  double energy = 0.0;  // D + R at x^{t+1}
  double reg = 0.0;
  double data = 0.0;
  double alpha = 0.0;  // step used for the accepted candidate
  double margin = 0.0;  // Q - R(x^{t+1}) >= 0 at acceptance
  int backtracks = 0;
  bool prox_breakdown = false;
};

struct ApgdResult {
  Image x;
  std::vector<ApgdLogEntry> log;
  double initial_energy = 0.0;
  double alpha = 0.0;  // final step size
  bool underflow = false;
  int underflow_step = 0;
};

/// Accelerated proximal gradient with Lipschitz backtracking. Momentum
/// t / (t + 3); on acceptance alpha <- alpha / gamma1, on rejection
/// alpha <- gamma2 alpha. Throws DivergenceError when alpha drops below
/// cfg.alpha_min or an energy becomes non-finite.
template <Regularizer Reg>
ApgdResult apgd(const DataTerm& d, Reg& R, const Image& x0, const SolverConfig& cfg,
                const std::function<void(int, const Image&)>& observer = {}) {
  cfg.validate();
  d.check(x0);
  ApgdResult res;
  Image x_prev = x0, x = x0;
  double alpha = cfg.alpha0;
  res.initial_energy = d.value(x0) + R.value(x0);
  if (!std::isfinite(res.initial_energy)) throw DivergenceError("apgd: non-finite initial energy", 0);
  Image g;
  for (int t = 1; t <= cfg.iterations; ++t) {
    Image xbar = x;
    xbar.values += (double(t) / double(t + 3)) * (x.values - x_prev.values);
    const double r_bar = R.value_and_gradient(xbar, g);
    if (!std::isfinite(r_bar) || !g.all_finite()) throw DivergenceError("apgd: non-finite regularizer at extrapolated point", std::size_t(t));
    ApgdLogEntry entry;
    entry.t = t;
    for (;;) {
      Image step = xbar;
      step.values -= alpha * g.values;
      ProxResult p = prox_data(step, alpha, d, cfg.cg_iters);
      const Eigen::ArrayXd diff = p.x.values - xbar.values;
      const double Q = r_bar + (g.values * diff).sum() + diff.square().sum() / (2.0 * alpha);
      const double r_new = R.value(p.x);
      if (std::isfinite(r_new) && r_new <= Q) {
        entry.alpha = alpha;
        entry.margin = Q - r_new;
        entry.reg = r_new;
        entry.prox_breakdown = p.breakdown;
        alpha = std::min(alpha / cfg.gamma1, cfg.alpha_max);
        x_prev = std::move(x);
        x = std::move(p.x);
        break;
      }
      alpha *= cfg.gamma2;
      ++entry.backtracks;
      if (alpha < cfg.alpha_min) {
        if (cfg.underflow_throws) throw DivergenceError("apgd: step size underflow (regularizer not smooth near iterate)", std::size_t(t));
        res.underflow = true;
        res.underflow_step = t;
        break;
      }
    }
    if (res.underflow) break;
    entry.data = d.value(x);
    entry.energy = entry.data + entry.reg;
    if (!std::isfinite(entry.energy)) throw DivergenceError("apgd: non-finite energy", std::size_t(t));
    res.log.push_back(entry);
    if (observer) observer(t, x);
  }
  res.x = std::move(x);
  res.alpha = alpha;
  return res;
}

/// Starting point: FBP for tomographic data, f for identity data, zeros otherwise.
inline Image default_initial_guess(const DataTerm& d) {
  switch (d.kind) {
    case DataKind::tomographic: return fbp(Sinogram(d.projector->geometry(), d.observation));
    case DataKind::identity: return Image(d.height, d.width, d.observation);
    case DataKind::none: break;
  }
  return Image(d.height, d.width);
}

/// MAP estimate argmin D + R from the default initial guess.
template <Regularizer Reg>
ApgdResult map_reconstruct(const DataTerm& d, Reg& R, const SolverConfig& cfg) {
  return apgd(d, R, default_initial_guess(d), cfg);
}

}  // namespace tebm
