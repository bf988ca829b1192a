#pragma once

// Maximum-likelihood training of an energy model with persistent Langevin
// chains. The parameter gradient of the negative log-likelihood is estimated
// as mean grad_phi R(x+) - mean grad_phi R(x-), with x+ from the (noise
// smoothed) data and x- from the model via the replay buffer.

#include <Eigen/Core>

#include <atomic>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tebm/energy_model.hpp"
#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/sampler.hpp"

namespace tebm {

/// What the trainer needs from a model: batched energies, input gradients,
/// summed parameter gradients and flat parameter access.
template <typename M>
concept TrainableModel = requires(M m, const M cm, std::span<const Image> batch, std::vector<Image>& grads,
                                  const Eigen::VectorXd& p, std::vector<double>* e) {
  { m.energies(batch) } -> std::convertible_to<std::vector<double>>;
  { m.energies_and_input_grads(batch, grads) } -> std::convertible_to<std::vector<double>>;
  { m.summed_param_grad(batch, e) } -> std::convertible_to<Eigen::VectorXd>;
  { cm.parameters() } -> std::convertible_to<Eigen::VectorXd>;
  m.set_parameters(p);
};

/// The convolutional energy packaged for training.
template <typename Real>
class CnnEnergy {
 public:
  explicit CnnEnergy(ModelParams<Real> params) : params_(std::move(params)), eval_(params_) {}
  CnnEnergy(const CnnEnergy& o) : params_(o.params_), eval_(params_) {}
  CnnEnergy& operator=(const CnnEnergy& o) {
    params_ = o.params_;
    eval_ = EnergyEvaluator<Real>(params_);
    return *this;
  }

  const ModelParams<Real>& params() const noexcept { return params_; }

  std::vector<double> energies(std::span<const Image> b) { return eval_.energies(b); }
  std::vector<double> energies_and_input_grads(std::span<const Image> b, std::vector<Image>& g) {
    return eval_.energies_and_input_grads(b, g);
  }
  Eigen::VectorXd summed_param_grad(std::span<const Image> b, std::vector<double>* e = nullptr) {
    return eval_.summed_param_grad(b, e);
  }
  template <typename Weight>
  Eigen::VectorXd weighted_param_grad(std::span<const Image> b, Weight&& w, std::vector<double>* e = nullptr) {
    return eval_.weighted_param_grad(b, std::forward<Weight>(w), e);
  }
  Eigen::VectorXd parameters() const { return params_.flatten(); }
  void set_parameters(const Eigen::VectorXd& p) { params_.unflatten(p); }

 private:
  ModelParams<Real> params_;
  EnergyEvaluator<Real> eval_;
};

struct TrainConfig {
  double learning_rate = 5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;
  int batch_size = 25;
  int steps = 0;  // n_e
  double sigma_data = 1.5e-2;
  SamplerConfig sampler{};
  std::size_t buffer_capacity = 8000;
  double p_reinit = 0.01;
  double grad_clip = 100.0;  // global-norm clip; <= 0 disables
  // Adds energy_penalty * mean(R(x+)^2 + R(x-)^2) to the loss. Without it a
  // piecewise-linear energy keeps steepening until the chains blow up.
  double energy_penalty = 0.0;
  std::uint64_t seed = 0;
  int checkpoint_interval = 0;  // 0: no periodic checkpoints
  int log_interval = 1;

  void validate() const {
    if (!(learning_rate > 0)) throw std::invalid_argument("TrainConfig: learning rate must be > 0");
    if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1))
      throw std::invalid_argument("TrainConfig: Adam betas must be in [0, 1)");
    if (!(adam_epsilon > 0)) throw std::invalid_argument("TrainConfig: Adam epsilon must be > 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch size must be >= 1");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (!(sigma_data >= 0)) throw std::invalid_argument("TrainConfig: sigma_data must be >= 0");
    if (buffer_capacity < static_cast<std::size_t>(batch_size))
      throw std::invalid_argument("TrainConfig: buffer capacity must be >= batch size");
    if (!(p_reinit >= 0 && p_reinit <= 1)) throw std::invalid_argument("TrainConfig: p_re must be in [0, 1]");
    if (!(energy_penalty >= 0)) throw std::invalid_argument("TrainConfig: energy penalty must be >= 0");
    sampler.validate();
  }
};

// ---------------------------------------------------------------- data

/// Random dataset image plus i.i.d. N(0, sigma_data^2) pixel noise.
inline Image smooth_data_sample(std::span<const Image> dataset, double sigma_data, std::mt19937_64& rng) {
  if (dataset.empty()) throw std::invalid_argument("smooth_data_sample: empty dataset");
  std::uniform_int_distribution<std::size_t> pick(0, dataset.size() - 1);
  Image x = dataset[pick(rng)];
  if (sigma_data > 0) {
    std::normal_distribution<double> n(0.0, sigma_data);
    for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values[i] += n(rng);
  }
  return x;
}

// ---------------------------------------------------------------- gradient

struct NllGradient {
  Eigen::VectorXd gradient;
  double mean_energy_plus = 0.0;
  double mean_energy_minus = 0.0;
};

template <TrainableModel M>
NllGradient nll_grad_estimate(M& model, std::span<const Image> x_plus, std::span<const Image> x_minus) {
  if (x_plus.empty() || x_minus.empty()) throw std::invalid_argument("nll_grad_estimate: batches must be non-empty");
  std::vector<double> ep, em;
  NllGradient out;
  out.gradient = model.summed_param_grad(x_plus, &ep) / double(x_plus.size());
  out.gradient -= model.summed_param_grad(x_minus, &em) / double(x_minus.size());
  for (double e : ep) out.mean_energy_plus += e / double(ep.size());
  for (double e : em) out.mean_energy_minus += e / double(em.size());
  return out;
}

/// Same estimate with the gradient of penalty * mean(R^2) over both batches added.
template <TrainableModel M>
NllGradient nll_grad_estimate(M& model, std::span<const Image> x_plus, std::span<const Image> x_minus, double penalty) {
  if (penalty == 0.0) return nll_grad_estimate(model, x_plus, x_minus);
  if constexpr (requires { model.weighted_param_grad(x_plus, [](double) { return 1.0; }); }) {
    if (x_plus.empty() || x_minus.empty()) throw std::invalid_argument("nll_grad_estimate: batches must be non-empty");
    const double np = double(x_plus.size()), nm = double(x_minus.size());
    std::vector<double> ep, em;
    NllGradient out;
    out.gradient = model.weighted_param_grad(x_plus, [&](double e) { return (1.0 + 2.0 * penalty * e) / np; }, &ep);
    out.gradient += model.weighted_param_grad(x_minus, [&](double e) { return (-1.0 + 2.0 * penalty * e) / nm; }, &em);
    for (double e : ep) out.mean_energy_plus += e / np;
    for (double e : em) out.mean_energy_minus += e / nm;
    return out;
  } else {
    throw std::invalid_argument("nll_grad_estimate: model does not support the energy penalty");
  }
}

// ---------------------------------------------------------------- Adam

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  std::uint64_t step = 0;

  AdamState() = default;
  explicit AdamState(Eigen::Index n) : m(Eigen::VectorXd::Zero(n)), v(Eigen::VectorXd::Zero(n)) {}
};

/// One bias-corrected Adam step applied in place to `params`.
inline void adam_update(Eigen::VectorXd& params, AdamState& state, const Eigen::VectorXd& grad, double lr, double beta1, double beta2,
                        double eps) {
  if (state.m.size() == 0) state = AdamState(params.size());
  if (grad.size() != params.size() || state.m.size() != params.size()) throw ShapeError("adam_update: vector length mismatch");
  if (!grad.allFinite()) throw DivergenceError("adam_update: non-finite gradient", state.step + 1);
  ++state.step;
  state.m = beta1 * state.m + (1.0 - beta1) * grad;
  state.v = beta2 * state.v + (1.0 - beta2) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1, double(state.step));
  const double c2 = 1.0 - std::pow(beta2, double(state.step));
  params.array() -= lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + eps);
}

// ---------------------------------------------------------------- training loop

struct TrainLogEntry {
  int step = 0;
  double energy_plus = 0.0;
  double energy_minus = 0.0;
  double grad_norm = 0.0;
  bool clipped = false;
  double wall_seconds = 0.0;
};

struct TrainResult {
  std::vector<TrainLogEntry> log;
  int steps_done = 0;
  bool interrupted = false;
  ReplayBuffer::RefillCounts refills;
};

struct TrainHooks {
  std::function<void(const TrainLogEntry&)> on_log;
  // Called every checkpoint_interval steps and at the end with the step count.
  std::function<void(int)> on_checkpoint;
  const std::atomic<bool>* stop = nullptr;
};

/// Runs `cfg.steps` updates of the model in place. On divergence the model is
/// restored to the parameters of the last good step, on_checkpoint is
/// invoked, and the DivergenceError is rethrown.
template <TrainableModel M>
TrainResult train(std::span<const Image> dataset, const TrainConfig& cfg, M& model, const TrainHooks& hooks = {}) {
  cfg.validate();
  TrainResult result;
  if (cfg.steps == 0) return result;
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const int h = dataset[0].height, w = dataset[0].width;

  ReplayBuffer buffer(cfg.buffer_capacity, h, w, cfg.p_reinit, cfg.seed ^ 0x5eedb0ffULL);
  std::mt19937_64 data_rng = stream_rng(cfg.seed, 1);
  AdamState adam;
  Eigen::VectorXd params = model.parameters();
  Eigen::VectorXd last_good = params;
  const auto t0 = std::chrono::steady_clock::now();

  auto batch_grad = [&](std::span<const Image> xs, std::vector<Image>& gs) {
    const auto e = model.energies_and_input_grads(xs, gs);
    for (double v : e)
      if (!std::isfinite(v)) throw DivergenceError("train: non-finite energy on a negative chain", 0);
  };

  for (int step = 1; step <= cfg.steps; ++step) {
    if (hooks.stop && hooks.stop->load()) {
      result.interrupted = true;
      break;
    }
    try {
      std::vector<Image> x_plus;
      x_plus.reserve(std::size_t(cfg.batch_size));
      for (int i = 0; i < cfg.batch_size; ++i) x_plus.push_back(smooth_data_sample(dataset, cfg.sigma_data, data_rng));

      std::vector<Image> chains = buffer.draw(std::size_t(cfg.batch_size));
      std::vector<std::mt19937_64> rngs;
      rngs.reserve(chains.size());
      for (int i = 0; i < cfg.batch_size; ++i) rngs.push_back(stream_rng(cfg.seed, 2 + std::uint64_t(step), std::uint64_t(i)));
      try {
        ula_run_batch(chains, batch_grad, cfg.sampler, rngs);
      } catch (const DivergenceError&) {
        throw DivergenceError("train: Langevin chains diverged", std::size_t(step));
      }
      buffer.refill(std::span<const Image>(chains), [&](std::size_t i) { return x_plus[i]; });

      NllGradient g = nll_grad_estimate(model, std::span<const Image>(x_plus), std::span<const Image>(chains), cfg.energy_penalty);
      if (!std::isfinite(g.mean_energy_plus) || !std::isfinite(g.mean_energy_minus))
        throw DivergenceError("train: non-finite energy", std::size_t(step));
      TrainLogEntry entry;
      entry.step = step;
      entry.energy_plus = g.mean_energy_plus;
      entry.energy_minus = g.mean_energy_minus;
      entry.grad_norm = g.gradient.norm();
      if (cfg.grad_clip > 0 && entry.grad_norm > cfg.grad_clip) {
        g.gradient *= cfg.grad_clip / entry.grad_norm;
        entry.clipped = true;
      }
      // The parameters this step was evaluated with are now known to be good.
      last_good = params;
      try {
        adam_update(params, adam, g.gradient, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon);
      } catch (const DivergenceError&) {
        throw DivergenceError("train: non-finite parameter gradient", std::size_t(step));
      }
      model.set_parameters(params);
      entry.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (cfg.log_interval > 0 && (step % cfg.log_interval == 0 || step == cfg.steps)) {
        result.log.push_back(entry);
        if (hooks.on_log) hooks.on_log(entry);
      }
      result.steps_done = step;
      if (hooks.on_checkpoint && cfg.checkpoint_interval > 0 && step % cfg.checkpoint_interval == 0) hooks.on_checkpoint(step);
    } catch (const DivergenceError&) {
      model.set_parameters(last_good);
      if (hooks.on_checkpoint) hooks.on_checkpoint(result.steps_done);
      throw;
    }
  }
  result.refills = buffer.counts();
  if (hooks.on_checkpoint) hooks.on_checkpoint(result.steps_done);
  return result;
}

}  // namespace tebm
