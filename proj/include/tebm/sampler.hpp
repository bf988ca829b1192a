#pragma once

// Unadjusted Langevin dynamics
//   x' = x - (eps / 2) grad E(x) + sqrt(beta eps) xi,   xi ~ N(0, Id)
// and the persistent replay buffer that feeds training chains.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "tebm/errors.hpp"
#include "tebm/image.hpp"

namespace tebm {

struct SamplerConfig {
  double epsilon = 1.0;
  double beta = 7.5e-3;
  int steps = 500;
  // Optional per-step clamp of pixel values (divergence guard, off by default).
  bool clamp = false;
  double clamp_low = -0.1;
  double clamp_high = 1.1;

  void validate() const {
    if (!(epsilon > 0)) throw std::invalid_argument("SamplerConfig: epsilon must be > 0");
    if (!(beta >= 0)) throw std::invalid_argument("SamplerConfig: beta must be >= 0");
    if (steps < 0) throw std::invalid_argument("SamplerConfig: steps must be >= 0");
    if (clamp && !(clamp_low < clamp_high)) throw std::invalid_argument("SamplerConfig: clamp_low must be < clamp_high");
  }
};

/// Independent stream for (seed, stream index); chains seeded this way give
/// the same draws regardless of how they are scheduled.
inline std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t substream = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), static_cast<std::uint32_t>(stream),
                    static_cast<std::uint32_t>(stream >> 32), static_cast<std::uint32_t>(substream),
                    static_cast<std::uint32_t>(substream >> 32)};
  return std::mt19937_64(seq);
}

namespace detail {

inline void langevin_update(Image& x, const Image& grad, const SamplerConfig& cfg, std::mt19937_64& rng) {
  if (!grad.same_size(x)) throw ShapeError("ula_step: gradient shape differs from state");
  if (!grad.all_finite()) throw DivergenceError("ula_step: non-finite energy gradient", 0);
  const double noise = std::sqrt(cfg.beta * cfg.epsilon);
  x.values -= 0.5 * cfg.epsilon * grad.values;
  if (noise > 0.0) {
    std::normal_distribution<double> n(0.0, 1.0);
    for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values[i] += noise * n(rng);
  }
  if (cfg.clamp) x.values = x.values.max(cfg.clamp_low).min(cfg.clamp_high);
}

}  // namespace detail

/// One Langevin step. grad_energy: (const Image&) -> Image.
template <typename Grad>
Image ula_step(const Image& x, Grad&& grad_energy, const SamplerConfig& cfg, std::mt19937_64& rng) {
  Image next = x;
  const Image g = grad_energy(x);
  detail::langevin_update(next, g, cfg, rng);
  return next;
}

/// Trajectory tap: called with (step, state) for step 0 and every tap_stride
/// steps thereafter.
using TrajectoryTap = std::function<void(int, const Image&)>;

template <typename Grad>
Image ula_run(const Image& x0, Grad&& grad_energy, const SamplerConfig& cfg, std::mt19937_64& rng, const TrajectoryTap& tap = {},
              int tap_stride = 1) {
  cfg.validate();
  Image x = x0;
  if (tap) tap(0, x);
  for (int k = 1; k <= cfg.steps; ++k) {
    try {
      x = ula_step(x, grad_energy, cfg, rng);
    } catch (const DivergenceError& e) {
      throw DivergenceError("ula_run: chain diverged", static_cast<std::size_t>(k));
    }
    if (tap && tap_stride > 0 && k % tap_stride == 0) tap(k, x);
  }
  return x;
}

/// Runs a batch of chains in lock step. batch_grad(span<const Image>, vector<Image>&)
/// fills one gradient per chain; chain i draws its noise from rngs[i] only.
template <typename BatchGrad>
void ula_run_batch(std::vector<Image>& chains, BatchGrad&& batch_grad, const SamplerConfig& cfg, std::vector<std::mt19937_64>& rngs) {
  cfg.validate();
  if (rngs.size() != chains.size()) throw std::invalid_argument("ula_run_batch: need one rng per chain");
  std::vector<Image> grads;
  for (int k = 1; k <= cfg.steps; ++k) {
    batch_grad(std::span<const Image>(chains), grads);
    for (std::size_t i = 0; i < chains.size(); ++i) {
      try {
        detail::langevin_update(chains[i], grads[i], cfg, rngs[i]);
      } catch (const DivergenceError&) {
        throw DivergenceError("ula_run_batch: chain " + std::to_string(i) + " diverged", static_cast<std::size_t>(k));
      }
    }
  }
}

inline Image uniform_image(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image x(h, w);
  for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values[i] = u(rng);
  return x;
}

/// Persistent chain states. A training step first draws a batch of distinct
/// slots, runs Langevin from them, then refills exactly those slots. The
/// draw/refill pair is the only way to change entries.
class ReplayBuffer {
 public:
  struct RefillCounts {
    std::size_t chain = 0;
    std::size_t data = 0;
    std::size_t noise = 0;
  };

  ReplayBuffer(std::size_t capacity, int height, int width, double p_reinit, std::uint64_t seed)
      : height_(height), width_(width), p_reinit_(p_reinit), rng_(seed) {
    if (capacity == 0) throw std::invalid_argument("ReplayBuffer: capacity must be positive");
    if (!(p_reinit >= 0.0 && p_reinit <= 1.0)) throw std::invalid_argument("ReplayBuffer: p_re must be in [0, 1]");
    entries_.reserve(capacity);
    for (std::size_t i = 0; i < capacity; ++i) entries_.push_back(uniform_image(height, width, rng_));
  }

  std::size_t size() const {
    std::lock_guard lock(mutex_);
    return entries_.size();
  }
  double reinit_probability() const noexcept { return p_reinit_; }
  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

  const Image& entry(std::size_t i) const { return entries_.at(i); }
  RefillCounts counts() const {
    std::lock_guard lock(mutex_);
    return counts_;
  }
  bool transaction_open() const {
    std::lock_guard lock(mutex_);
    return pending_.has_value();
  }

  /// Draws `batch` distinct slots uniformly at random and opens a transaction.
  std::vector<Image> draw(std::size_t batch) {
    std::lock_guard lock(mutex_);
    if (pending_) throw UsageError("ReplayBuffer::draw: previous draw has not been refilled");
    if (batch == 0 || batch > entries_.size()) throw std::invalid_argument("ReplayBuffer::draw: batch must be in [1, capacity]");
    std::vector<std::size_t> idx(entries_.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates: the first `batch` positions become the sample.
    for (std::size_t i = 0; i < batch; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng_)]);
    }
    idx.resize(batch);
    std::vector<Image> out;
    out.reserve(batch);
    for (auto i : idx) out.push_back(entries_[i]);
    pending_ = std::move(idx);
    return out;
  }

  /// Closes the transaction: slot i receives x_minus[i] with probability
  /// 1 - p_re, otherwise data_sample(i) or uniform noise with equal chance.
  template <typename DataSampler>
  void refill(std::span<const Image> x_minus, DataSampler&& data_sample) {
    std::lock_guard lock(mutex_);
    if (!pending_) throw UsageError("ReplayBuffer::refill: no open draw (refill before draw)");
    if (x_minus.size() != pending_->size()) throw std::invalid_argument("ReplayBuffer::refill: batch size differs from draw");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < pending_->size(); ++i) {
      Image next;
      if (u(rng_) > p_reinit_) {
        next = x_minus[i];
        ++counts_.chain;
      } else if (u(rng_) > 0.5) {
        next = data_sample(i);
        ++counts_.data;
      } else {
        next = uniform_image(height_, width_, rng_);
        ++counts_.noise;
      }
      if (next.height != height_ || next.width != width_) throw ShapeError("ReplayBuffer::refill: image size mismatch");
      entries_[(*pending_)[i]] = std::move(next);
    }
    pending_.reset();
  }

 private:
  int height_;
  int width_;
  double p_reinit_;
  std::mt19937_64 rng_;
  std::vector<Image> entries_;
  std::optional<std::vector<std::size_t>> pending_;
  RefillCounts counts_;
  mutable std::mutex mutex_;
};

}  // namespace tebm
