#pragma once

// Convolutional energy R(x, phi): a strided encoder that reduces an image to a
// single scalar. Layer stack for an input of extent 4 * 2^s:
//
//   conv(3x3, stride 1, pad 1)            1      -> n_f
//   s x conv(4x4, stride 2, pad 1)        n_f    -> 2, 4, 8, 12, 16 x n_f
//   conv(4x4, stride 1, pad 0)            last   -> 1
//
// with a leaky ReLU after every layer except the last. At 128x128 all five
// stride-2 stages are present; smaller inputs drop trailing stages so the map
// entering the final layer is always 4x4.

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/tensor.hpp"

namespace tebm {

inline constexpr int kMaxStrideStages = 5;
inline constexpr int kWidthMultipliers[kMaxStrideStages + 1] = {1, 2, 4, 8, 12, 16};

/// Number of stride-2 stages for a square input extent, or -1 if unsupported.
inline int stride_stages_for(int extent) {
  for (int s = 0; s <= kMaxStrideStages; ++s)
    if (extent == (4 << s)) return s;
  return -1;
}

inline void check_model_input_size(int height, int width) {
  const int s = stride_stages_for(height);
  if (s < 0 || height != width) {
    std::ostringstream os;
    os << "unsupported model input size " << height << "x" << width
       << ": inputs must be square with extent 4*2^s for s in [0, 5] (4, 8, 16, 32, 64 or 128)";
    throw ShapeError(os.str());
  }
}

template <typename Real>
struct ModelParams {
  std::vector<ConvLayer<Real>> layers;
  int n_f = 0;
  int height = 0;
  int width = 0;
  double leak = 0.05;
  double temperature = 1.0;

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.parameter_count();
    return n;
  }

  /// Layer-major flat ordering: for each layer, kernel (out, in, k, k)
  /// row-major, then bias.
  Eigen::VectorXd flatten() const {
    Eigen::VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index pos = 0;
    for (const auto& l : layers) {
      const Eigen::Index nk = l.kernel.size();
      flat.segment(pos, nk) = Eigen::Map<const Vector<Real>>(l.kernel.data(), nk).template cast<double>();
      pos += nk;
      flat.segment(pos, l.out_ch) = l.bias.template cast<double>();
      pos += l.out_ch;
    }
    return flat;
  }

  void unflatten(const Eigen::VectorXd& flat) {
    if (flat.size() != static_cast<Eigen::Index>(parameter_count()))
      throw ShapeError("ModelParams::unflatten: expected " + std::to_string(parameter_count()) + " values, got " +
                       std::to_string(flat.size()));
    Eigen::Index pos = 0;
    for (auto& l : layers) {
      const Eigen::Index nk = l.kernel.size();
      Eigen::Map<Vector<Real>>(l.kernel.data(), nk) = flat.segment(pos, nk).template cast<Real>();
      pos += nk;
      l.bias = flat.segment(pos, l.out_ch).template cast<Real>();
      pos += l.out_ch;
    }
  }

  template <typename Other>
  ModelParams<Other> cast() const {
    ModelParams<Other> o;
    o.n_f = n_f;
    o.height = height;
    o.width = width;
    o.leak = leak;
    o.temperature = temperature;
    for (const auto& l : layers) {
      ConvLayer<Other> c(l.out_ch, l.in_ch, l.k, l.stride, l.padding);
      c.kernel = l.kernel.template cast<Other>();
      c.bias = l.bias.template cast<Other>();
      o.layers.push_back(std::move(c));
    }
    return o;
  }
};

/// Layer shapes only (all weights zero).
template <typename Real>
ModelParams<Real> model_skeleton(int n_f, int height, int width) {
  if (n_f < 1) throw std::invalid_argument("build_model: n_f must be positive");
  check_model_input_size(height, width);
  const int stages = stride_stages_for(height);
  ModelParams<Real> m;
  m.n_f = n_f;
  m.height = height;
  m.width = width;
  int ch = n_f * kWidthMultipliers[0];
  m.layers.emplace_back(ch, 1, 3, 1, 1);
  for (int s = 1; s <= stages; ++s) {
    const int next = n_f * kWidthMultipliers[s];
    m.layers.emplace_back(next, ch, 4, 2, 1);
    ch = next;
  }
  m.layers.emplace_back(1, ch, 4, 1, 0);
  return m;
}

/// Kernels ~ N(0, 1/(in_ch k^2)), biases zero.
template <typename Real>
ModelParams<Real> build_model(int n_f, int height, int width, std::uint64_t seed) {
  ModelParams<Real> m = model_skeleton<Real>(n_f, height, width);
  std::mt19937_64 rng(seed);
  for (auto& l : m.layers) {
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(double(l.in_ch) * l.k * l.k));
    for (Eigen::Index i = 0; i < l.kernel.size(); ++i) l.kernel.data()[i] = static_cast<Real>(dist(rng));
  }
  return m;
}

template <typename Real>
Tensor<Real> images_to_tensor(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("empty image batch");
  const int h = images[0].height, w = images[0].width;
  Tensor<Real> t(1, static_cast<int>(images.size()), h, w);
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height != h || images[n].width != w) throw ShapeError("image batch has mixed sizes");
    for (Eigen::Index i = 0; i < images[n].values.size(); ++i)
      t.data[n * t.plane() + static_cast<std::size_t>(i)] = static_cast<Real>(images[n].values[i]);
  }
  return t;
}

/// Evaluates R(., phi) and its derivatives on batches. Holds forward-pass
/// buffers, so one evaluator per thread; the parameters are shared read-only.
template <typename Real>
class EnergyEvaluator {
 public:
  explicit EnergyEvaluator(const ModelParams<Real>& params) : p_(&params) {}

  const ModelParams<Real>& params() const { return *p_; }

  std::vector<double> energies(std::span<const Image> batch) {
    forward(batch);
    return read_energies();
  }

  /// Energies and d(energy_n)/d(x_n) for every image in the batch.
  std::vector<double> energies_and_input_grads(std::span<const Image> batch, std::vector<Image>& grads) {
    forward(batch);
    auto e = read_energies();
    backward(false, true);
    const Tensor<Real>& gi = grad_input_;
    grads.resize(batch.size());
    for (std::size_t n = 0; n < batch.size(); ++n) {
      Image& g = grads[n];
      if (!g.same_size(batch[n])) g = Image(batch[n].height, batch[n].width);
      for (Eigen::Index i = 0; i < g.values.size(); ++i) g.values[i] = static_cast<double>(gi.data[n * gi.plane() + std::size_t(i)]);
    }
    return e;
  }

  /// Sum over the batch of d(energy)/d(phi), layer-major flat order.
  Eigen::VectorXd summed_param_grad(std::span<const Image> batch, std::vector<double>* energies_out = nullptr) {
    return weighted_param_grad(batch, [](double) { return 1.0; }, energies_out);
  }

  /// Sum over the batch of weight(energy_n) * d(energy_n)/d(phi).
  template <typename Weight>
  Eigen::VectorXd weighted_param_grad(std::span<const Image> batch, Weight&& weight, std::vector<double>* energies_out = nullptr) {
    forward(batch);
    const auto e = read_energies();
    if (energies_out) *energies_out = e;
    std::vector<double> seeds(e.size());
    for (std::size_t n = 0; n < e.size(); ++n) seeds[n] = weight(e[n]);
    backward(true, false, &seeds);
    Eigen::VectorXd flat(static_cast<Eigen::Index>(p_->parameter_count()));
    Eigen::Index pos = 0;
    for (std::size_t l = 0; l < p_->layers.size(); ++l) {
      const auto& gk = layer_grads_[l].grad_kernel;
      flat.segment(pos, gk.size()) = Eigen::Map<const Vector<Real>>(gk.data(), gk.size()).template cast<double>();
      pos += gk.size();
      const auto& gb = layer_grads_[l].grad_bias;
      flat.segment(pos, gb.size()) = gb.template cast<double>();
      pos += gb.size();
    }
    return flat;
  }

 private:
  void forward(std::span<const Image> batch) {
    const auto& P = *p_;
    for (const auto& img : batch)
      if (img.height != P.height || img.width != P.width) {
        std::ostringstream os;
        os << "energy: image is " << img.height << "x" << img.width << ", model expects " << P.height << "x" << P.width;
        throw ShapeError(os.str());
      }
    const std::size_t L = P.layers.size();
    inputs_.resize(L);
    pre_.resize(L);
    caches_.resize(L);
    inputs_[0] = images_to_tensor<Real>(batch);
    const Real leak = static_cast<Real>(P.leak);
    for (std::size_t l = 0; l < L; ++l) {
      pre_[l] = conv2d_forward(inputs_[l], P.layers[l], caches_[l]);
      if (l + 1 < L) {
        inputs_[l + 1] = pre_[l];
        for (auto& v : inputs_[l + 1].data) v = leaky_relu(v, leak);
      }
    }
  }

  std::vector<double> read_energies() const {
    const Tensor<Real>& out = pre_.back();
    std::vector<double> e(static_cast<std::size_t>(out.batch));
    for (int n = 0; n < out.batch; ++n) e[n] = static_cast<double>(out.data[n]) / p_->temperature;
    return e;
  }

  void backward(bool want_params, bool want_input, const std::vector<double>* seeds = nullptr) {
    const auto& P = *p_;
    const std::size_t L = P.layers.size();
    const Real leak = static_cast<Real>(P.leak);
    Tensor<Real> grad(1, pre_.back().batch, 1, 1, static_cast<Real>(1.0 / P.temperature));
    if (seeds)
      for (int n = 0; n < grad.batch; ++n) grad.data[std::size_t(n)] = static_cast<Real>((*seeds)[std::size_t(n)] / P.temperature);
    layer_grads_.resize(L);
    for (std::size_t l = L; l-- > 0;) {
      if (l + 1 < L) leaky_relu_backward_inplace(pre_[l], leak, grad);
      const bool need_input = (l > 0) || want_input;
      auto g = conv2d_backward(inputs_[l], P.layers[l], grad, caches_[l], want_params, need_input);
      if (want_params) {
        layer_grads_[l].grad_kernel = std::move(g.grad_kernel);
        layer_grads_[l].grad_bias = std::move(g.grad_bias);
      }
      if (l > 0)
        grad = std::move(g.grad_input);
      else if (want_input)
        grad_input_ = std::move(g.grad_input);
    }
  }

  const ModelParams<Real>* p_;
  std::vector<Tensor<Real>> inputs_;
  std::vector<Tensor<Real>> pre_;
  std::vector<ConvCache<Real>> caches_;
  std::vector<ConvGrads<Real>> layer_grads_;
  Tensor<Real> grad_input_;
};

template <typename Real>
double energy(const Image& x, const ModelParams<Real>& phi) {
  EnergyEvaluator<Real> ev(phi);
  return ev.energies(std::span<const Image>(&x, 1))[0];
}

template <typename Real>
Image grad_input(const Image& x, const ModelParams<Real>& phi) {
  EnergyEvaluator<Real> ev(phi);
  std::vector<Image> g;
  ev.energies_and_input_grads(std::span<const Image>(&x, 1), g);
  return std::move(g[0]);
}

template <typename Real>
Eigen::VectorXd grad_params(const Image& x, const ModelParams<Real>& phi) {
  EnergyEvaluator<Real> ev(phi);
  return ev.summed_param_grad(std::span<const Image>(&x, 1));
}

}  // namespace tebm
