#pragma once

// Dense feature-map storage and 2-D convolution with exact reverse-mode
// derivatives. Convolutions are lowered to im2col + GEMM so that a whole batch
// of images goes through one matrix product per layer.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <sstream>
#include <string>
#include <vector>

#include "tebm/errors.hpp"

namespace tebm {

template <typename Real>
using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Real>
using Vector = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

/// Feature maps stored channel-outermost: (channels, batch, height, width),
/// row-major. A single image is the batch == 1 case, i.e. plain (c, h, w).
template <typename Real>
struct Tensor {
  int channels = 0;
  int batch = 0;
  int height = 0;
  int width = 0;
  // Aligned so Eigen's vectorised reductions peel the same way on every run.
  std::vector<Real, Eigen::aligned_allocator<Real>> data;

  Tensor() = default;
  Tensor(int c, int n, int h, int w, Real fill = Real(0))
      : channels(c), batch(n), height(h), width(w),
        data(static_cast<std::size_t>(c) * n * h * w, fill) {
    if (c < 0 || n < 0 || h < 0 || w < 0) throw ShapeError("Tensor: negative extent");
  }
  static Tensor single(int c, int h, int w, Real fill = Real(0)) { return Tensor(c, 1, h, w, fill); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(height) * width; }

  Real& at(int c, int n, int y, int x) {
    return data[((static_cast<std::size_t>(c) * batch + n) * height + y) * width + x];
  }
  Real at(int c, int n, int y, int x) const {
    return data[((static_cast<std::size_t>(c) * batch + n) * height + y) * width + x];
  }

  bool same_shape(const Tensor& o) const noexcept {
    return channels == o.channels && batch == o.batch && height == o.height && width == o.width;
  }
  std::string shape_string() const {
    std::ostringstream os;
    os << "(" << channels << ", " << batch << ", " << height << ", " << width << ")";
    return os.str();
  }

  Eigen::Map<RowMatrix<Real>> as_matrix() {
    return {data.data(), channels, static_cast<Eigen::Index>(batch) * height * width};
  }
  Eigen::Map<const RowMatrix<Real>> as_matrix() const {
    return {data.data(), channels, static_cast<Eigen::Index>(batch) * height * width};
  }
};

inline int conv_output_extent(int in_extent, int k, int stride, int padding) {
  const int span = in_extent + 2 * padding - k;
  if (span < 0) return 0;
  return span / stride + 1;
}

/// One convolution: kernel is (out_ch, in_ch, k, k) row-major, held as an
/// out_ch x (in_ch*k*k) matrix so the forward pass is a single GEMM.
template <typename Real>
struct ConvLayer {
  int out_ch = 0;
  int in_ch = 0;
  int k = 1;
  int stride = 1;
  int padding = 0;
  RowMatrix<Real> kernel;
  Vector<Real> bias;

  ConvLayer() = default;
  ConvLayer(int out_channels, int in_channels, int kernel_size, int stride_, int padding_)
      : out_ch(out_channels), in_ch(in_channels), k(kernel_size), stride(stride_), padding(padding_),
        kernel(RowMatrix<Real>::Zero(out_channels, in_channels * kernel_size * kernel_size)),
        bias(Vector<Real>::Zero(out_channels)) {
    validate();
  }

  std::size_t parameter_count() const noexcept {
    return static_cast<std::size_t>(out_ch) * in_ch * k * k + static_cast<std::size_t>(out_ch);
  }

  void validate() const {
    if (out_ch < 1 || in_ch < 1) throw ShapeError("ConvLayer: channel counts must be positive");
    if (k < 1) throw ShapeError("ConvLayer: kernel size must be >= 1");
    if (stride != 1 && stride != 2) throw ShapeError("ConvLayer: stride must be 1 or 2");
    if (padding < 0) throw ShapeError("ConvLayer: padding must be non-negative");
    if (kernel.rows() != out_ch || kernel.cols() != in_ch * k * k || bias.size() != out_ch)
      throw ShapeError("ConvLayer: kernel/bias storage does not match declared extents");
  }

  Real& weight(int o, int i, int ky, int kx) { return kernel(o, (i * k + ky) * k + kx); }
  Real weight(int o, int i, int ky, int kx) const { return kernel(o, (i * k + ky) * k + kx); }
};

template <typename Real>
struct ConvGrads {
  Tensor<Real> grad_input;
  RowMatrix<Real> grad_kernel;
  Vector<Real> grad_bias;
};

namespace detail {

template <typename Real>
void check_conv_input(const Tensor<Real>& input, const ConvLayer<Real>& layer, int& out_h, int& out_w) {
  layer.validate();
  if (input.channels != layer.in_ch) {
    std::ostringstream os;
    os << "conv2d: input has " << input.channels << " channels, layer expects " << layer.in_ch
       << " (input shape " << input.shape_string() << ")";
    throw ShapeError(os.str());
  }
  out_h = conv_output_extent(input.height, layer.k, layer.stride, layer.padding);
  out_w = conv_output_extent(input.width, layer.k, layer.stride, layer.padding);
  if (out_h < 1 || out_w < 1) {
    std::ostringstream os;
    os << "conv2d: input " << input.height << "x" << input.width << " too small for k=" << layer.k
       << " stride=" << layer.stride << " pad=" << layer.padding;
    throw ShapeError(os.str());
  }
}

// cols(r, j): r = (ci, ky, kx), j = (n, oy, ox).
template <typename Real>
void im2col(const Tensor<Real>& in, const ConvLayer<Real>& layer, int out_h, int out_w, RowMatrix<Real>& cols) {
  const int k = layer.k, s = layer.stride, p = layer.padding;
  const Eigen::Index ncols = static_cast<Eigen::Index>(in.batch) * out_h * out_w;
  cols.resize(static_cast<Eigen::Index>(in.channels) * k * k, ncols);
  for (int c = 0; c < in.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        Real* row = cols.row((c * k + ky) * k + kx).data();
        for (int n = 0; n < in.batch; ++n) {
          for (int oy = 0; oy < out_h; ++oy) {
            const int y = oy * s - p + ky;
            Real* dst = row + (static_cast<std::size_t>(n) * out_h + oy) * out_w;
            if (y < 0 || y >= in.height) {
              std::fill(dst, dst + out_w, Real(0));
              continue;
            }
            const Real* src = &in.data[((static_cast<std::size_t>(c) * in.batch + n) * in.height + y) * in.width];
            for (int ox = 0; ox < out_w; ++ox) {
              const int x = ox * s - p + kx;
              dst[ox] = (x >= 0 && x < in.width) ? src[x] : Real(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add columns back onto the input grid.
template <typename Real>
void col2im(const RowMatrix<Real>& cols, const ConvLayer<Real>& layer, int out_h, int out_w, Tensor<Real>& out) {
  const int k = layer.k, s = layer.stride, p = layer.padding;
  std::fill(out.data.begin(), out.data.end(), Real(0));
  for (int c = 0; c < out.channels; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const Real* row = cols.row((c * k + ky) * k + kx).data();
        for (int n = 0; n < out.batch; ++n) {
          for (int oy = 0; oy < out_h; ++oy) {
            const int y = oy * s - p + ky;
            if (y < 0 || y >= out.height) continue;
            const Real* src = row + (static_cast<std::size_t>(n) * out_h + oy) * out_w;
            Real* dst = &out.data[((static_cast<std::size_t>(c) * out.batch + n) * out.height + y) * out.width];
            for (int ox = 0; ox < out_w; ++ox) {
              const int x = ox * s - p + kx;
              if (x >= 0 && x < out.width) dst[x] += src[ox];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Reusable buffers for one layer application; keeps the lowered input so the
/// backward pass does not have to rebuild it.
template <typename Real>
struct ConvCache {
  RowMatrix<Real> cols;
  int out_h = 0;
  int out_w = 0;
};

/// Cross-correlation with zero padding plus per-channel bias.
template <typename Real>
Tensor<Real> conv2d_forward(const Tensor<Real>& input, const ConvLayer<Real>& layer, ConvCache<Real>& cache) {
  int out_h = 0, out_w = 0;
  detail::check_conv_input(input, layer, out_h, out_w);
  cache.out_h = out_h;
  cache.out_w = out_w;
  detail::im2col(input, layer, out_h, out_w, cache.cols);
  Tensor<Real> out(layer.out_ch, input.batch, out_h, out_w);
  auto om = out.as_matrix();
  om.noalias() = layer.kernel * cache.cols;
  om.colwise() += layer.bias;
  return out;
}

template <typename Real>
Tensor<Real> conv2d_forward(const Tensor<Real>& input, const ConvLayer<Real>& layer) {
  ConvCache<Real> cache;
  return conv2d_forward(input, layer, cache);
}

/// Backward pass from a cache filled by conv2d_forward on the same input.
/// With want_params == false only grad_input is produced (grad_kernel and
/// grad_bias are left empty).
template <typename Real>
ConvGrads<Real> conv2d_backward(const Tensor<Real>& input, const ConvLayer<Real>& layer, const Tensor<Real>& grad_out,
                                const ConvCache<Real>& cache, bool want_params = true, bool want_input = true) {
  int out_h = 0, out_w = 0;
  detail::check_conv_input(input, layer, out_h, out_w);
  if (grad_out.channels != layer.out_ch || grad_out.batch != input.batch || grad_out.height != out_h ||
      grad_out.width != out_w) {
    std::ostringstream os;
    os << "conv2d_backward: grad_out shape " << grad_out.shape_string() << " does not match forward output ("
       << layer.out_ch << ", " << input.batch << ", " << out_h << ", " << out_w << ")";
    throw ShapeError(os.str());
  }
  if (cache.out_h != out_h || cache.out_w != out_w || cache.cols.cols() != grad_out.as_matrix().cols())
    throw ShapeError("conv2d_backward: cache does not belong to this input");

  ConvGrads<Real> g;
  const auto gm = grad_out.as_matrix();
  if (want_params) {
    g.grad_kernel.noalias() = gm * cache.cols.transpose();
    g.grad_bias = gm.rowwise().sum();
  }
  if (want_input) {
    RowMatrix<Real> grad_cols;
    grad_cols.noalias() = layer.kernel.transpose() * gm;
    g.grad_input = Tensor<Real>(input.channels, input.batch, input.height, input.width);
    detail::col2im(grad_cols, layer, out_h, out_w, g.grad_input);
  }
  return g;
}

template <typename Real>
ConvGrads<Real> conv2d_backward(const Tensor<Real>& input, const ConvLayer<Real>& layer, const Tensor<Real>& grad_out) {
  int out_h = 0, out_w = 0;
  detail::check_conv_input(input, layer, out_h, out_w);
  ConvCache<Real> cache;
  cache.out_h = out_h;
  cache.out_w = out_w;
  detail::im2col(input, layer, out_h, out_w, cache.cols);
  return conv2d_backward(input, layer, grad_out, cache);
}

template <typename Real>
inline Real leaky_relu(Real x, Real leak) noexcept {
  return x >= Real(0) ? x : leak * x;
}

// Derivative at exactly zero is taken as 1.
template <typename Real>
inline Real leaky_relu_derivative(Real x, Real leak) noexcept {
  return x >= Real(0) ? Real(1) : leak;
}

template <typename Real>
Tensor<Real> leaky_relu(const Tensor<Real>& input, Real leak) {
  if (!(leak >= Real(0) && leak < Real(1))) throw std::invalid_argument("leaky_relu: leak must be in [0, 1)");
  Tensor<Real> out = input;
  for (auto& v : out.data) v = leaky_relu(v, leak);
  return out;
}

/// Chain rule through leaky ReLU: grad *= derivative(pre_activation).
template <typename Real>
void leaky_relu_backward_inplace(const Tensor<Real>& pre_activation, Real leak, Tensor<Real>& grad) {
  if (!pre_activation.same_shape(grad)) throw ShapeError("leaky_relu_backward: shape mismatch");
  for (std::size_t i = 0; i < grad.data.size(); ++i) grad.data[i] *= leaky_relu_derivative(pre_activation.data[i], leak);
}

}  // namespace tebm
