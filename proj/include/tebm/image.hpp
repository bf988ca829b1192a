#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <sstream>
#include <string>

#include "tebm/errors.hpp"

namespace tebm {

/// Row-major grid of attenuation values. Row 0 is the top of the image.
struct Image {
  int height = 0;
  int width = 0;
  Eigen::ArrayXd values;

  Image() = default;
  Image(int h, int w, double fill = 0.0) : height(h), width(w), values(Eigen::ArrayXd::Constant(Eigen::Index(h) * w, fill)) {
    if (h < 0 || w < 0) throw ShapeError("Image: negative extent");
  }
  Image(int h, int w, Eigen::ArrayXd v) : height(h), width(w), values(std::move(v)) {
    if (values.size() != Eigen::Index(h) * w) throw ShapeError("Image: value count does not match extents");
  }

  static Image zeros_like(const Image& o) { return Image(o.height, o.width); }

  std::size_t size() const noexcept { return static_cast<std::size_t>(values.size()); }
  double& operator()(int row, int col) { return values[Eigen::Index(row) * width + col]; }
  double operator()(int row, int col) const { return values[Eigen::Index(row) * width + col]; }

  bool same_size(const Image& o) const noexcept { return height == o.height && width == o.width; }
  bool all_finite() const { return values.isFinite().all(); }

  std::string size_string() const {
    std::ostringstream os;
    os << height << "x" << width;
    return os.str();
  }
};

inline void require_same_size(const Image& a, const Image& b, const char* what) {
  if (!a.same_size(b)) throw ShapeError(std::string(what) + ": image sizes differ (" + a.size_string() + " vs " + b.size_string() + ")");
}

inline double dot(const Image& a, const Image& b) {
  require_same_size(a, b, "dot");
  return (a.values * b.values).sum();
}

inline double squared_norm(const Image& a) { return a.values.square().sum(); }

}  // namespace tebm
