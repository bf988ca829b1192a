#pragma once

// Synthetic images: the modified Shepp-Logan phantom, random-disc and
// body-like training distributions, and overlays for corruption experiments.
// Everything is rendered with 4x4 supersampling per pixel.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "tebm/image.hpp"

namespace tebm {

inline constexpr int kMinPhantomSize = 16;

struct Ellipse {
  double value;
  double a, b;    // half axes, unit-square coordinates ([-1, 1]^2)
  double x0, y0;  // centre, y up
  double phi;     // rotation, radians
};

namespace detail {

inline void check_phantom_size(int size) {
  if (size < kMinPhantomSize) throw std::invalid_argument("phantom size must be >= " + std::to_string(kMinPhantomSize));
}

inline bool inside(const Ellipse& e, double x, double y) {
  const double c = std::cos(e.phi), s = std::sin(e.phi);
  const double dx = x - e.x0, dy = y - e.y0;
  const double u = dx * c + dy * s, v = -dx * s + dy * c;
  return (u * u) / (e.a * e.a) + (v * v) / (e.b * e.b) <= 1.0;
}

// Average of f(x, y) over a 4x4 sub-grid of each pixel, with (x, y) in [-1, 1]^2.
template <typename F>
Image supersample(int size, F&& f) {
  constexpr int ss = 4;
  Image img(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      double acc = 0.0;
      for (int i = 0; i < ss; ++i)
        for (int j = 0; j < ss; ++j) {
          const double x = (c + (j + 0.5) / ss) / size * 2.0 - 1.0;
          const double y = 1.0 - (r + (i + 0.5) / ss) / size * 2.0;
          acc += f(x, y);
        }
      img(r, c) = acc / (ss * ss);
    }
  return img;
}

}  // namespace detail

/// Additive ellipse phantom.
inline Image render_ellipses(int size, const std::vector<Ellipse>& ellipses) {
  return detail::supersample(size, [&](double x, double y) {
    double v = 0.0;
    for (const auto& e : ellipses)
      if (detail::inside(e, x, y)) v += e.value;
    return v;
  });
}

/// Modified (Toft) Shepp-Logan phantom: skull 1.0, brain 0.2, background 0.
inline Image shepp_logan(int size) {
  detail::check_phantom_size(size);
  constexpr double deg = std::numbers::pi / 180.0;
  static const std::vector<Ellipse> table = {
      {1.0, 0.69, 0.92, 0.0, 0.0, 0.0},           {-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0},
      {-0.2, 0.11, 0.31, 0.22, 0.0, -18 * deg},   {-0.2, 0.16, 0.41, -0.22, 0.0, 18 * deg},
      {0.1, 0.21, 0.25, 0.0, 0.35, 0.0},          {0.1, 0.046, 0.046, 0.0, 0.1, 0.0},
      {0.1, 0.046, 0.046, 0.0, -0.1, 0.0},        {0.1, 0.046, 0.023, -0.08, -0.605, 0.0},
      {0.1, 0.023, 0.023, 0.0, -0.606, 0.0},      {0.1, 0.023, 0.046, 0.06, -0.605, 0.0}};
  Image img = render_ellipses(size, table);
  img.values = img.values.max(0.0).min(1.0);
  return img;
}

/// Centred uniform disc of the given radius in pixels.
inline Image centered_disc(int size, double radius_px, double value = 1.0) {
  const double r = radius_px * 2.0 / size;
  return detail::supersample(size, [&](double x, double y) { return x * x + y * y <= r * r ? value : 0.0; });
}

struct DiscsConfig {
  int min_count = 2;
  int max_count = 6;
  double min_radius = 0.08;  // fraction of the image extent
  double max_radius = 0.22;
  double min_value = 0.25;
  double max_value = 1.0;
  // Radial shading: intensity v (1 - s (rho / r)^2) with s ~ U[0, max_shading].
  double max_shading = 0.0;
};

/// One random-disc image: discs painted in order (later discs cover earlier
/// ones), all inside the inscribed circle.
inline Image random_discs(int size, std::mt19937_64& rng, const DiscsConfig& cfg = {}) {
  detail::check_phantom_size(size);
  std::uniform_int_distribution<int> count(cfg.min_count, cfg.max_count);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  struct Disc {
    double x, y, r, v, s;
  };
  std::vector<Disc> discs(static_cast<std::size_t>(count(rng)));
  for (auto& d : discs) {
    d.r = 2.0 * (cfg.min_radius + (cfg.max_radius - cfg.min_radius) * u(rng));
    const double reach = std::max(0.0, 0.95 - d.r);
    const double rho = reach * std::sqrt(u(rng)), ang = 2.0 * std::numbers::pi * u(rng);
    d.x = rho * std::cos(ang);
    d.y = rho * std::sin(ang);
    d.v = cfg.min_value + (cfg.max_value - cfg.min_value) * u(rng);
    d.s = cfg.max_shading > 0 ? cfg.max_shading * u(rng) : 0.0;
  }
  return detail::supersample(size, [&](double x, double y) {
    double v = 0.0;
    for (const auto& d : discs) {
      const double q = ((x - d.x) * (x - d.x) + (y - d.y) * (y - d.y)) / (d.r * d.r);
      if (q <= 1.0) v = d.v * (1.0 - d.s * q);
    }
    return v;
  });
}

/// Random body-like slice with a fixed orientation: a wide outer ellipse,
/// two dark lobes side by side, a bright spot near the bottom and a few small
/// inclusions. kappa_degrees renders the same draw rotated counter-clockwise
/// about the centre, without the blur of resampling a pixel grid.
inline Image random_body(int size, std::mt19937_64& rng, double kappa_degrees = 0.0) {
  detail::check_phantom_size(size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  std::vector<Ellipse> e;
  const double a = uni(0.78, 0.92), b = uni(0.52, 0.64), body = uni(0.45, 0.6);
  e.push_back({body, a, b, 0.0, uni(-0.04, 0.04), 0.0});
  const double lx = uni(0.32, 0.42) * a, la = uni(0.2, 0.26) * a / 0.85, lb = uni(0.55, 0.7) * b, ly = uni(0.0, 0.1) * b;
  const double lung = -body + uni(0.05, 0.12);
  e.push_back({lung, la, lb, -lx, ly, uni(-0.1, 0.1)});
  e.push_back({lung, la * uni(0.9, 1.1), lb * uni(0.9, 1.1), lx, ly, uni(-0.1, 0.1)});
  e.push_back({uni(0.3, 0.45), uni(0.07, 0.1), uni(0.07, 0.1), uni(-0.03, 0.03), -b + uni(0.14, 0.2), 0.0});
  const int extra = std::uniform_int_distribution<int>(1, 3)(rng);
  for (int i = 0; i < extra; ++i)
    e.push_back({uni(0.1, 0.3), uni(0.04, 0.08), uni(0.04, 0.08), uni(-0.15, 0.15), uni(-0.35, 0.25) * b, uni(0.0, 3.0)});
  if (kappa_degrees != 0.0) {
    const double k = kappa_degrees * std::numbers::pi / 180.0, c = std::cos(k), s = std::sin(k);
    for (auto& el : e) el = {el.value, el.a, el.b, c * el.x0 - s * el.y0, s * el.x0 + c * el.y0, el.phi + k};
  }
  Image img = render_ellipses(size, e);
  img.values = img.values.max(0.0).min(1.0);
  return img;
}

/// Regular grid of lines (period and thickness in pixels).
inline Image grid_overlay(int size, int period = 6, int thickness = 2, double value = 1.0) {
  detail::check_phantom_size(size);
  Image img(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c)
      if (r % period < thickness || c % period < thickness) img(r, c) = value;
  return img;
}

/// Unnatural blobby content: axis-aligned rectangles and Gaussian bumps with
/// hard corners, values in [0, 1].
inline Image blobs_overlay(int size, std::uint64_t seed) {
  detail::check_phantom_size(size);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Image img(size, size);
  for (int k = 0; k < 4; ++k) {
    const int w = 2 + int(u(rng) * size / 4), h = 2 + int(u(rng) * size / 4);
    const int r0 = int(u(rng) * (size - h)), c0 = int(u(rng) * (size - w));
    const double v = 0.4 + 0.6 * u(rng);
    for (int r = r0; r < r0 + h; ++r)
      for (int c = c0; c < c0 + w; ++c) img(r, c) = v;
  }
  for (int k = 0; k < 3; ++k) {
    const double cr = u(rng) * size, cc = u(rng) * size, s = 1.5 + u(rng) * size / 10;
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        img(r, c) = std::max(img(r, c), std::exp(-((r - cr) * (r - cr) + (c - cc) * (c - cc)) / (2 * s * s)));
  }
  img.values = img.values.min(1.0);
  return img;
}

/// Square mask covering [r0, r0 + h) x [c0, c0 + w).
inline Image box_mask(int size, int r0, int c0, int h, int w) {
  Image m(size, size);
  for (int r = std::max(0, r0); r < std::min(size, r0 + h); ++r)
    for (int c = std::max(0, c0); c < std::min(size, c0 + w); ++c) m(r, c) = 1.0;
  return m;
}

enum class DatasetKind { discs, body };

inline std::vector<Image> make_dataset(DatasetKind kind, int size, int count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<Image> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(kind == DatasetKind::discs ? random_discs(size, rng) : random_body(size, rng));
  return out;
}

}  // namespace tebm
