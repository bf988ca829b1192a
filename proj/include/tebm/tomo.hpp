#pragma once

// Parallel-beam acquisition operator (Joseph's method), its exact adjoint,
// filtered backprojection and measurement-noise simulation.
//
// Conventions: pixel (row r, col c) has its centre at
//   x = c - (W - 1) / 2,  y = (H - 1) / 2 - r
// (image origin at the grid centre, y pointing up). Detector bin d sits at
// offset s = (d - (n_d - 1) / 2) * det_spacing from the array centre, and the
// ray for (theta, s) is the line x cos(theta) + y sin(theta) = s.

#include <Eigen/Core>
#include <Eigen/SparseCore>
#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/parallel.hpp"

namespace tebm {

struct Geometry {
  std::vector<double> angles;  // radians, strictly increasing
  int n_d = 0;
  double det_spacing = 1.0;
  int image_height = 0;
  int image_width = 0;

  int n_theta() const noexcept { return static_cast<int>(angles.size()); }
  std::size_t sinogram_size() const noexcept { return angles.size() * static_cast<std::size_t>(n_d); }

  void validate() const {
    if (angles.empty()) throw std::invalid_argument("Geometry: at least one angle required");
    if (n_d < 1) throw std::invalid_argument("Geometry: n_d must be positive");
    if (!(det_spacing > 0)) throw std::invalid_argument("Geometry: det_spacing must be positive");
    if (image_height < 1 || image_width < 1) throw std::invalid_argument("Geometry: image size must be positive");
    for (std::size_t i = 0; i < angles.size(); ++i) {
      if (!std::isfinite(angles[i]) || angles[i] < 0 || angles[i] > std::numbers::pi)
        throw std::invalid_argument("Geometry: angles must lie in [0, pi]");
      if (i > 0 && !(angles[i] > angles[i - 1])) throw std::invalid_argument("Geometry: angles must be strictly increasing");
    }
  }

  bool operator==(const Geometry&) const = default;
};

/// Detector count covering the image diagonal with unit bins.
inline int default_detector_count(int height, int width) {
  return static_cast<int>(std::ceil(std::hypot(double(height), double(width))));
}

/// n angles in [start, stop), endpoint excluded.
inline std::vector<double> uniform_angles(double start, double stop, int n) {
  if (n < 1) throw std::invalid_argument("uniform_angles: n must be positive");
  std::vector<double> a(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) a[i] = start + (stop - start) * i / n;
  return a;
}

inline Geometry make_geometry(int size, std::vector<double> angles, int n_d = 0, double det_spacing = 1.0) {
  Geometry g;
  g.angles = std::move(angles);
  g.n_d = n_d > 0 ? n_d : default_detector_count(size, size);
  g.det_spacing = det_spacing;
  g.image_height = size;
  g.image_width = size;
  g.validate();
  return g;
}

/// Full half-circle [0, pi) with n views.
inline Geometry few_view_geometry(int size, int n_theta, int n_d = 0) {
  return make_geometry(size, uniform_angles(0.0, std::numbers::pi, n_theta), n_d);
}

/// Quarter-circle [0, pi/2) with n views.
inline Geometry limited_angle_geometry(int size, int n_theta, int n_d = 0) {
  return make_geometry(size, uniform_angles(0.0, std::numbers::pi / 2, n_theta), n_d);
}

inline std::vector<std::string> geometry_warnings(const Geometry& g) {
  std::vector<std::string> w;
  const double diag = std::hypot(double(g.image_height), double(g.image_width));
  if (g.n_d * g.det_spacing < diag) {
    std::ostringstream os;
    os << "detector array (" << g.n_d * g.det_spacing << " px) does not cover the image diagonal (" << diag << " px)";
    w.push_back(os.str());
  }
  if (g.angles.size() > 2) {
    const double step = (g.angles.back() - g.angles.front()) / double(g.angles.size() - 1);
    for (std::size_t i = 1; i < g.angles.size(); ++i)
      if (std::abs(g.angles[i] - g.angles[i - 1] - step) > 1e-6 * std::max(1.0, step)) {
        w.emplace_back("angles are not uniformly spaced");
        break;
      }
  }
  return w;
}

struct Sinogram {
  Geometry geometry;
  Eigen::ArrayXd values;  // (angle, detector), detector fastest

  Sinogram() = default;
  explicit Sinogram(Geometry g) : geometry(std::move(g)), values(Eigen::ArrayXd::Zero(Eigen::Index(geometry.sinogram_size()))) {}
  Sinogram(Geometry g, Eigen::ArrayXd v) : geometry(std::move(g)), values(std::move(v)) {
    if (values.size() != Eigen::Index(geometry.sinogram_size())) throw ShapeError("Sinogram: value count != n_theta * n_d");
  }

  double& operator()(int angle, int det) { return values[Eigen::Index(angle) * geometry.n_d + det]; }
  double operator()(int angle, int det) const { return values[Eigen::Index(angle) * geometry.n_d + det]; }
};

namespace detail {

// Calls emit(pixel_index, weight) for every pixel touched by ray (theta, s).
template <typename Emit>
void joseph_ray(const Geometry& g, double theta, double s, Emit&& emit) {
  const int H = g.image_height, W = g.image_width;
  const double c = std::cos(theta), sn = std::sin(theta);
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  if (std::abs(c) >= std::abs(sn)) {
    const double scale = 1.0 / std::abs(c);
    for (int r = 0; r < H; ++r) {
      const double y = cy - r;
      const double u = (s - y * sn) / c + cx;
      const double fl = std::floor(u);
      const int c0 = static_cast<int>(fl);
      const double w1 = u - fl;
      if (c0 >= 0 && c0 < W && w1 < 1.0) emit(r * W + c0, (1.0 - w1) * scale);
      if (c0 + 1 >= 0 && c0 + 1 < W && w1 > 0.0) emit(r * W + c0 + 1, w1 * scale);
    }
  } else {
    const double scale = 1.0 / std::abs(sn);
    for (int col = 0; col < W; ++col) {
      const double x = col - cx;
      const double v = cy - (s - x * c) / sn;
      const double fl = std::floor(v);
      const int r0 = static_cast<int>(fl);
      const double w1 = v - fl;
      if (r0 >= 0 && r0 < H && w1 < 1.0) emit(r0 * W + col, (1.0 - w1) * scale);
      if (r0 + 1 >= 0 && r0 + 1 < H && w1 > 0.0) emit((r0 + 1) * W + col, w1 * scale);
    }
  }
}

inline double detector_offset(const Geometry& g, int d) { return (d - (g.n_d - 1) / 2.0) * g.det_spacing; }

}  // namespace detail

/// The system matrix A of a geometry, stored row-wise (for A x) and
/// column-wise (for A^T y). Both products accumulate in ascending index order
/// with one owner per output entry, so results are independent of the thread
/// count.
class Projector {
 public:
  explicit Projector(Geometry g) : geometry_(std::move(g)) {
    geometry_.validate();
    const int n = geometry_.image_height * geometry_.image_width;
    std::vector<Eigen::Triplet<double, int>> trip;
    trip.reserve(geometry_.sinogram_size() * std::size_t(2 * std::max(geometry_.image_height, geometry_.image_width)));
    for (int a = 0; a < geometry_.n_theta(); ++a) {
      const double theta = geometry_.angles[a];
      for (int d = 0; d < geometry_.n_d; ++d) {
        const int row = a * geometry_.n_d + d;
        detail::joseph_ray(geometry_, theta, detail::detector_offset(geometry_, d),
                           [&](int pix, double w) { trip.emplace_back(row, pix, w); });
      }
    }
    rows_.resize(Eigen::Index(geometry_.sinogram_size()), n);
    rows_.setFromTriplets(trip.begin(), trip.end());
    rows_.makeCompressed();
    cols_ = rows_;
    cols_.makeCompressed();
  }

  const Geometry& geometry() const noexcept { return geometry_; }
  const Eigen::SparseMatrix<double, Eigen::RowMajor, int>& matrix() const noexcept { return rows_; }

  Sinogram forward(const Image& x) const {
    check_image(x);
    Sinogram s(geometry_);
    parallel_for(std::size_t(rows_.rows()), [&](std::size_t b, std::size_t e) {
      for (std::size_t r = b; r < e; ++r) {
        double acc = 0.0;
        for (RowIt it(rows_, Eigen::Index(r)); it; ++it) acc += it.value() * x.values[it.col()];
        s.values[Eigen::Index(r)] = acc;
      }
    });
    return s;
  }

  Image adjoint(const Sinogram& s) const {
    if (s.values.size() != rows_.rows()) throw ShapeError("back_project: sinogram size does not match geometry");
    Image x(geometry_.image_height, geometry_.image_width);
    parallel_for(std::size_t(cols_.cols()), [&](std::size_t b, std::size_t e) {
      for (std::size_t c = b; c < e; ++c) {
        double acc = 0.0;
        for (ColIt it(cols_, Eigen::Index(c)); it; ++it) acc += it.value() * s.values[it.row()];
        x.values[Eigen::Index(c)] = acc;
      }
    });
    return x;
  }

  /// A^T A x.
  Image normal(const Image& x) const { return adjoint(forward(x)); }

  /// Row sums A 1 and column sums A^T 1.
  Eigen::ArrayXd row_sums() const {
    Eigen::ArrayXd r(rows_.rows());
    for (Eigen::Index i = 0; i < rows_.rows(); ++i) {
      double acc = 0.0;
      for (RowIt it(rows_, i); it; ++it) acc += it.value();
      r[i] = acc;
    }
    return r;
  }
  Eigen::ArrayXd column_sums() const {
    Eigen::ArrayXd c(cols_.cols());
    for (Eigen::Index j = 0; j < cols_.cols(); ++j) {
      double acc = 0.0;
      for (ColIt it(cols_, j); it; ++it) acc += it.value();
      c[j] = acc;
    }
    return c;
  }

  /// Largest singular value of A by power iteration on A^T A.
  double norm_estimate(int iterations = 50) const {
    Image v(geometry_.image_height, geometry_.image_width, 1.0);
    double lambda = 0.0;
    for (int i = 0; i < iterations; ++i) {
      const double nv = std::sqrt(squared_norm(v));
      if (nv == 0.0) return 0.0;
      v.values /= nv;
      Image w = normal(v);
      lambda = std::sqrt(squared_norm(w));
      v = std::move(w);
    }
    return std::sqrt(lambda);
  }

 private:
  using RowIt = Eigen::SparseMatrix<double, Eigen::RowMajor, int>::InnerIterator;
  using ColIt = Eigen::SparseMatrix<double, Eigen::ColMajor, int>::InnerIterator;

  void check_image(const Image& x) const {
    if (x.height != geometry_.image_height || x.width != geometry_.image_width) {
      std::ostringstream os;
      os << "forward_project: image is " << x.size_string() << ", geometry expects " << geometry_.image_height << "x"
         << geometry_.image_width;
      throw ShapeError(os.str());
    }
  }

  Geometry geometry_;
  Eigen::SparseMatrix<double, Eigen::RowMajor, int> rows_;
  Eigen::SparseMatrix<double, Eigen::ColMajor, int> cols_;
};

inline Sinogram forward_project(const Image& x, const Geometry& g) { return Projector(g).forward(x); }
inline Image back_project(const Sinogram& s) { return Projector(s.geometry).adjoint(s); }

enum class FbpFilter { ram_lak, none };

namespace detail {
inline std::mutex& fftw_plan_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Zero-padded FFT length used for ramp filtering of n_d-bin rows.
inline int ramp_padded_length(int n_d) {
  int n = 1;
  while (n < 2 * n_d) n <<= 1;
  return n;
}

/// Filters one detector row by |nu| on the zero-padded grid and returns the
/// full padded-length result (the first n_d entries are the filtered row).
inline std::vector<double> ramp_filter_row(const std::vector<double>& row, double det_spacing) {
  const int nd = static_cast<int>(row.size());
  const int n = ramp_padded_length(nd);
  std::vector<double> buf(static_cast<std::size_t>(n), 0.0);
  std::copy(row.begin(), row.end(), buf.begin());
  std::vector<fftw_complex> spec(static_cast<std::size_t>(n / 2 + 1));
  fftw_plan fwd, inv;
  {
    std::lock_guard lock(detail::fftw_plan_mutex());
    fwd = fftw_plan_dft_r2c_1d(n, buf.data(), spec.data(), FFTW_ESTIMATE);
    inv = fftw_plan_dft_c2r_1d(n, spec.data(), buf.data(), FFTW_ESTIMATE);
  }
  fftw_execute(fwd);
  for (int k = 0; k <= n / 2; ++k) {
    const double nu = double(k) / (n * det_spacing);
    spec[k][0] *= nu / n;
    spec[k][1] *= nu / n;
  }
  fftw_execute(inv);
  {
    std::lock_guard lock(detail::fftw_plan_mutex());
    fftw_destroy_plan(fwd);
    fftw_destroy_plan(inv);
  }
  return buf;
}

/// Filtered backprojection. Rows are ramp filtered, then backprojected with
/// linear interpolation along the detector. Views are weighted by the mean
/// angular spacing, so limited-angle data is treated as zero outside its arc.
inline Image fbp(const Sinogram& s, FbpFilter filter = FbpFilter::ram_lak) {
  const Geometry& g = s.geometry;
  g.validate();
  const int nt = g.n_theta(), nd = g.n_d;
  Eigen::ArrayXd q = s.values;
  if (filter == FbpFilter::ram_lak) {
    for (int a = 0; a < nt; ++a) {
      std::vector<double> row(s.values.data() + Eigen::Index(a) * nd, s.values.data() + Eigen::Index(a + 1) * nd);
      const auto f = ramp_filter_row(row, g.det_spacing);
      for (int d = 0; d < nd; ++d) q[Eigen::Index(a) * nd + d] = f[d];
    }
  }
  // Mean angular spacing; equals pi / n_theta for a uniform half-circle.
  const double dtheta = nt > 1 ? (g.angles.back() - g.angles.front()) / (nt - 1) : std::numbers::pi;
  const int H = g.image_height, W = g.image_width;
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0, center = (nd - 1) / 2.0;
  Image out(H, W);
  std::vector<double> cs(nt), sn(nt);
  for (int a = 0; a < nt; ++a) {
    cs[a] = std::cos(g.angles[a]);
    sn[a] = std::sin(g.angles[a]);
  }
  parallel_for(std::size_t(H), [&](std::size_t b, std::size_t e) {
    for (std::size_t r = b; r < e; ++r) {
      const double y = cy - double(r);
      for (int c = 0; c < W; ++c) {
        const double x = c - cx;
        double acc = 0.0;
        for (int a = 0; a < nt; ++a) {
          const double u = (x * cs[a] + y * sn[a]) / g.det_spacing + center;
          const double fl = std::floor(u);
          const int d0 = static_cast<int>(fl);
          const double w1 = u - fl;
          const double* row = q.data() + Eigen::Index(a) * nd;
          double v = 0.0;
          if (d0 >= 0 && d0 < nd) v += (1.0 - w1) * row[d0];
          if (d0 + 1 >= 0 && d0 + 1 < nd) v += w1 * row[d0 + 1];
          acc += v;
        }
        out(int(r), c) = dtheta * acc;
      }
    }
  });
  return out;
}

/// Adds N(0, (level * max(s))^2) to every entry.
inline Sinogram add_noise(const Sinogram& s, double level, std::uint64_t seed) {
  if (!(level >= 0)) throw std::invalid_argument("add_noise: level must be >= 0");
  Sinogram out = s;
  if (level == 0.0 || s.values.size() == 0) return out;
  const double sigma = level * s.values.maxCoeff();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Eigen::Index i = 0; i < out.values.size(); ++i) out.values[i] += sigma * n(rng);
  return out;
}

}  // namespace tebm
