#pragma once

// Binary formats (all little-endian):
//   TIMG  "TIMG" u32 height, u32 width, height*width f32 (row-major)
//   TSIN  "TSIN" u32 n_theta, u32 n_d, n_theta f64 angles, n_theta*n_d f32 (angle-major)
//   TEBM  "TEBM" u8 version, u32 n_f, u32 height, u32 width, f64 leak, f64 T,
//         then per layer: kernel (out, in, k, k) f32 row-major, bias f32
// Writers go through a temporary file that is fsync'ed and renamed over the
// target. PGM and CSV exports are for viewing only.

#include <fcntl.h>
#include <unistd.h>

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

#include "tebm/energy_model.hpp"
#include "tebm/errors.hpp"
#include "tebm/image.hpp"
#include "tebm/tomo.hpp"

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

namespace tebm::io {

inline constexpr std::uint8_t kTebmVersion = 1;

// ---------------------------------------------------------------- byte buffers

class Writer {
 public:
  void magic(const char (&m)[5]) { bytes_.insert(bytes_.end(), m, m + 4); }
  template <typename T>
  void put(T v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  const std::vector<char>& bytes() const noexcept { return bytes_; }

 private:
  std::vector<char> bytes_;
};

class Reader {
 public:
  Reader(std::vector<char> bytes, std::string what) : bytes_(std::move(bytes)), what_(std::move(what)) {}

  void magic(const char (&m)[5]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data() + pos_, m, 4) != 0) throw ParseError(what_ + ": bad magic (expected \"" + std::string(m) + "\")", pos_);
    pos_ += 4;
  }
  template <typename T>
  T get(const char* field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void finish() const {
    if (pos_ != bytes_.size()) throw ParseError(what_ + ": trailing bytes", pos_);
  }
  std::size_t offset() const noexcept { return pos_; }

 private:
  void need(std::size_t n, const char* field) const {
    if (bytes_.size() - pos_ < n) throw ParseError(what_ + ": truncated while reading " + field, pos_);
  }
  std::vector<char> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

/// Writes via path.tmp + fsync + rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, const char* data, std::size_t size) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) throw std::system_error(errno, std::generic_category(), "open " + tmp.string());
  std::size_t done = 0;
  while (done < size) {
    const ssize_t n = ::write(fd, data + done, size - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      const int e = errno;
      ::close(fd);
      throw std::system_error(e, std::generic_category(), "write " + tmp.string());
    }
    done += std::size_t(n);
  }
  if (::fsync(fd) != 0 || ::close(fd) != 0) throw std::system_error(errno, std::generic_category(), "fsync " + tmp.string());
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, text.data(), text.size());
}
inline void write_file_atomic(const std::filesystem::path& path, const std::vector<char>& bytes) {
  write_file_atomic(path, bytes.data(), bytes.size());
}

// ---------------------------------------------------------------- TIMG

inline std::vector<char> encode_image(const Image& x) {
  Writer w;
  w.magic("TIMG");
  w.put(std::uint32_t(x.height));
  w.put(std::uint32_t(x.width));
  for (Eigen::Index i = 0; i < x.values.size(); ++i) w.put(float(x.values[i]));
  return w.bytes();
}

inline Image decode_image(std::vector<char> bytes) {
  Reader r(std::move(bytes), "TIMG");
  r.magic("TIMG");
  const auto h = r.get<std::uint32_t>("height");
  const auto w = r.get<std::uint32_t>("width");
  if (h == 0 || w == 0 || h > 65536 || w > 65536) throw ParseError("TIMG: implausible size", 4);
  Image x(static_cast<int>(h), static_cast<int>(w));
  for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values[i] = r.get<float>("pixel data");
  r.finish();
  return x;
}

inline void write_image(const std::filesystem::path& p, const Image& x) { write_file_atomic(p, encode_image(x)); }
inline Image read_image(const std::filesystem::path& p) { return decode_image(read_file(p)); }

// ---------------------------------------------------------------- TSIN

inline std::vector<char> encode_sinogram(const Sinogram& s) {
  Writer w;
  w.magic("TSIN");
  w.put(std::uint32_t(s.geometry.n_theta()));
  w.put(std::uint32_t(s.geometry.n_d));
  for (double a : s.geometry.angles) w.put(a);
  for (Eigen::Index i = 0; i < s.values.size(); ++i) w.put(float(s.values[i]));
  return w.bytes();
}

/// The format does not carry the image grid or detector pitch; they are
/// supplied by the caller (image_size <= 0: largest square whose diagonal
/// fits the detector, spacing 1).
inline Sinogram decode_sinogram(std::vector<char> bytes, int image_size = 0, double det_spacing = 1.0) {
  Reader r(std::move(bytes), "TSIN");
  r.magic("TSIN");
  const auto nt = r.get<std::uint32_t>("n_theta");
  const auto nd = r.get<std::uint32_t>("n_d");
  if (nt == 0 || nd == 0 || nt > 1u << 20 || nd > 1u << 20) throw ParseError("TSIN: implausible dimensions", 4);
  Geometry g;
  g.n_d = int(nd);
  g.det_spacing = det_spacing;
  g.angles.resize(nt);
  for (auto& a : g.angles) a = r.get<double>("angles");
  if (image_size <= 0) image_size = int(std::floor(double(nd) * det_spacing / std::sqrt(2.0)));
  g.image_height = g.image_width = std::max(1, image_size);
  Eigen::ArrayXd v(Eigen::Index(nt) * nd);
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = r.get<float>("sinogram data");
  r.finish();
  g.validate();
  return Sinogram(std::move(g), std::move(v));
}

inline void write_sinogram(const std::filesystem::path& p, const Sinogram& s) { write_file_atomic(p, encode_sinogram(s)); }
inline Sinogram read_sinogram(const std::filesystem::path& p, int image_size = 0, double det_spacing = 1.0) {
  return decode_sinogram(read_file(p), image_size, det_spacing);
}

// ---------------------------------------------------------------- TEBM

template <typename Real>
std::vector<char> encode_model(const ModelParams<Real>& m) {
  Writer w;
  w.magic("TEBM");
  w.put(kTebmVersion);
  w.put(std::uint32_t(m.n_f));
  w.put(std::uint32_t(m.height));
  w.put(std::uint32_t(m.width));
  w.put(m.leak);
  w.put(m.temperature);
  for (const auto& l : m.layers) {
    for (Eigen::Index i = 0; i < l.kernel.size(); ++i) w.put(float(l.kernel.data()[i]));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) w.put(float(l.bias[i]));
  }
  return w.bytes();
}

template <typename Real>
ModelParams<Real> decode_model(std::vector<char> bytes) {
  Reader r(std::move(bytes), "TEBM");
  r.magic("TEBM");
  const auto version = r.get<std::uint8_t>("version");
  if (version != kTebmVersion) throw ParseError("TEBM: unsupported version " + std::to_string(version), 4);
  const auto nf = r.get<std::uint32_t>("n_f");
  const auto h = r.get<std::uint32_t>("height");
  const auto w = r.get<std::uint32_t>("width");
  const double leak = r.get<double>("leak");
  const double temp = r.get<double>("temperature");
  if (nf == 0 || nf > 4096) throw ParseError("TEBM: implausible n_f", 5);
  ModelParams<Real> m;
  try {
    m = model_skeleton<Real>(int(nf), int(h), int(w));
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("TEBM: ") + e.what(), 9);
  }
  if (!(leak >= 0 && leak < 1)) throw ParseError("TEBM: leak out of range", 17);
  if (!(temp > 0) || !std::isfinite(temp)) throw ParseError("TEBM: temperature must be positive", 25);
  m.leak = leak;
  m.temperature = temp;
  for (auto& l : m.layers) {
    for (Eigen::Index i = 0; i < l.kernel.size(); ++i) l.kernel.data()[i] = Real(r.get<float>("kernel"));
    for (Eigen::Index i = 0; i < l.bias.size(); ++i) l.bias[i] = Real(r.get<float>("bias"));
  }
  r.finish();
  return m;
}

template <typename Real>
void write_model(const std::filesystem::path& p, const ModelParams<Real>& m) {
  write_file_atomic(p, encode_model(m));
}
template <typename Real>
ModelParams<Real> read_model(const std::filesystem::path& p) {
  return decode_model<Real>(read_file(p));
}

// ---------------------------------------------------------------- viewing

/// 8-bit binary PGM; values mapped linearly from [lo, hi] (defaults: data range).
inline void write_pgm(const std::filesystem::path& p, const Image& x, double lo = NAN, double hi = NAN) {
  if (std::isnan(lo)) lo = x.values.minCoeff();
  if (std::isnan(hi)) hi = x.values.maxCoeff();
  const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
  std::string out = "P5\n" + std::to_string(x.width) + " " + std::to_string(x.height) + "\n255\n";
  for (Eigen::Index i = 0; i < x.values.size(); ++i)
    out.push_back(char(std::uint8_t(std::clamp(std::lround((x.values[i] - lo) * scale), 0L, 255L))));
  write_file_atomic(p, out);
}

inline std::string image_csv(const Image& x) {
  std::ostringstream os;
  os.precision(9);
  for (int r = 0; r < x.height; ++r) {
    for (int c = 0; c < x.width; ++c) os << (c ? "," : "") << x(r, c);
    os << '\n';
  }
  return os.str();
}

}  // namespace tebm::io
