#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "oracles.hpp"
#include "tebm/config.hpp"
#include "tebm/io.hpp"
#include "tebm/phantom.hpp"
#include "tebm/posterior.hpp"

using tebm::Image;
using tebm::ParseError;
using tebm::Sinogram;
namespace io = tebm::io;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir() {
  const fs::path d = fs::temp_directory_path() / ("tebm_io_test_" + std::to_string(::getpid()));
  fs::create_directories(d);
  return d;
}

// Offset of the field that a read of a file cut to `len` bytes fails in.
std::size_t failing_field(std::size_t len, const std::vector<std::pair<std::size_t, std::size_t>>& fields) {
  for (const auto& [start, size] : fields)
    if (len < start + size) return start;
  return len;
}

Sinogram random_sinogram(int nt, int nd, std::uint64_t seed) {
  auto g = tebm::make_geometry(int(std::floor(nd / std::sqrt(2.0))), tebm::uniform_angles(0, std::numbers::pi, nt), nd);
  Sinogram s(g);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  for (Eigen::Index i = 0; i < s.values.size(); ++i) s.values[i] = double(float(n(rng)));
  return s;
}

}  // namespace

TEST(Timg, RoundTripIsBitIdentical) {
  Image x = oracle::random_image(7, 5, 1);
  for (Eigen::Index i = 0; i < x.values.size(); ++i) x.values[i] = double(float(x.values[i]));
  const auto bytes = io::encode_image(x);
  EXPECT_EQ(bytes.size(), 12u + 35u * 4u);
  const Image y = io::decode_image(bytes);
  EXPECT_EQ(y.height, 7);
  EXPECT_EQ(y.width, 5);
  EXPECT_TRUE((y.values == x.values).all());
  EXPECT_EQ(io::encode_image(y), bytes);
  const fs::path p = scratch_dir() / "x.timg";
  io::write_image(p, x);
  EXPECT_FALSE(fs::exists(p.string() + ".tmp"));
  EXPECT_EQ(io::read_file(p), bytes);
  EXPECT_TRUE((io::read_image(p).values == x.values).all());
}

TEST(Timg, TruncationReportsFieldOffset) {
  const auto bytes = io::encode_image(oracle::random_image(3, 3, 2));
  std::vector<std::pair<std::size_t, std::size_t>> fields = {{0, 4}, {4, 4}, {8, 4}};
  for (std::size_t i = 0; i < 9; ++i) fields.emplace_back(12 + 4 * i, 4);
  for (std::size_t len : {0u, 3u, 4u, 7u, 12u, 13u, 30u, 47u}) {
    try {
      io::decode_image(std::vector<char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(len)));
      FAIL() << len;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.offset(), failing_field(len, fields)) << len;
      EXPECT_NE(std::string(e.what()).find("byte offset"), std::string::npos);
    }
  }
}

TEST(Timg, BadMagicAndTrailingBytes) {
  auto bytes = io::encode_image(Image(2, 2, 0.5));
  auto bad = bytes;
  bad[0] = 'X';
  try {
    io::decode_image(bad);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  EXPECT_THROW(io::decode_image(io::encode_sinogram(random_sinogram(2, 4, 1))), ParseError);
  bytes.push_back(0);
  try {
    io::decode_image(bytes);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 28u);
  }
}

TEST(Tsin, PaperGeometrySize) {
  const Sinogram s = random_sinogram(270, 362, 3);
  EXPECT_EQ(io::encode_sinogram(s).size(), std::size_t(12 + 270 * 8 + 270 * 362 * 4));
}

TEST(Tsin, RoundTripIsBitIdentical) {
  const Sinogram s = random_sinogram(9, 23, 4);
  const auto bytes = io::encode_sinogram(s);
  const Sinogram t = io::decode_sinogram(bytes, s.geometry.image_height);
  EXPECT_EQ(t.geometry.angles, s.geometry.angles);
  EXPECT_EQ(t.geometry.n_d, 23);
  EXPECT_EQ(t.geometry.image_height, s.geometry.image_height);
  EXPECT_TRUE((t.values == s.values).all());
  EXPECT_EQ(io::encode_sinogram(t), bytes);
  // Without a size hint the grid is the largest square inscribed in the detector.
  EXPECT_EQ(io::decode_sinogram(bytes).geometry.image_width, 16);
  const fs::path p = scratch_dir() / "s.tsin";
  io::write_sinogram(p, s);
  EXPECT_EQ(io::read_file(p), bytes);
}

TEST(Tsin, TruncationReportsFieldOffset) {
  const auto bytes = io::encode_sinogram(random_sinogram(3, 4, 5));
  std::vector<std::pair<std::size_t, std::size_t>> fields = {{0, 4}, {4, 4}, {8, 4}};
  for (std::size_t i = 0; i < 3; ++i) fields.emplace_back(12 + 8 * i, 8);
  for (std::size_t i = 0; i < 12; ++i) fields.emplace_back(36 + 4 * i, 4);
  for (std::size_t len : {5u, 11u, 12u, 19u, 20u, 35u, 36u, 37u, 83u}) {
    try {
      io::decode_sinogram(std::vector<char>(bytes.begin(), bytes.begin() + std::ptrdiff_t(len)));
      FAIL() << len;
    } catch (const ParseError& e) {
      EXPECT_EQ(e.offset(), failing_field(len, fields)) << len;
    }
  }
}

TEST(Tebm, RoundTripIsBitIdentical) {
  auto m = tebm::build_model<float>(3, 16, 16, 7);
  m.temperature = 2.5;
  const auto bytes = io::encode_model(m);
  // Header: magic, version, n_f, height, width, leak, T.
  EXPECT_EQ(bytes.size(), std::size_t(4 + 1 + 12 + 16) + 4 * std::size_t(m.parameter_count()));
  const auto back = io::decode_model<float>(bytes);
  EXPECT_EQ(back.n_f, 3);
  EXPECT_EQ(back.temperature, 2.5);
  EXPECT_EQ(back.leak, m.leak);
  EXPECT_EQ(back.flatten(), m.flatten());
  EXPECT_EQ(io::encode_model(back), bytes);
  const fs::path p = scratch_dir() / "m.tebm";
  io::write_model(p, m);
  EXPECT_EQ(io::read_model<float>(p).flatten(), m.flatten());
}

TEST(Tebm, RejectsCorruptHeaders) {
  const auto bytes = io::encode_model(tebm::build_model<float>(2, 16, 16, 1));
  auto bad = bytes;
  bad[4] = 9;  // version
  EXPECT_THROW(io::decode_model<float>(bad), ParseError);
  bad = bytes;
  const std::uint32_t h = 20;  // not 4 * 2^s
  std::memcpy(bad.data() + 9, &h, 4);
  EXPECT_THROW(io::decode_model<float>(bad), ParseError);
  bad = bytes;
  const double t = -1.0;
  std::memcpy(bad.data() + 25, &t, 8);
  EXPECT_THROW(io::decode_model<float>(bad), ParseError);
  try {
    io::decode_model<float>(std::vector<char>(bytes.begin(), bytes.begin() + 40));
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset(), 37u);  // header is 33 bytes; second kernel float
  }
}

TEST(Viewing, PgmAndCsv) {
  Image x(2, 3);
  x(0, 1) = 1.0;
  x(1, 2) = 0.5;
  const fs::path p = scratch_dir() / "x.pgm";
  io::write_pgm(p, x);
  const auto bytes = io::read_file(p);
  const std::string header = "P5\n3 2\n255\n";
  ASSERT_EQ(bytes.size(), header.size() + 6);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + std::ptrdiff_t(header.size())), header);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size() + 1]), 255);
  EXPECT_EQ(static_cast<unsigned char>(bytes[header.size()]), 0);
  const std::string csv = io::image_csv(x);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 2);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), ','), 4);
}

TEST(Config, ParsesAndEchoes) {
  const auto c = tebm::RunConfig::parse("# comment\nseed = 42\n  n_f=4  # trailing\n\nbeta = 0.01\nclamp = on\n");
  EXPECT_EQ(c.integer("seed"), 42);
  EXPECT_EQ(c.integer("n_f"), 4);
  EXPECT_DOUBLE_EQ(c.real("beta"), 0.01);
  EXPECT_TRUE(c.sampler().clamp);
  EXPECT_EQ(c.integer("J"), 1000);
  EXPECT_DOUBLE_EQ(c.solver().gamma2, 1.0 / 1.5);
  const std::string echo = c.echo();
  EXPECT_NE(echo.find("seed = 42\n"), std::string::npos);
  EXPECT_EQ(std::size_t(std::count(echo.begin(), echo.end(), '\n')), tebm::config_schema().size());
  // The echo parses back to the same configuration.
  EXPECT_EQ(tebm::RunConfig::parse(echo).echo(), echo);
}

TEST(Config, ErrorsNameTheLine) {
  try {
    tebm::RunConfig::parse("seed = 1\nbogus = 3\n");
    FAIL();
  } catch (const tebm::ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("bogus"), std::string::npos);
  }
}

TEST(Config, FuzzCorpusIsRejectedCleanly) {
  const std::vector<std::string> corpus = {
      "seed",
      "= 3",
      "seed = ",
      "seed = 1\nseed = 2",
      "seed = -1",
      "seed = 1.5",
      "seed = 0x10",
      "n_f = 0",
      "epsilon = 0",
      "epsilon = -1e-3",
      "epsilon = nan",
      "epsilon = inf",
      "beta = 1e999",
      "gamma1 = 1",
      "gamma2 = 0",
      "p_re = 1.5",
      "clamp = maybe",
      "lr = 1e-3x",
      "angle_stop = 4",
      "threads = 0",
      "K = 99999999999999999999",
      "SEED = 1",
      "n_samples = 1",
      "adam_beta1 = 1",
      "sart_relax = 2.5",
      std::string("seed = 1\0", 9),
      "\xff\xfe = 1",
  };
  for (const auto& text : corpus) EXPECT_THROW(tebm::RunConfig::parse(text), tebm::ConfigError) << text;
  // Random byte strings: either parse or raise ConfigError, nothing else.
  std::mt19937_64 rng(11);
  const std::string alphabet = "=#\n \t.-+e0123456789abcdefghijklmnopqrstuvwxyz_";
  for (int trial = 0; trial < 2000; ++trial) {
    std::string s;
    const int len = int(rng() % 40);
    for (int i = 0; i < len; ++i) s += alphabet[rng() % alphabet.size()];
    try {
      tebm::RunConfig::parse(s);
    } catch (const tebm::ConfigError&) {
    }
  }
}

TEST(Phantom, SizeBelowSixteenRejected) {
  std::mt19937_64 rng(1);
  EXPECT_THROW(tebm::shepp_logan(15), std::invalid_argument);
  EXPECT_THROW(tebm::random_discs(8, rng), std::invalid_argument);
  EXPECT_THROW(tebm::grid_overlay(12), std::invalid_argument);
  EXPECT_NO_THROW(tebm::shepp_logan(16));
}

TEST(Phantom, SheppLoganRange) {
  const Image x = tebm::shepp_logan(64);
  EXPECT_DOUBLE_EQ(x.values.maxCoeff(), 1.0);
  EXPECT_EQ(x(0, 0), 0.0);
  EXPECT_EQ(x.values.minCoeff(), 0.0);
}

TEST(Phantom, DiscsDatasetDeterministicAndCalibrated) {
  const auto a = tebm::make_dataset(tebm::DatasetKind::discs, 32, 200, 17);
  const auto b = tebm::make_dataset(tebm::DatasetKind::discs, 32, 200, 17);
  const auto c = tebm::make_dataset(tebm::DatasetKind::discs, 32, 200, 18);
  double mean = 0.0;
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_TRUE((a[i].values == b[i].values).all());
    differs |= !(a[i].values == c[i].values).all();
    EXPECT_GE(a[i].values.minCoeff(), 0.0);
    EXPECT_LE(a[i].values.maxCoeff(), 1.0);
    mean += a[i].values.mean() / double(a.size());
  }
  EXPECT_TRUE(differs);
  EXPECT_GE(mean, 0.05);
  EXPECT_LE(mean, 0.4);
}

TEST(Phantom, OverlaysAndBodiesStayInUnitRange) {
  std::mt19937_64 rng(3);
  for (const Image& x : {tebm::grid_overlay(32), tebm::blobs_overlay(32, 5), tebm::random_body(32, rng)}) {
    EXPECT_GE(x.values.minCoeff(), 0.0);
    EXPECT_LE(x.values.maxCoeff(), 1.0);
    EXPECT_GT(x.values.maxCoeff(), 0.0);
  }
  EXPECT_TRUE((tebm::blobs_overlay(32, 5).values == tebm::blobs_overlay(32, 5).values).all());
}

TEST(Phantom, RotatedBodyIsTheSameDraw) {
  std::mt19937_64 a(8), b(8), c(8);
  const Image plain = tebm::random_body(32, a), zero = tebm::random_body(32, b, 0.0), quarter = tebm::random_body(32, c, 90.0);
  EXPECT_TRUE((plain.values == zero.values).all());
  // The sub-pixel grid is symmetric under quarter turns, so rendering rotated
  // ellipses matches permuting pixels except where cos(pi/2) != 0 flips a
  // sample sitting exactly on an edge.
  EXPECT_LE((quarter.values - tebm::rotate(plain, 90.0).values).abs().mean(), 1e-3);
  EXPECT_EQ(a(), c());
}
