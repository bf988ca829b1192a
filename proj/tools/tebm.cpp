// tebm: command-line front end for phantoms, projections, classical and
// learned reconstructions, training and posterior experiments.
//
// Relative file arguments resolve against the output directory (--out, else
// $TEBM_OUT_DIR, else "."). Every run writes <subcommand>.manifest.json there;
// `tebm rerun --manifest FILE` replays it and compares artifact hashes.

#include <CLI11.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <fftw3.h>

#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "tebm/classical.hpp"
#include "tebm/config.hpp"
#include "tebm/energy_model.hpp"
#include "tebm/io.hpp"
#include "tebm/parallel.hpp"
#include "tebm/phantom.hpp"
#include "tebm/posterior.hpp"
#include "tebm/sampler.hpp"
#include "tebm/solver.hpp"
#include "tebm/tomo.hpp"
#include "tebm/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace tebm;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitOk = 0, kExitUsage = 1, kExitNumeric = 2;

std::atomic<bool> g_stop{false};
extern "C" void on_sigint(int) { g_stop.store(true); }

struct CliUsage : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::vector<char>& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

std::string file_sha256(const fs::path& p) { return sha256_hex(io::read_file(p)); }

// Options of a subcommand that name files or config keys; collected so the
// manifest can replay them.
enum class Role { input, output, value };
struct Arg {
  std::string flag;
  std::string value;
  Role role = Role::value;
  std::string key;  // config key this flag overrides, if any
  CLI::Option* opt = nullptr;
};

struct Run {
  RunConfig cfg;
  fs::path out_dir;
  std::string subcommand;
  std::vector<std::string> argv;
  std::map<std::string, Arg> args;
  std::map<std::string, std::map<std::string, Arg>> sub_args;
  json inputs = json::array(), outputs = json::array();
  std::vector<std::string> config_sets;

  fs::path resolve(const std::string& p) const {
    const fs::path q(p);
    return q.is_absolute() ? q : out_dir / q;
  }
  std::string get(const std::string& flag) const { return args.at(flag).value; }

  fs::path input(const std::string& flag) {
    const fs::path p = fs::absolute(resolve(get(flag))).lexically_normal();
    if (!fs::exists(p)) throw CliUsage(flag + ": file not found: " + p.string());
    args.at(flag).value = p.string();
    inputs.push_back({{"flag", flag}, {"path", p.string()}, {"bytes", fs::file_size(p)}, {"sha256", file_sha256(p)}});
    return p;
  }
  fs::path output(const std::string& flag) { return resolve(get(flag)); }
  void record_output(const fs::path& p) {
    const fs::path rel = fs::relative(p, out_dir);
    const bool inside = !rel.empty() && rel.native()[0] != '.';
    outputs.push_back({{"path", inside ? rel.string() : fs::absolute(p).string()}, {"bytes", fs::file_size(p)}, {"sha256", file_sha256(p)}});
  }
  void write_image(const fs::path& p, const Image& x) {
    io::write_image(p, x);
    record_output(p);
  }
  void write_text(const fs::path& p, const std::string& s) {
    io::write_file_atomic(p, s);
    record_output(p);
  }
};

Arg& add(CLI::App* sub, Run& run, const std::string& flag, const std::string& def, const std::string& help, Role role = Role::value,
         const std::string& key = {}) {
  Arg& a = run.sub_args[sub->get_name()][flag];
  a.flag = flag;
  a.value = def;
  a.role = role;
  a.key = key;
  a.opt = sub->add_option(flag, a.value, help);
  if (!def.empty()) a.opt->default_str(def);
  return a;
}

// Flags that map onto config keys are applied after parsing so they are
// range-checked by the same schema as config files.
void apply_key_flags(Run& run) {
  for (auto& [flag, a] : run.args)
    if (!a.key.empty() && a.opt->count() > 0) run.cfg.set(a.key, a.value);
}

std::uint64_t seed_of(const RunConfig& c) { return std::uint64_t(c.integer("seed")); }

// ---------------------------------------------------------------- helpers

Geometry geometry_for(Run& run, int size, const std::string& problem) {
  RunConfig& c = run.cfg;
  const int nt = int(c.integer("n_theta")), nd = int(c.integer("n_d"));
  double start = c.real("angle_start"), stop = c.real("angle_stop");
  if (problem == "limited-angle") {
    // Written back so the manifest replays the range actually used.
    if (!c.has("angle_stop")) {
      stop = std::numbers::pi / 2;
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.17g", stop);
      c.set("angle_stop", buf);
    }
  } else if (problem != "few-view" && problem != "custom") {
    throw CliUsage("--problem must be few-view, limited-angle or custom (got '" + problem + "')");
  }
  if (!(stop > start)) throw CliUsage("angle_stop must exceed angle_start");
  Geometry g = make_geometry(size, uniform_angles(start, stop, nt), nd, c.real("det_spacing"));
  for (const auto& w : geometry_warnings(g)) std::cerr << "warning: " << w << "\n";
  return g;
}

double sigma2_for(const RunConfig& c, const Sinogram& f) {
  if (c.real("sigma2") > 0) return c.real("sigma2");
  const double s = c.real("noise_level") * f.values.abs().maxCoeff();
  if (!(s > 0)) throw CliUsage("sigma2 is 0 and the noise level gives no variance; set sigma2 explicitly");
  return s * s;
}

// TSIN does not store the image grid. With default detectors the grid follows
// from n_d, so image_size is only trusted when it agrees with the file.
Sinogram read_sino(const Run& run, const fs::path& p) {
  int size = int(run.cfg.integer("image_size"));
  Sinogram s = io::read_sinogram(p, size, run.cfg.real("det_spacing"));
  if (run.cfg.integer("n_d") == 0 && run.cfg.real("det_spacing") == 1.0 && default_detector_count(size, size) != s.geometry.n_d)
    s = io::read_sinogram(p, 0, 1.0);
  return s;
}

ModelParams<float> load_model(Run& run, const std::string& flag) {
  if (run.get(flag).empty()) throw CliUsage("checkpoint required: pass " + flag + " <file.tebm> (see `tebm train`)");
  return io::read_model<float>(run.input(flag));
}

DiscsConfig discs_config(const RunConfig& c) {
  DiscsConfig d;
  d.max_shading = c.real("disc_shading");
  return d;
}

std::vector<Image> dataset_for(const RunConfig& c, int size, int count, std::uint64_t seed) {
  const std::string kind = c.text("dataset");
  std::mt19937_64 rng(seed);
  std::vector<Image> out;
  out.reserve(std::size_t(count));
  for (int i = 0; i < count; ++i) {
    if (kind == "discs")
      out.push_back(random_discs(size, rng, discs_config(c)));
    else if (kind == "body")
      out.push_back(random_body(size, rng));
    else
      throw CliUsage("dataset must be discs or body (got '" + kind + "')");
  }
  return out;
}

std::string fmt(double v, int prec = 2) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

Image parse_box_mask(int size, const std::string& spec) {
  if (spec.empty()) return box_mask(size, size * 3 / 8, size * 3 / 8, size / 4, size / 4);
  int r0, c0, h, w;
  char a, b, d;
  std::istringstream is(spec);
  if (!(is >> r0 >> a >> c0 >> b >> h >> d >> w) || a != ',' || b != ',' || d != ',' || h < 1 || w < 1)
    throw CliUsage("--mask expects row,col,height,width (got '" + spec + "')");
  return box_mask(size, r0, c0, h, w);
}

// ---------------------------------------------------------------- subcommands

using Handler = std::function<void(Run&)>;

struct Subcommand {
  CLI::App* app;
  Handler handler;
};

void define_subcommands(CLI::App& app, Run& run, std::map<std::string, Subcommand>& subs) {
  auto def = [&](const std::string& name, const std::string& help) -> CLI::App* {
    CLI::App* s = app.add_subcommand(name, help);
    subs[name].app = s;
    return s;
  };

  {
    auto* s = def("phantom", "Shepp-Logan, discs, body or overlay images");
    add(s, run, "--kind", "shepp-logan", "shepp-logan | discs | body | grid-overlay | blobs");
    add(s, run, "--size", "", "image extent (default: image_size)", Role::value, "image_size");
    add(s, run, "--count", "1", "number of images; > 1 writes <stem>_NNNN.timg");
    add(s, run, "--output", "phantom.timg", "output file", Role::output);
    subs["phantom"].handler = [](Run& r) {
      const int size = int(r.cfg.integer("image_size"));
      const std::string kind = r.get("--kind");
      const int count = std::stoi(r.get("--count"));
      if (count < 1) throw CliUsage("--count must be >= 1");
      std::mt19937_64 rng(seed_of(r.cfg));
      auto make = [&](int i) -> Image {
        if (kind == "shepp-logan") return shepp_logan(size);
        if (kind == "discs") return random_discs(size, rng, discs_config(r.cfg));
        if (kind == "body") return random_body(size, rng);
        if (kind == "grid-overlay") return grid_overlay(size);
        if (kind == "blobs") return blobs_overlay(size, seed_of(r.cfg) + std::uint64_t(i));
        throw CliUsage("unknown phantom kind '" + kind + "'");
      };
      const fs::path out = r.output("--output");
      if (count == 1) {
        r.write_image(out, make(0));
        return;
      }
      for (int i = 0; i < count; ++i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "_%04d", i);
        r.write_image(out.parent_path() / (out.stem().string() + buf + out.extension().string()), make(i));
      }
    };
  }
  {
    auto* s = def("project", "Parallel-beam forward projection");
    add(s, run, "--input", "phantom.timg", "image", Role::input);
    add(s, run, "--output", "sinogram.tsin", "sinogram", Role::output);
    add(s, run, "--problem", "few-view", "few-view [0, pi) | limited-angle [0, pi/2) | custom (angle_start/angle_stop)");
    add(s, run, "--ntheta", "", "number of views", Role::value, "n_theta");
    add(s, run, "--nd", "", "detector bins (0: image diagonal)", Role::value, "n_d");
    subs["project"].handler = [](Run& r) {
      const Image x = io::read_image(r.input("--input"));
      if (x.height != x.width) throw CliUsage("project: square images only");
      const Geometry g = geometry_for(r, x.height, r.get("--problem"));
      const fs::path out = r.output("--output");
      io::write_sinogram(out, forward_project(x, g));
      r.record_output(out);
    };
  }
  {
    auto* s = def("noise", "Add Gaussian noise relative to max(f)");
    add(s, run, "--input", "sinogram.tsin", "sinogram", Role::input);
    add(s, run, "--output", "noisy.tsin", "noisy sinogram", Role::output);
    add(s, run, "--level", "", "noise std / max(f)", Role::value, "noise_level");
    subs["noise"].handler = [](Run& r) {
      const Sinogram f = read_sino(r, r.input("--input"));
      const fs::path out = r.output("--output");
      io::write_sinogram(out, add_noise(f, r.cfg.real("noise_level"), seed_of(r.cfg)));
      r.record_output(out);
    };
  }

  // Reconstructions default to the noisy sinogram when one exists.
  auto sino_input = [&](CLI::App* s) { add(s, run, "--input", "", "sinogram (default: noisy.tsin, else sinogram.tsin)", Role::input); };
  auto default_sino = [](Run& r) {
    if (r.get("--input").empty()) r.args.at("--input").value = fs::exists(r.resolve("noisy.tsin")) ? "noisy.tsin" : "sinogram.tsin";
    return read_sino(r, r.input("--input"));
  };

  {
    auto* s = def("fbp", "Filtered backprojection (Ram-Lak)");
    sino_input(s);
    add(s, run, "--output", "fbp.timg", "image", Role::output);
    add(s, run, "--filter", "ram-lak", "ram-lak | none");
    subs["fbp"].handler = [default_sino](Run& r) {
      const Sinogram f = default_sino(r);
      const std::string filt = r.get("--filter");
      if (filt != "ram-lak" && filt != "none") throw CliUsage("--filter must be ram-lak or none");
      r.write_image(r.output("--output"), fbp(f, filt == "none" ? FbpFilter::none : FbpFilter::ram_lak));
    };
  }
  {
    auto* s = def("sart", "Simultaneous algebraic reconstruction");
    sino_input(s);
    add(s, run, "--output", "sart.timg", "image", Role::output);
    add(s, run, "--iterations", "", "sweeps", Role::value, "sart_iterations");
    add(s, run, "--relax", "", "relaxation", Role::value, "sart_relax");
    subs["sart"].handler = [default_sino](Run& r) {
      const Sinogram f = default_sino(r);
      const Projector A(f.geometry);
      SartConfig c;
      c.iterations = int(r.cfg.integer("sart_iterations"));
      c.relax = r.cfg.real("sart_relax");
      r.write_image(r.output("--output"), sart(A, f, Image(f.geometry.image_height, f.geometry.image_width), c));
    };
  }
  {
    auto* s = def("tv", "Total-variation reconstruction (primal-dual)");
    sino_input(s);
    add(s, run, "--output", "tv.timg", "image", Role::output);
    add(s, run, "--lambda", "", "TV weight (0: grid search against --reference)", Role::value, "tv_lambda");
    add(s, run, "--reference", "phantom.timg", "ground truth for the lambda search", Role::input);
    add(s, run, "--iterations", "", "primal-dual iterations", Role::value, "tv_iterations");
    subs["tv"].handler = [default_sino](Run& r) {
      const Sinogram f = default_sino(r);
      const Projector A(f.geometry);
      TvConfig c;
      c.iterations = int(r.cfg.integer("tv_iterations"));
      c.lambda = r.cfg.real("tv_lambda");
      if (c.lambda > 0) {
        r.args.at("--reference").value.clear();
        r.write_image(r.output("--output"), tv_reconstruct(A, f, c));
        return;
      }
      const Image ref = io::read_image(r.input("--reference"));
      const TvSearchResult best = tv_grid_search(A, f, ref, default_tv_lambda_grid(), c);
      std::cout << "tv: lambda " << best.lambda << " (grid search, PSNR " << fmt(best.psnr) << " dB)\n";
      r.write_image(r.output("--output"), best.image);
    };
  }
  {
    auto* s = def("train", "Maximum-likelihood training of the energy model");
    add(s, run, "--output", "model.tebm", "checkpoint", Role::output);
    add(s, run, "--init", "", "resume from this checkpoint", Role::input);
    add(s, run, "--data", "", "training images: directory of .timg files (default: generated from dataset/dataset_size)", Role::input);
    add(s, run, "--steps", "", "training steps", Role::value, "steps");
    add(s, run, "--log", "train_log.csv", "per-step log", Role::output);
    subs["train"].handler = [](Run& r) {
      const RunConfig& c = r.cfg;
      std::vector<Image> data;
      if (!r.get("--data").empty()) {
        const fs::path dir = r.input("--data");
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(dir))
          if (e.path().extension() == ".timg") files.push_back(e.path());
        std::sort(files.begin(), files.end());
        for (const auto& p : files) data.push_back(io::read_image(p));
        if (data.empty()) throw CliUsage("--data: no .timg files in " + dir.string());
      } else {
        data = dataset_for(c, int(c.integer("image_size")), int(c.integer("dataset_size")), seed_of(c));
      }
      ModelParams<float> init;
      if (!r.get("--init").empty()) {
        init = io::read_model<float>(r.input("--init"));
      } else {
        init = build_model<float>(int(c.integer("n_f")), data[0].height, data[0].width, seed_of(c));
        init.leak = c.real("leak");
        init.temperature = c.real("temperature");
      }
      CnnEnergy<float> model(init);
      TrainConfig t = c.trainer();
      t.energy_penalty = c.real("energy_penalty");
      const fs::path out = r.output("--output");
      std::ostringstream log;
      log << "step,energy_plus,energy_minus,grad_norm,clipped\n";
      log.precision(9);
      TrainHooks h;
      h.stop = &g_stop;
      h.on_checkpoint = [&](int) { io::write_model(out, model.params()); };
      h.on_log = [&](const TrainLogEntry& e) {
        log << e.step << ',' << e.energy_plus << ',' << e.energy_minus << ',' << e.grad_norm << ',' << int(e.clipped) << '\n';
        if (e.step % 100 == 0)
          std::cerr << "step " << e.step << "  E+ " << e.energy_plus << "  E- " << e.energy_minus << "  |g| " << e.grad_norm << "\n";
      };
      std::signal(SIGINT, on_sigint);
      TrainResult res;
      try {
        res = train(std::span<const Image>(data), t, model, h);
      } catch (const DivergenceError&) {
        r.write_text(r.output("--log"), log.str());
        r.record_output(out);
        throw;
      }
      std::signal(SIGINT, SIG_DFL);
      r.write_text(r.output("--log"), log.str());
      r.record_output(out);
      if (res.interrupted) std::cerr << "interrupted after step " << res.steps_done << "; checkpoint written to " << out.string() << "\n";
      std::cout << "train: " << res.steps_done << " steps, " << model.params().parameter_count() << " parameters\n";
    };
  }
  {
    auto* s = def("sample-prior", "Langevin samples of the model and its mode (data term 0)");
    add(s, run, "--model", "", "checkpoint", Role::input);
    add(s, run, "--chains", "4", "number of chains");
    add(s, run, "--steps", "40000", "Langevin steps per chain");
    add(s, run, "--output", "prior", "output stem", Role::output);
    subs["sample-prior"].handler = [](Run& r) {
      const ModelParams<float> phi = load_model(r, "--model");
      const int chains = std::stoi(r.get("--chains")), steps = std::stoi(r.get("--steps"));
      if (chains < 1 || steps < 0) throw CliUsage("--chains must be >= 1 and --steps >= 0");
      SamplerConfig sc = r.cfg.sampler();
      sc.steps = steps;
      std::vector<Image> xs;
      std::vector<std::mt19937_64> rngs;
      for (int i = 0; i < chains; ++i) {
        rngs.push_back(stream_rng(seed_of(r.cfg), 0x5a, std::uint64_t(i)));
        xs.push_back(uniform_image(phi.height, phi.width, rngs.back()));
      }
      EnergyEvaluator<float> ev(phi);
      ula_run_batch(
          xs, [&](std::span<const Image> b, std::vector<Image>& g) { ev.energies_and_input_grads(b, g); }, sc, rngs);
      const fs::path stem = r.output("--output");
      const auto e = ev.energies(std::span<const Image>(xs));
      for (int i = 0; i < chains; ++i) {
        char buf[24];
        std::snprintf(buf, sizeof buf, "_sample_%02d.timg", i);
        r.write_image(stem.string() + buf, xs[std::size_t(i)]);
        std::cout << "sample " << i << ": R = " << e[std::size_t(i)] << "\n";
      }
      // Mode finding from uniform noise with the data term switched off.
      ModelRegularizer<float> R(phi);
      std::mt19937_64 rng = stream_rng(seed_of(r.cfg), 0x5b);
      SolverConfig so = r.cfg.solver();
      so.underflow_throws = false;
      std::ostringstream traj;
      traj << "t,R\n";
      traj.precision(9);
      const ApgdResult m = apgd(DataTerm::none(phi.height, phi.width), R, uniform_image(phi.height, phi.width, rng), so);
      traj << 0 << ',' << m.initial_energy << '\n';
      for (const auto& l : m.log) traj << l.t << ',' << l.reg << '\n';
      r.write_image(stem.string() + "_mode.timg", m.x);
      r.write_text(stem.string() + "_mode_trajectory.csv", traj.str());
      std::cout << "mode: R = " << (m.log.empty() ? m.initial_energy : m.log.back().reg) << " after " << m.log.size() << " iterations"
                << (m.underflow ? " (stopped: step size underflow)" : "") << "\n";
    };
  }

  // Measured sinogram if given, else simulated from --reference with the
  // problem geometry and the configured noise level.
  auto measurement = [](Run& r, int model_size) {
    if (!r.get("--sinogram").empty()) {
      r.args.at("--reference").value.clear();
      return read_sino(r, r.input("--sinogram"));
    }
    const Image ref = io::read_image(r.input("--reference"));
    if (ref.height != model_size) throw CliUsage("reference is " + ref.size_string() + " but the model expects " + std::to_string(model_size));
    const Geometry g = geometry_for(r, ref.height, r.get("--problem"));
    return add_noise(forward_project(ref, g), r.cfg.real("noise_level"), seed_of(r.cfg));
  };
  auto measurement_flags = [&](CLI::App* s) {
    add(s, run, "--model", "", "checkpoint", Role::input);
    add(s, run, "--sinogram", "", "measured sinogram (default: simulate from --reference)", Role::input);
    add(s, run, "--reference", "phantom.timg", "image to simulate the measurement from", Role::input);
    add(s, run, "--problem", "few-view", "few-view | limited-angle | custom");
    add(s, run, "--ntheta", "", "number of views", Role::value, "n_theta");
    add(s, run, "--noise", "", "noise std / max(f)", Role::value, "noise_level");
  };

  {
    auto* s = def("reconstruct", "MAP reconstruction with the learned regularizer");
    measurement_flags(s);
    add(s, run, "--output", "ours.timg", "image", Role::output);
    add(s, run, "--log", "", "optional CSV of the APGD iterations", Role::output);
    subs["reconstruct"].handler = [measurement](Run& r) {
      const ModelParams<float> phi = load_model(r, "--model");
      const Sinogram f = measurement(r, phi.height);
      auto A = std::make_shared<const Projector>(f.geometry);
      const DataTerm d = DataTerm::tomographic(A, f, sigma2_for(r.cfg, f));
      ModelRegularizer<float> R(phi, r.cfg.real("reg_weight"));
      SolverConfig so = r.cfg.solver();
      so.underflow_throws = false;
      const ApgdResult res = map_reconstruct(d, R, so);
      if (res.underflow) std::cerr << "reconstruct: step size underflow at iteration " << res.underflow_step << "; keeping the last accepted iterate\n";
      r.write_image(r.output("--output"), res.x);
      if (!r.get("--log").empty()) {
        std::ostringstream os;
        os.precision(12);
        os << "t,energy,data,reg,alpha,backtracks\n";
        for (const auto& l : res.log) os << l.t << ',' << l.energy << ',' << l.data << ',' << l.reg << ',' << l.alpha << ',' << l.backtracks << '\n';
        r.write_text(r.output("--log"), os.str());
      }
      std::cout << "reconstruct: " << res.log.size() << " iterations, E = " << (res.log.empty() ? res.initial_energy : res.log.back().energy) << "\n";
    };
  }
  {
    auto* s = def("posterior", "Posterior mean and variance by Langevin sampling");
    measurement_flags(s);
    add(s, run, "--output", "posterior", "output stem", Role::output);
    subs["posterior"].handler = [measurement](Run& r) {
      const ModelParams<float> phi = load_model(r, "--model");
      const Sinogram f = measurement(r, phi.height);
      auto A = std::make_shared<const Projector>(f.geometry);
      const DataTerm d = DataTerm::tomographic(A, f, sigma2_for(r.cfg, f));
      ModelRegularizer<float> R(phi, r.cfg.real("reg_weight"));
      PosteriorConfig pc;
      pc.sampler = stable_posterior_sampler(d, r.cfg.sampler());
      pc.burn_in = int(r.cfg.integer("burn_in"));
      pc.n_samples = int(r.cfg.integer("n_samples"));
      pc.stride = int(r.cfg.integer("stride"));
      pc.seed = seed_of(r.cfg);
      const PosteriorResult res = posterior_sample(d, R, fbp(f), pc);
      if (res.moments.count() < 2) throw DivergenceError("posterior: " + res.error, 0);
      const std::string stem = r.output("--output").string();
      r.write_image(stem + "_mean.timg", res.moments.mean());
      r.write_image(stem + "_variance.timg", res.moments.variance());
      std::cout << "posterior: " << res.moments.count() << " samples, epsilon " << pc.sampler.epsilon << "\n";
      if (res.partial) {
        std::cerr << res.error << "; moments cover the samples before that\n";
        throw DivergenceError("posterior: chain diverged", 0);
      }
    };
  }
  {
    auto* s = def("corrupt", "Posterior variance of a clean vs corrupted scan inside a mask");
    add(s, run, "--model", "", "checkpoint", Role::input);
    add(s, run, "--reference", "phantom.timg", "clean scan", Role::input);
    add(s, run, "--overlay", "grid", "grid | blobs");
    add(s, run, "--mask", "", "row,col,height,width of the corrupted box (default: central quarter)");
    add(s, run, "--problem", "few-view", "few-view | limited-angle | custom");
    add(s, run, "--ntheta", "", "number of views", Role::value, "n_theta");
    add(s, run, "--output", "corrupt", "output stem", Role::output);
    subs["corrupt"].handler = [](Run& r) {
      const ModelParams<float> phi = load_model(r, "--model");
      const Image ref = io::read_image(r.input("--reference"));
      if (ref.height != phi.height) throw CliUsage("reference size does not match the model");
      const std::string ov = r.get("--overlay");
      Image overlay;
      if (ov == "grid")
        overlay = grid_overlay(ref.height);
      else if (ov == "blobs")
        overlay = blobs_overlay(ref.height, seed_of(r.cfg));
      else
        throw CliUsage("--overlay must be grid or blobs");
      const Image mask = parse_box_mask(ref.height, r.get("--mask"));
      const Geometry g = geometry_for(r, ref.height, r.get("--problem"));
      const Sinogram clean = forward_project(ref, g);
      const double sigma = r.cfg.real("noise_level") * clean.values.maxCoeff();
      const double s2 = r.cfg.real("sigma2") > 0 ? r.cfg.real("sigma2") : sigma * sigma;
      if (!(s2 > 0)) throw CliUsage("set noise_level or sigma2 > 0");
      ModelRegularizer<float> R(phi, r.cfg.real("reg_weight"));
      PosteriorConfig pc;
      pc.sampler = r.cfg.sampler();
      pc.burn_in = int(r.cfg.integer("burn_in"));
      pc.n_samples = int(r.cfg.integer("n_samples"));
      pc.stride = int(r.cfg.integer("stride"));
      pc.seed = seed_of(r.cfg);
      pc.blocks = 10;
      const CorruptionReport rep = corruption_experiment(ref, overlay, mask, g, r.cfg.real("noise_level"), s2, R, pc);
      const std::string stem = r.output("--output").string();
      if (rep.samples >= 2) {
        r.write_image(stem + "_scan.timg", rep.corrupted_scan);
        r.write_image(stem + "_clean_variance.timg", rep.clean_variance);
        r.write_image(stem + "_corrupted_variance.timg", rep.corrupted_variance);
      }
      json j = {{"samples", rep.samples},       {"clean_inside", rep.clean_inside},         {"clean_outside", rep.clean_outside},
                {"corrupted_inside", rep.corrupted_inside}, {"corrupted_outside", rep.corrupted_outside}, {"t", rep.t_statistic},
                {"p_value", rep.p_value},       {"partial", rep.partial}};
      r.write_text(stem + "_report.json", j.dump(2) + "\n");
      std::cout << "inside-mask variance: clean " << rep.clean_inside << ", corrupted " << rep.corrupted_inside << "; one-sided p = " << rep.p_value
                << "\n";
      if (rep.partial) throw DivergenceError("corrupt: posterior chain diverged", 0);
    };
  }
  {
    auto* s = def("ood-sweep", "Denoising PSNR against rotation angle kappa");
    add(s, run, "--model", "", "checkpoint", Role::input);
    add(s, run, "--kappas", "0,1,2,3,4,5,10,15,20,25,30,35,40", "comma-separated angles in degrees");
    add(s, run, "--count", "10", "test images");
    add(s, run, "--level", "0.1", "noise std / max(image)");
    add(s, run, "--output", "ood.csv", "table", Role::output);
    subs["ood-sweep"].handler = [](Run& r) {
      const ModelParams<float> phi = load_model(r, "--model");
      std::vector<double> kappas;
      std::stringstream ks(r.get("--kappas"));
      for (std::string t; std::getline(ks, t, ',');) {
        try {
          kappas.push_back(std::stod(t));
        } catch (const std::exception&) {
          throw CliUsage("--kappas: bad angle '" + t + "'");
        }
      }
      const int count = std::stoi(r.get("--count"));
      const double level = std::stod(r.get("--level"));
      if (count < 1 || !(level >= 0)) throw CliUsage("--count must be >= 1 and --level >= 0");
      // Held-out images: a seed stream the training set never uses.
      const auto images = dataset_for(r.cfg, phi.height, count, seed_of(r.cfg) ^ 0x00d5eedULL);
      ModelRegularizer<float> R(phi, r.cfg.real("reg_weight"));
      SolverConfig so = r.cfg.solver();
      so.underflow_throws = false;
      const auto rows = ood_denoise_sweep(std::span<const Image>(images), R, std::span<const double>(kappas), level, so, seed_of(r.cfg));
      std::ostringstream os;
      os << "kappa,psnr,psnr_noisy,reference\n";
      std::cout << "kappa  PSNR    noisy   reference\n";
      for (const auto& row : rows) {
        std::string ref = "";
        for (const auto& [k, p] : reference_ood_curve())
          if (k == row.kappa) ref = fmt(p);
        os << row.kappa << ',' << fmt(row.psnr, 4) << ',' << fmt(row.psnr_noisy, 4) << ',' << ref << '\n';
        std::printf("%5g  %6s  %6s  %s\n", row.kappa, fmt(row.psnr).c_str(), fmt(row.psnr_noisy).c_str(), ref.c_str());
      }
      r.write_text(r.output("--output"), os.str());
    };
  }
  {
    auto* s = def("metrics", "PSNR table: FBP, SART, TV, Ours");
    add(s, run, "--reference", "phantom.timg", "ground truth", Role::input);
    add(s, run, "--fbp", "fbp.timg", "FBP result");
    add(s, run, "--sart", "sart.timg", "SART result");
    add(s, run, "--tv", "tv.timg", "TV result");
    add(s, run, "--ours", "ours.timg", "learned-regularizer result");
    add(s, run, "--label", "PSNR [dB]", "row label");
    subs["metrics"].handler = [](Run& r) {
      const Image ref = io::read_image(r.input("--reference"));
      const std::pair<const char*, const char*> cols[] = {{"FBP", "--fbp"}, {"SART", "--sart"}, {"TV", "--tv"}, {"Ours", "--ours"}};
      std::string header = "                ", row = r.get("--label");
      row.resize(std::max<std::size_t>(row.size(), 16), ' ');
      for (const auto& [name, flag] : cols) {
        std::string v = "-";
        if (fs::exists(r.resolve(r.get(flag)))) {
          r.args.at(flag).role = Role::input;
          const Image x = io::read_image(r.input(flag));
          require_same_size(x, ref, "metrics");
          v = fmt(psnr(x, ref));
        } else {
          r.args.at(flag).value.clear();
        }
        char cell[16];
        std::snprintf(cell, sizeof cell, "%8s", name);
        header += cell;
        std::snprintf(cell, sizeof cell, "%8s", v.c_str());
        row += cell;
      }
      std::cout << header << "\n" << row << "\n";
    };
  }
  {
    auto* s = def("export", "Write an image as PGM or CSV for viewing");
    add(s, run, "--input", "", "image", Role::input).opt->required();
    add(s, run, "--format", "pgm", "pgm | csv");
    add(s, run, "--output", "", "output file (default: input name with new extension, in --out)", Role::output);
    subs["export"].handler = [](Run& r) {
      const fs::path in = r.input("--input");
      const Image x = io::read_image(in);
      const std::string f = r.get("--format");
      if (f != "pgm" && f != "csv") throw CliUsage("--format must be pgm or csv");
      if (r.get("--output").empty()) r.args.at("--output").value = fs::path(in).filename().replace_extension("." + f).string();
      const fs::path out = r.output("--output");
      if (f == "pgm")
        io::write_pgm(out, x);
      else
        io::write_file_atomic(out, io::image_csv(x));
      r.record_output(out);
    };
  }
}

// Replays the argument map as an argv for the same subcommand.
std::vector<std::string> replay_argv(const json& m, const fs::path& out_dir) {
  std::vector<std::string> a = {"tebm", "--out", out_dir.string()};
  for (const auto& [k, v] : m.at("config").items())
    if (k != "out_dir") a.push_back("--set=" + k + "=" + v.get<std::string>());
  a.push_back(m.at("subcommand").get<std::string>());
  for (const auto& [flag, v] : m.at("args").items())
    if (!v.get<std::string>().empty()) {
      a.push_back(flag);
      a.push_back(v.get<std::string>());
    }
  return a;
}

int run_cli(const std::vector<std::string>& argv);

int rerun(const fs::path& manifest_path, const fs::path& out_dir) {
  const auto bytes = io::read_file(manifest_path);
  const json m = json::parse(std::string(bytes.data(), bytes.size()));
  if (m.value("tool", "") != "tebm") throw CliUsage("not a tebm manifest: " + manifest_path.string());
  for (const auto& in : m.at("inputs")) {
    const fs::path p = in.at("path").get<std::string>();
    if (!fs::exists(p)) throw CliUsage("rerun: input missing: " + p.string());
    if (file_sha256(p) != in.at("sha256").get<std::string>()) throw CliUsage("rerun: input changed since the run: " + p.string());
  }
  const auto argv = replay_argv(m, out_dir);
  std::cerr << "rerun:";
  for (const auto& a : argv) std::cerr << ' ' << a;
  std::cerr << "\n";
  if (const int rc = run_cli(argv); rc != kExitOk) return rc;
  int mismatches = 0;
  for (const auto& o : m.at("outputs")) {
    fs::path p = o.at("path").get<std::string>();
    if (p.is_relative()) p = out_dir / p;
    const bool same = fs::exists(p) && file_sha256(p) == o.at("sha256").get<std::string>();
    std::cout << (same ? "identical  " : "DIFFERENT  ") << p.string() << "\n";
    mismatches += !same;
  }
  std::cout << "rerun: " << m.at("outputs").size() - std::size_t(mismatches) << "/" << m.at("outputs").size() << " artifacts bit-identical\n";
  return mismatches ? kExitNumeric : kExitOk;
}

int run_cli(const std::vector<std::string>& argv_in) {
  Run run;
  run.argv = argv_in;
  CLI::App app{"tebm: energy-based tomographic reconstruction toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  app.set_version_flag("--version", kVersion);
  const char* env_out = std::getenv("TEBM_OUT_DIR");
  std::string out_dir = env_out && *env_out ? env_out : ".";
  std::string config_file, manifest_file, rerun_manifest;
  std::optional<long long> seed;
  std::optional<int> threads;
  app.add_option("--out", out_dir, "output directory (default: $TEBM_OUT_DIR or .)");
  app.add_option("--config", config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--set", run.config_sets, "override one config key (key=value); repeatable");
  app.add_option("--seed", seed, "random seed (config key seed)");
  app.add_option("--threads", threads, "worker threads for long-running commands");

  std::map<std::string, Subcommand> subs;
  define_subcommands(app, run, subs);
  CLI::App* re = app.add_subcommand("rerun", "Replay a manifest and check that the artifacts are bit-identical");
  re->add_option("--manifest", rerun_manifest, "manifest file")->required();
  CLI::App* cfg_cmd = app.add_subcommand("config", "Print every config key with its effective value");

  std::vector<std::string> rev(argv_in.rbegin(), argv_in.rend() - 1);
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    run.out_dir = fs::absolute(out_dir).lexically_normal();
    fs::create_directories(run.out_dir);
    if (*re) return rerun(rerun_manifest, run.out_dir);

    if (!config_file.empty()) {
      const auto bytes = io::read_file(config_file);
      run.cfg = RunConfig::parse(std::string_view(bytes.data(), bytes.size()));
    }
    for (const auto& kv : run.config_sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw CliUsage("--set expects key=value (got '" + kv + "')");
      run.cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) run.cfg.set("seed", std::to_string(*seed));
    if (threads) run.cfg.set("threads", std::to_string(*threads));
    run.cfg.set("out_dir", run.out_dir.string());

    if (*cfg_cmd) {
      std::cout << run.cfg.echo();
      return kExitOk;
    }
    std::string name;
    for (auto& [n, s] : subs)
      if (*s.app) name = n;
    run.subcommand = name;
    run.args = run.sub_args[name];
    apply_key_flags(run);
    // Non-deterministic mode draws a fresh seed; the manifest records it.
    if (!run.cfg.boolean("deterministic") && !seed && !run.cfg.has("seed")) run.cfg.set("seed", std::to_string(std::random_device{}() & 0xffffffffu));
    set_num_threads(int(run.cfg.integer("threads")));

    subs.at(name).handler(run);

    json args = json::object();
    for (const auto& [flag, a] : run.args) args[flag] = a.value;
    json config = json::object();
    for (const auto& [k, spec] : config_schema()) {
      (void)spec;
      config[k] = run.cfg.text(k);
    }
    json m = {{"tool", "tebm"},
              {"version", kVersion},
              {"subcommand", name},
              {"argv", run.argv},
              {"args", args},
              {"config", config},
              {"seed", seed_of(run.cfg)},
              {"threads", run.cfg.integer("threads")},
              {"deterministic", run.cfg.boolean("deterministic")},
              {"build",
               {{"compiler", __VERSION__},
                {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." + std::to_string(EIGEN_MINOR_VERSION)},
                {"fftw", std::string(fftw_version)}}},
              {"inputs", run.inputs},
              {"outputs", run.outputs}};
    io::write_file_atomic(run.out_dir / (name + ".manifest.json"), m.dump(2) + "\n");
    return kExitOk;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const CliUsage& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const tebm::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::logic_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace

int main(int argc, char** argv) { return run_cli(std::vector<std::string>(argv, argv + argc)); }
