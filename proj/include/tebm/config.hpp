#pragma once

// Flat key = value run configuration. Every key is declared in a schema with
// its type and admissible range; unknown keys and out-of-range values are
// rejected when parsed. '#' starts a comment.

#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "tebm/classical.hpp"
#include "tebm/sampler.hpp"
#include "tebm/solver.hpp"
#include "tebm/trainer.hpp"

namespace tebm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class KeyType { integer, real, boolean, text };

struct KeySpec {
  KeyType type;
  double min = -std::numeric_limits<double>::infinity();
  double max = std::numeric_limits<double>::infinity();
  std::string fallback;
  std::string help;
  bool min_exclusive = false;
  bool max_exclusive = false;
};

inline const std::map<std::string, KeySpec>& config_schema() {
  using K = KeyType;
  constexpr double inf = std::numeric_limits<double>::infinity();
  static const std::map<std::string, KeySpec> schema = {
      {"seed", {K::integer, 0, 9.0e15, "0", "global random seed"}},
      {"out_dir", {K::text, 0, 0, "", "output directory"}},
      {"threads", {K::integer, 1, 1024, "1", "worker threads"}},
      {"deterministic", {K::boolean, 0, 1, "true", "serialize chains for bit-identical output"}},
      // geometry / noise
      {"image_size", {K::integer, 4, 4096, "64", "image extent (square)"}},
      {"n_theta", {K::integer, 1, 100000, "20", "projection count"}},
      {"angle_start", {K::real, 0, std::numbers::pi, "0", "first angle (rad)"}},
      {"angle_stop", {K::real, 0, std::numbers::pi, "3.141592653589793", "end of angular range (rad, exclusive)"}},
      {"n_d", {K::integer, 0, 100000, "0", "detector bins (0: ceil of image diagonal)"}},
      {"det_spacing", {K::real, 0, inf, "1", "detector pitch in pixels", true}},
      {"noise_level", {K::real, 0, 10, "0.001", "noise std relative to max(f)"}},
      {"sigma2", {K::real, 0, inf, "0", "data-term variance (0: from noise level)"}},
      // model
      {"n_f", {K::integer, 1, 4096, "8", "base feature count"}},
      {"leak", {K::real, 0, 1, "0.05", "leaky ReLU slope"}},
      {"temperature", {K::real, 0, inf, "1", "energy temperature T", true}},
      {"reg_weight", {K::real, 0, inf, "1", "regularizer weight in reconstructions"}},
      // sampler
      {"epsilon", {K::real, 0, inf, "1", "Langevin step", true}},
      {"beta", {K::real, 0, inf, "0.0075", "Langevin noise scale"}},
      {"K", {K::integer, 0, 1e9, "500", "Langevin steps per training iteration"}},
      {"clamp", {K::boolean, 0, 1, "false", "clamp chain values to [-0.1, 1.1]"}},
      // trainer
      {"lr", {K::real, 0, inf, "0.0005", "Adam learning rate", true}},
      {"adam_beta1", {K::real, 0, 0.999999999, "0.9", "Adam beta1"}},
      {"adam_beta2", {K::real, 0, 0.999999999, "0.999", "Adam beta2"}},
      {"adam_eps", {K::real, 0, inf, "1e-8", "Adam epsilon", true}},
      {"batch_size", {K::integer, 1, 1e6, "25", "batch size"}},
      {"steps", {K::integer, 0, 1e9, "2000", "training steps n_e"}},
      {"sigma_data", {K::real, 0, inf, "0.015", "data smoothing noise"}},
      {"buffer", {K::integer, 1, 1e8, "8000", "replay buffer capacity"}},
      {"p_re", {K::real, 0, 1, "0.01", "buffer reinitialization probability"}},
      {"grad_clip", {K::real, 0, inf, "100", "global gradient-norm clip (0: off)"}},
      {"checkpoint_interval", {K::integer, 0, 1e9, "100", "steps between checkpoints"}},
      {"dataset", {K::text, 0, 0, "discs", "training distribution: discs | body"}},
      {"dataset_size", {K::integer, 1, 1e7, "2000", "training images"}},
      {"disc_shading", {K::real, 0, 1, "0", "max radial shading of disc intensities"}},
      {"energy_penalty", {K::real, 0, inf, "0", "weight of mean(R^2) added to the training loss"}},
      // solver
      {"J", {K::integer, 0, 1e9, "1000", "APGD iterations"}},
      {"alpha0", {K::real, 0, inf, "0.01", "initial step", true}},
      {"gamma1", {K::real, 0, 1, "0.5", "step growth factor (alpha / gamma1)", true, true}},
      {"gamma2", {K::real, 0, 1, "0.6666666666666666", "step shrink factor", true, true}},
      {"cg_iters", {K::integer, 0, 1e6, "10", "CG iterations in the data prox"}},
      // baselines
      {"sart_iterations", {K::integer, 0, 1e6, "100", "SART sweeps"}},
      {"sart_relax", {K::real, 0, 2, "1", "SART relaxation", true}},
      {"tv_lambda", {K::real, 0, inf, "0", "TV weight (0: grid search against the reference)"}},
      {"tv_iterations", {K::integer, 1, 1e7, "500", "primal-dual iterations"}},
      // posterior
      {"burn_in", {K::integer, 0, 1e9, "1000", "discarded Langevin steps"}},
      {"n_samples", {K::integer, 2, 1e9, "200", "recorded posterior samples"}},
      {"stride", {K::integer, 1, 1e9, "10", "steps between recorded samples"}},
  };
  return schema;
}

class RunConfig {
 public:
  RunConfig() = default;

  static RunConfig parse(std::string_view text) {
    RunConfig cfg;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
      const std::size_t end = std::min(text.find('\n', pos), text.size());
      ++line_no;
      std::string line(text.substr(pos, end - pos));
      pos = end + 1;
      if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) {
        if (end == text.size()) break;
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
      const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
      try {
        if (cfg.values_.count(key)) throw ConfigError("duplicate key '" + key + "'");
        cfg.set(key, value);
      } catch (const ConfigError& e) {
        throw ConfigError("config line " + std::to_string(line_no) + ": " + e.what());
      }
      if (end == text.size()) break;
    }
    return cfg;
  }

  /// Validates and stores one entry.
  void set(const std::string& key, const std::string& value) {
    const auto& schema = config_schema();
    const auto it = schema.find(key);
    if (it == schema.end()) throw ConfigError("unknown key '" + key + "'");
    check_value(key, it->second, value);
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::string text(const std::string& key) const { return raw(key); }
  double real(const std::string& key) const { return std::strtod(raw(key).c_str(), nullptr); }
  long long integer(const std::string& key) const { return std::strtoll(raw(key).c_str(), nullptr, 10); }
  bool boolean(const std::string& key) const {
    const std::string v = raw(key);
    return v == "true" || v == "1" || v == "yes" || v == "on";
  }

  /// Every schema key with its effective value, one per line, sorted.
  std::string echo() const {
    std::ostringstream os;
    for (const auto& [k, spec] : config_schema()) os << k << " = " << raw(k) << '\n';
    return os.str();
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.epsilon = real("epsilon");
    s.beta = real("beta");
    s.steps = int(integer("K"));
    s.clamp = boolean("clamp");
    return s;
  }
  TrainConfig trainer() const {
    TrainConfig t;
    t.learning_rate = real("lr");
    t.adam_beta1 = real("adam_beta1");
    t.adam_beta2 = real("adam_beta2");
    t.adam_epsilon = real("adam_eps");
    t.batch_size = int(integer("batch_size"));
    t.steps = int(integer("steps"));
    t.sigma_data = real("sigma_data");
    t.sampler = sampler();
    t.buffer_capacity = std::size_t(integer("buffer"));
    t.p_reinit = real("p_re");
    t.grad_clip = real("grad_clip");
    t.seed = std::uint64_t(integer("seed"));
    t.checkpoint_interval = int(integer("checkpoint_interval"));
    t.energy_penalty = real("energy_penalty");
    return t;
  }
  SolverConfig solver() const {
    SolverConfig s;
    s.iterations = int(integer("J"));
    s.alpha0 = real("alpha0");
    s.gamma1 = real("gamma1");
    s.gamma2 = real("gamma2");
    s.cg_iters = int(integer("cg_iters"));
    return s;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  static void check_value(const std::string& key, const KeySpec& spec, const std::string& v) {
    auto fail = [&](const std::string& why) { throw ConfigError("key '" + key + "': " + why + " (got '" + v + "')"); };
    double num = 0;
    switch (spec.type) {
      case KeyType::text:
        if (v.find_first_of(std::string("\n\r\0", 3)) != std::string::npos) fail("text must be a single line");
        return;
      case KeyType::boolean:
        if (v != "true" && v != "false" && v != "1" && v != "0" && v != "yes" && v != "no" && v != "on" && v != "off")
          fail("expected a boolean");
        return;
      case KeyType::integer: {
        if (v.empty()) fail("expected an integer");
        errno = 0;
        char* end = nullptr;
        const long long n = std::strtoll(v.c_str(), &end, 10);
        if (errno != 0 || end != v.c_str() + v.size()) fail("expected an integer");
        num = double(n);
        break;
      }
      case KeyType::real: {
        if (v.empty()) fail("expected a number");
        errno = 0;
        char* end = nullptr;
        num = std::strtod(v.c_str(), &end);
        if (errno != 0 || end != v.c_str() + v.size() || !std::isfinite(num)) fail("expected a finite number");
        break;
      }
    }
    if (num < spec.min || num > spec.max || (spec.min_exclusive && num == spec.min) || (spec.max_exclusive && num == spec.max)) {
      std::ostringstream os;
      os << "out of range " << (spec.min_exclusive ? "(" : "[") << spec.min << ", " << spec.max << (spec.max_exclusive ? ")" : "]");
      fail(os.str());
    }
  }

  std::string raw(const std::string& key) const {
    if (const auto it = values_.find(key); it != values_.end()) return it->second;
    const auto& schema = config_schema();
    const auto s = schema.find(key);
    if (s == schema.end()) throw ConfigError("unknown key '" + key + "'");
    return s->second.fallback;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace tebm
