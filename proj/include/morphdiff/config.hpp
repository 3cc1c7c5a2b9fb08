#pragma once

// Run configuration: flat `key = value` text, `#` comments, unknown keys rejected.

#include <charconv>
#include <filesystem>
#include <map>
#include <string>

#include "morphdiff/diffusion.hpp"
#include "morphdiff/io.hpp"

namespace morphdiff {

struct RunConfig {
  std::filesystem::path dataset;
  int T = 100;
  // Betas are given for a reference_steps-step chain and rescaled by
  // reference_steps / T, so shorter chains still end near pure noise.
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int reference_steps = 1000;
  LossWeights weights{};
  double u_max = 10.0;
  // Typical displacement RMS in pixels; sets the denoiser's input skip.
  double field_sigma = 0.2;
  int slots = 3;  // N
  double lr = 1e-4;
  double weight_decay = 0.01;
  int epochs = 50;
  int batch_size = 4;
  std::uint64_t seed = 0;
  std::filesystem::path checkpoint = "checkpoint.dfck";
  int checkpoint_every = 10;
  std::filesystem::path bae_checkpoint;
  double age_min = 40.0;
  double age_max = 90.0;
  int base = 32;
  bool use_kan = true;
  bool use_ftie = true;
  std::filesystem::path log;

  NoiseSchedule schedule() const {
    const double k = static_cast<double>(reference_steps) / static_cast<double>(T);
    return make_schedule(T, beta_start * k, beta_end * k);
  }

  double normalize_age(double age) const { return (age - age_min) / (age_max - age_min); }

  // Value checks only; validate_paths() checks the filesystem.
  void validate() const {
    if (T < 1) throw DomainError("config: T must be >= 1");
    if (reference_steps < 1) throw DomainError("config: reference_steps must be >= 1");
    weights.validate();
    if (!(u_max > 0)) throw DomainError("config: u_max must be positive");
    if (!(field_sigma > 0)) throw DomainError("config: field_sigma must be positive");
    if (slots < 1) throw DomainError("config: N must be >= 1");
    if (!(lr > 0) || weight_decay < 0) throw DomainError("config: lr must be positive and weight_decay non-negative");
    if (epochs < 0 || batch_size < 1 || checkpoint_every < 1) {
      throw DomainError("config: epochs >= 0, batch_size >= 1 and checkpoint_every >= 1 required");
    }
    if (!(age_max > age_min)) throw DomainError("config: age_max must exceed age_min");
    if (base < 1) throw DomainError("config: base must be >= 1");
    schedule();
  }

  void validate_paths() const {
    if (dataset.empty() || !std::filesystem::is_directory(dataset)) throw IoError("config: dataset directory '" + dataset.string() + "' not found");
    if (weights.lambda3 > 0 && (bae_checkpoint.empty() || !std::filesystem::exists(bae_checkpoint))) {
      throw IoError("config: lambda3 > 0 needs an existing bae_checkpoint, got '" + bae_checkpoint.string() + "'");
    }
  }

  KeyValues to_key_values() const {
    return {{"dataset", dataset.string()},
            {"T", std::to_string(T)},
            {"beta_start", format_double(beta_start)},
            {"beta_end", format_double(beta_end)},
            {"reference_steps", std::to_string(reference_steps)},
            {"lambda1", format_double(weights.lambda1)},
            {"lambda2", format_double(weights.lambda2)},
            {"lambda3", format_double(weights.lambda3)},
            {"gamma", format_double(weights.gamma)},
            {"u_max", format_double(u_max)},
            {"field_sigma", format_double(field_sigma)},
            {"N", std::to_string(slots)},
            {"lr", format_double(lr)},
            {"weight_decay", format_double(weight_decay)},
            {"epochs", std::to_string(epochs)},
            {"batch_size", std::to_string(batch_size)},
            {"seed", std::to_string(seed)},
            {"checkpoint", checkpoint.string()},
            {"checkpoint_every", std::to_string(checkpoint_every)},
            {"bae_checkpoint", bae_checkpoint.string()},
            {"age_min", format_double(age_min)},
            {"age_max", format_double(age_max)},
            {"base", std::to_string(base)},
            {"use_kan", use_kan ? "1" : "0"},
            {"use_ftie", use_ftie ? "1" : "0"},
            {"log", log.string()}};
  }
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) throw DomainError("config: '" + key + "' expects a number, got '" + text + "'");
  return value;
}

inline bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "1" || text == "true") return true;
  if (text == "0" || text == "false") return false;
  throw DomainError("config: '" + key + "' expects true/false, got '" + text + "'");
}

}  // namespace detail

// Relative paths resolve against `base_dir` (the config file's directory).
inline RunConfig parse_run_config(const std::map<std::string, std::string>& kv, const std::filesystem::path& base_dir = {}) {
  RunConfig c;
  auto path = [&](const std::string& v) -> std::filesystem::path {
    if (v.empty()) return {};
    const std::filesystem::path p(v);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  for (const auto& [key, value] : kv) {
    using detail::parse_number;
    if (key == "dataset") c.dataset = path(value);
    else if (key == "T") c.T = parse_number<int>(key, value);
    else if (key == "beta_start") c.beta_start = parse_number<double>(key, value);
    else if (key == "beta_end") c.beta_end = parse_number<double>(key, value);
    else if (key == "reference_steps") c.reference_steps = parse_number<int>(key, value);
    else if (key == "lambda1") c.weights.lambda1 = parse_number<double>(key, value);
    else if (key == "lambda2") c.weights.lambda2 = parse_number<double>(key, value);
    else if (key == "lambda3") c.weights.lambda3 = parse_number<double>(key, value);
    else if (key == "gamma") c.weights.gamma = parse_number<double>(key, value);
    else if (key == "u_max") c.u_max = parse_number<double>(key, value);
    else if (key == "field_sigma") c.field_sigma = parse_number<double>(key, value);
    else if (key == "N") c.slots = parse_number<int>(key, value);
    else if (key == "lr") c.lr = parse_number<double>(key, value);
    else if (key == "weight_decay") c.weight_decay = parse_number<double>(key, value);
    else if (key == "epochs") c.epochs = parse_number<int>(key, value);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, value);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value);
    else if (key == "checkpoint") c.checkpoint = path(value);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, value);
    else if (key == "bae_checkpoint") c.bae_checkpoint = path(value);
    else if (key == "age_min") c.age_min = parse_number<double>(key, value);
    else if (key == "age_max") c.age_max = parse_number<double>(key, value);
    else if (key == "base") c.base = parse_number<int>(key, value);
    else if (key == "use_kan") c.use_kan = detail::parse_bool(key, value);
    else if (key == "use_ftie") c.use_ftie = detail::parse_bool(key, value);
    else if (key == "log") c.log = path(value);
    else throw DomainError("config: unknown key '" + key + "'");
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& file) {
  return parse_run_config(load_key_values(file), file.parent_path());
}

}  // namespace morphdiff
