#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>

#include "svqa/dsp/audio.hpp"
#include "svqa/eval/classifier.hpp"
#include "svqa/prior/prior.hpp"
#include "svqa/text/encoder.hpp"
#include "svqa/vq/specvqgan.hpp"

namespace svqa::cli {

/// Bad config text. what() is "<source>:<line>: <message>".
class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& source, int line, const std::string& message);
  int line() const noexcept { return line_; }

 private:
  int line_;
};

struct EvalSettings {
  /// Generated grids per test caption.
  int samples_per_caption = 1;
  double threshold = 0.5;
  friend bool operator==(const EvalSettings&, const EvalSettings&) = default;
};

struct Paths {
  std::string data;
  std::string checkpoints;
  std::string report;
  friend bool operator==(const Paths&, const Paths&) = default;
};

/// Every hyperparameter of a run. Module configs are stored as-is; the
/// shared seed is applied by the accessors below.
struct Config {
  dsp::AudioConfig audio;
  vq::VqConfig codebook;
  eval::ClassifierConfig classifier;
  text::TextConfig text;
  text::FeatureMode mode = text::FeatureMode::full;
  bool contrastive = true;
  prior::PriorConfig prior;
  int top_k = 64;
  double temperature = 1.0;
  EvalSettings eval;
  Paths paths;
  std::uint64_t seed = 1;

  friend bool operator==(const Config&, const Config&) = default;

  vq::VqConfig codebook_config() const;
  eval::ClassifierConfig classifier_config() const;
  text::TextConfig text_config() const;
  /// Prior config with mode, seed and sequence geometry filled in.
  prior::PriorConfig prior_config(int codebook_size, int seq_len) const;
  prior::SamplerConfig sampler_config(std::uint64_t sample_seed) const;
};

/// Parses `key = value` lines. `#` starts a comment; blank lines are ignored.
/// Unset keys keep their defaults. Unknown or repeated keys, malformed values
/// and out-of-range values throw ConfigError naming the line.
Config parse_config(std::string_view text, const std::string& source = "<config>");
Config load_config(const std::filesystem::path& path);

/// Every key in a fixed order; parse_config(serialize_config(c)) == c.
std::string serialize_config(const Config& c);

/// FNV-1a 64 of the serialized config as 16 hex digits.
std::string config_hash(const Config& c);

}  // namespace svqa::cli
