#include "svqa/cli/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <vector>

#include <fmt/format.h>

namespace svqa::cli {

ConfigError::ConfigError(const std::string& source, int line, const std::string& message)
    : std::runtime_error(line > 0 ? fmt::format("{}:{}: {}", source, line, message) : fmt::format("{}: {}", source, message)),
      line_(line) {}

vq::VqConfig Config::codebook_config() const {
  auto c = codebook;
  c.seed = seed;
  return c;
}

eval::ClassifierConfig Config::classifier_config() const {
  auto c = classifier;
  c.seed = seed;
  return c;
}

text::TextConfig Config::text_config() const {
  auto c = text;
  c.seed = seed;
  return c;
}

prior::PriorConfig Config::prior_config(int codebook_size, int seq_len) const {
  auto c = prior;
  c.seed = seed;
  c.mode = mode;
  c.codebook_size = codebook_size;
  c.seq_len = seq_len;
  c.max_prefix = text.max_len;
  return c;
}

prior::SamplerConfig Config::sampler_config(std::uint64_t sample_seed) const {
  prior::SamplerConfig s;
  s.top_k = top_k;
  s.temperature = temperature;
  s.seed = sample_seed;
  return s;
}

namespace {

struct Field {
  std::string key;
  // Throws std::invalid_argument with a message for bad values.
  std::function<void(std::string_view)> set;
  std::function<std::string()> get;
};

template <class T>
T parse_number(std::string_view v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw std::invalid_argument(fmt::format("'{}' is not a valid number", v));
  return out;
}

Field int_field(std::string key, int& ref, int lo, int hi) {
  return {key,
          [&ref, lo, hi](std::string_view v) {
            const int x = parse_number<int>(v);
            if (x < lo || x > hi) throw std::invalid_argument(fmt::format("{} is outside [{}, {}]", x, lo, hi));
            ref = x;
          },
          [&ref] { return fmt::format("{}", ref); }};
}

// open_lo excludes the lower bound.
Field real_field(std::string key, double& ref, double lo, double hi, bool open_lo = false) {
  return {key,
          [&ref, lo, hi, open_lo](std::string_view v) {
            const double x = parse_number<double>(v);
            if (!(x >= lo && x <= hi) || (open_lo && x == lo)) {
              throw std::invalid_argument(fmt::format("{} is outside {}{}, {}]", x, open_lo ? "(" : "[", lo, hi));
            }
            ref = x;
          },
          [&ref] { return fmt::format("{}", ref); }};
}

Field seed_field(std::string key, std::uint64_t& ref) {
  return {key, [&ref](std::string_view v) { ref = parse_number<std::uint64_t>(v); }, [&ref] { return fmt::format("{}", ref); }};
}

Field bool_field(std::string key, bool& ref) {
  return {key,
          [&ref](std::string_view v) {
            if (v == "true") {
              ref = true;
            } else if (v == "false") {
              ref = false;
            } else {
              throw std::invalid_argument(fmt::format("'{}' is not true or false", v));
            }
          },
          [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field string_field(std::string key, std::string& ref) {
  return {key, [&ref](std::string_view v) { ref = std::string(v); }, [&ref] { return ref; }};
}

Field channels_field(std::string key, std::array<int, 3>& ref) {
  return {key,
          [&ref](std::string_view v) {
            std::array<int, 3> out{};
            std::size_t n = 0;
            while (true) {
              const auto comma = v.find(',');
              std::string_view part = v.substr(0, comma);
              while (!part.empty() && part.front() == ' ') part.remove_prefix(1);
              while (!part.empty() && part.back() == ' ') part.remove_suffix(1);
              if (n == 3) throw std::invalid_argument("expected exactly 3 comma-separated channel counts");
              out[n] = parse_number<int>(part);
              if (out[n] < 1 || out[n] > 1024) throw std::invalid_argument(fmt::format("channel count {} is outside [1, 1024]", out[n]));
              ++n;
              if (comma == std::string_view::npos) break;
              v.remove_prefix(comma + 1);
            }
            if (n != 3) throw std::invalid_argument("expected exactly 3 comma-separated channel counts");
            ref = out;
          },
          [&ref] { return fmt::format("{},{},{}", ref[0], ref[1], ref[2]); }};
}

Field mode_field(std::string key, text::FeatureMode& ref) {
  return {key,
          [&ref](std::string_view v) {
            const auto m = text::mode_from_name(v);
            if (!m) throw std::invalid_argument(fmt::format("unknown mode '{}' (no_feat, pooled or full)", v));
            ref = *m;
          },
          [&ref] { return std::string(text::mode_name(ref)); }};
}

Field training_field(std::string key, prior::TextTraining& ref) {
  return {key,
          [&ref](std::string_view v) {
            const auto t = prior::training_from_name(v);
            if (!t) throw std::invalid_argument(fmt::format("unknown text training '{}' (joint or frozen)", v));
            ref = *t;
          },
          [&ref] { return std::string(prior::training_name(ref)); }};
}

constexpr int kBig = 1'000'000;

std::vector<Field> fields(Config& c) {
  std::vector<Field> f;
  f.push_back(int_field("audio.sample_rate", c.audio.sample_rate, 1000, 192000));
  f.push_back(int_field("audio.n_fft", c.audio.n_fft, 16, 8192));
  f.push_back(int_field("audio.hop", c.audio.hop, 1, 8192));
  f.push_back(int_field("audio.mel_bands", c.audio.mel_bands, 8, 512));
  f.push_back(real_field("audio.clip_seconds", c.audio.clip_seconds, 0.0, 60.0, true));
  f.push_back(int_field("audio.griffin_lim_iters", c.audio.griffin_lim_iters, 1, 10000));

  f.push_back(int_field("codebook.size", c.codebook.codebook_size, 2, 65536));
  f.push_back(int_field("codebook.n_z", c.codebook.n_z, 1, 4096));
  f.push_back(channels_field("codebook.channels", c.codebook.channels));
  f.push_back(int_field("codebook.disc_channels", c.codebook.disc_channels, 1, 1024));
  f.push_back(real_field("codebook.beta", c.codebook.beta, 0.0, 100.0));
  f.push_back(real_field("codebook.lambda_adv", c.codebook.lambda_adv, 0.0, 100.0));
  f.push_back(real_field("codebook.lambda_perc", c.codebook.lambda_perc, 0.0, 100.0));
  f.push_back(int_field("codebook.warmup_steps", c.codebook.warmup_steps, 0, kBig));
  f.push_back(real_field("codebook.restart_threshold", c.codebook.restart_threshold, 0.0, 1e9));

  f.push_back(channels_field("classifier.channels", c.classifier.channels));
  f.push_back(int_field("classifier.embed_dim", c.classifier.embed_dim, 1, 4096));

  f.push_back(mode_field("text.mode", c.mode));
  f.push_back(int_field("text.max_len", c.text.max_len, 2, 512));
  f.push_back(int_field("text.width", c.text.width, 1, 4096));
  f.push_back(int_field("text.layers", c.text.layers, 0, 64));
  f.push_back(int_field("text.heads", c.text.heads, 1, 64));
  f.push_back(int_field("text.proj_dim", c.text.proj_dim, 1, 4096));
  f.push_back(channels_field("text.audio_channels", c.text.audio_channels));
  f.push_back(bool_field("text.contrastive", c.contrastive));

  f.push_back(int_field("prior.layers", c.prior.layers, 1, 64));
  f.push_back(int_field("prior.width", c.prior.width, 1, 4096));
  f.push_back(int_field("prior.heads", c.prior.heads, 1, 64));
  f.push_back(training_field("prior.text_training", c.prior.text_training));
  f.push_back(int_field("prior.top_k", c.top_k, 1, 65536));
  f.push_back(real_field("prior.temperature", c.temperature, 0.0, 100.0, true));

  f.push_back(seed_field("training.seed", c.seed));
  f.push_back(int_field("training.classifier.steps", c.classifier.steps, 0, kBig));
  f.push_back(int_field("training.classifier.batch", c.classifier.batch, 1, 4096));
  f.push_back(real_field("training.classifier.lr", c.classifier.lr, 0.0, 10.0, true));
  f.push_back(int_field("training.codebook.steps", c.codebook.steps, 0, kBig));
  f.push_back(int_field("training.codebook.batch", c.codebook.batch, 1, 4096));
  f.push_back(real_field("training.codebook.lr", c.codebook.lr, 0.0, 10.0, true));
  f.push_back(int_field("training.text.steps", c.text.steps, 0, kBig));
  f.push_back(int_field("training.text.batch", c.text.batch, 2, 4096));
  f.push_back(real_field("training.text.lr", c.text.lr, 0.0, 10.0, true));
  f.push_back(int_field("training.prior.steps", c.prior.steps, 0, kBig));
  f.push_back(int_field("training.prior.batch", c.prior.batch, 1, 4096));
  f.push_back(real_field("training.prior.lr", c.prior.lr, 0.0, 10.0, true));

  f.push_back(int_field("eval.samples_per_caption", c.eval.samples_per_caption, 1, 1000));
  f.push_back(real_field("eval.threshold", c.eval.threshold, 0.0, 1.0, true));

  f.push_back(string_field("paths.data", c.paths.data));
  f.push_back(string_field("paths.checkpoints", c.paths.checkpoints));
  f.push_back(string_field("paths.report", c.paths.report));
  return f;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

// Cross-field checks, reported at the line of the key that completes the conflict.
void check_consistency(const Config& c, const std::map<std::string, int>& lines, const std::string& source) {
  auto line_of = [&](std::initializer_list<const char*> keys) {
    int best = 0;
    for (const char* k : keys) {
      if (auto it = lines.find(k); it != lines.end()) best = std::max(best, it->second);
    }
    return best;
  };
  if (c.audio.hop > c.audio.n_fft) {
    throw ConfigError(source, line_of({"audio.hop", "audio.n_fft"}), fmt::format("audio.hop {} exceeds audio.n_fft {}", c.audio.hop, c.audio.n_fft));
  }
  if (c.audio.mel_bands > c.audio.n_fft / 2 + 1) {
    throw ConfigError(source, line_of({"audio.mel_bands", "audio.n_fft"}),
                      fmt::format("audio.mel_bands {} exceeds the {} FFT bins", c.audio.mel_bands, c.audio.n_fft / 2 + 1));
  }
  if (c.text.width != c.prior.width) {
    throw ConfigError(source, line_of({"text.width", "prior.width"}),
                      fmt::format("text.width {} must equal prior.width {}", c.text.width, c.prior.width));
  }
  if (c.text.width % c.text.heads != 0) {
    throw ConfigError(source, line_of({"text.width", "text.heads"}), fmt::format("text.width {} is not divisible by text.heads {}", c.text.width, c.text.heads));
  }
  if (c.prior.width % c.prior.heads != 0) {
    throw ConfigError(source, line_of({"prior.width", "prior.heads"}),
                      fmt::format("prior.width {} is not divisible by prior.heads {}", c.prior.width, c.prior.heads));
  }
  if (c.top_k > c.codebook.codebook_size) {
    throw ConfigError(source, line_of({"prior.top_k", "codebook.size"}),
                      fmt::format("prior.top_k {} exceeds codebook.size {}", c.top_k, c.codebook.codebook_size));
  }
  const std::pair<const char*, std::function<void()>> module_checks[] = {
      {"audio", [&] { c.audio.validate(); }},
      {"codebook", [&] { c.codebook_config().validate(); }},
      {"text", [&] { c.text_config().validate(); }},
  };
  for (const auto& [section, check] : module_checks) {
    try {
      check();
    } catch (const std::exception& e) {
      int line = 0;
      for (const auto& [k, l] : lines) {
        if (k.rfind(std::string(section) + ".", 0) == 0) line = std::max(line, l);
      }
      throw ConfigError(source, line, e.what());
    }
  }
}

}  // namespace

Config parse_config(std::string_view text, const std::string& source) {
  Config c;
  auto table = fields(c);
  std::map<std::string, int> seen;
  int line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(source, line_no, fmt::format("expected 'key = value', got '{}'", line));
    const std::string key(trim(line.substr(0, eq)));
    const std::string_view value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError(source, line_no, "missing key before '='");
    auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.key == key; });
    if (it == table.end()) throw ConfigError(source, line_no, fmt::format("unknown key '{}'", key));
    if (auto prev = seen.find(key); prev != seen.end()) {
      throw ConfigError(source, line_no, fmt::format("key '{}' already set on line {}", key, prev->second));
    }
    try {
      it->set(value);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(source, line_no, fmt::format("{}: {}", key, e.what()));
    }
    seen.emplace(key, line_no);
  }
  check_consistency(c, seen, source);
  return c;
}

Config load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path.string(), 0, "cannot open config file");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

std::string serialize_config(const Config& c) {
  Config copy = c;
  std::string out;
  std::string section;
  for (const auto& f : fields(copy)) {
    const auto dot = f.key.find('.');
    const std::string head = f.key.substr(0, dot);
    if (head != section) {
      if (!section.empty()) out += '\n';
      out += fmt::format("# {}\n", head);
      section = head;
    }
    const std::string value = f.get();
    out += value.empty() ? fmt::format("{} =\n", f.key) : fmt::format("{} = {}\n", f.key, value);
  }
  return out;
}

std::string config_hash(const Config& c) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : serialize_config(c)) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return fmt::format("{:016x}", h);
}

}  // namespace svqa::cli
