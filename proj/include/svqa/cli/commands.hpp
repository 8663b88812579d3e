#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

#include "svqa/cli/config.hpp"
#include "svqa/eval/metrics.hpp"

namespace svqa::cli {

/// Bad arguments; maps to exit code 2. Other exceptions map to 1.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// git-describe string baked in at build time.
std::string_view version();

/// Stage bookkeeping for one checkpoint directory (run.json).
struct RunManifest {
  std::string config_hash;
  std::string version;
  std::map<std::string, std::string> checkpoints;
  std::map<std::string, double> seconds;

  std::string to_json() const;
  static RunManifest from_json(const std::string& text);
  /// Empty manifest when the file does not exist.
  static RunManifest read(const std::filesystem::path& path);
  /// Writes a temporary sibling and renames it into place.
  void write(const std::filesystem::path& path) const;
};

enum class Stage { classifier, codebook, text, prior };
std::string_view stage_name(Stage s);
std::optional<Stage> stage_from_name(std::string_view name);

/// File names inside a checkpoint directory.
inline constexpr const char* kConfigSnapshot = "config.cfg";
inline constexpr const char* kRunManifest = "run.json";
std::string checkpoint_name(Stage s, text::FeatureMode mode);
std::string loss_log_name(Stage s, text::FeatureMode mode);

/// Synthesizes n scenes into out.
void cmd_dataset(const std::filesystem::path& out, int num, std::uint64_t seed);

/// Trains one stage into out_dir, resuming from an existing checkpoint of the
/// same stage. Writes the checkpoint, its loss log, a config snapshot and run.json.
void cmd_train(Stage stage, const Config& cfg, const std::filesystem::path& data, const std::filesystem::path& out_dir);

struct GenerateOptions {
  std::string text;
  std::filesystem::path ckpt_dir;
  std::filesystem::path wav_out;
  /// Also writes a checkpoint holding one array "mel" when set.
  std::optional<std::filesystem::path> mel_out;
  std::uint64_t seed = 0;
  std::optional<int> top_k;
  std::optional<text::FeatureMode> mode;
};

void cmd_generate(const GenerateOptions& opts);

/// Scores every trained prior condition in ckpt_dir on the test split and writes the report.
eval::MetricReport cmd_evaluate(const Config& cfg, const std::filesystem::path& data, const std::filesystem::path& ckpt_dir,
                                const std::filesystem::path& report_path);

}  // namespace svqa::cli
