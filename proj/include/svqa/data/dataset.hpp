#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "svqa/dsp/audio.hpp"

namespace svqa::data {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EventClass : int { tone = 0, chirp, noise_burst, square_beep, am_tone, click_train };
inline constexpr int kNumClasses = 6;

std::string_view class_name(EventClass c);
std::optional<EventClass> class_from_name(std::string_view name);
/// The caption noun that identifies a class; unique per class.
std::string_view class_noun(EventClass c);

enum class Relation { single, sequence, overlap };
std::string_view relation_name(Relation r);
std::optional<Relation> relation_from_name(std::string_view name);

struct SoundEvent {
  EventClass cls = EventClass::tone;
  double onset = 0.0;
  double duration = 0.0;
  double gain = 1.0;
  /// Base frequency; chirps sweep from freq to freq_end.
  double freq = 0.0;
  double freq_end = 0.0;
  double am_rate = 0.0;
  double click_rate = 0.0;

  double end() const { return onset + duration; }
};

struct SceneSpec {
  std::vector<SoundEvent> events;
  Relation relation = Relation::single;
  std::uint64_t seed = 0;
  /// Paraphrase template, 0..kNumTemplates-1.
  int template_id = 0;
  double clip_seconds = 2.56;
  int sample_rate = 16000;

  /// Sorted, de-duplicated event classes.
  std::vector<EventClass> classes() const;
  void validate() const;
};

inline constexpr int kNumTemplates = 3;
inline constexpr double kFadeSeconds = 0.01;
inline constexpr double kMinOverlapSeconds = 0.5;
inline constexpr double kPeakLimit = 0.95;

/// Draws a random scene: 1-3 distinct classes, each class equally likely.
SceneSpec sample_scene(std::uint64_t seed, double clip_seconds = 2.56, int sample_rate = 16000);

/// Renders a scene. Every event is exactly zero outside [onset, onset + duration).
dsp::Waveform synth_scene(const SceneSpec& spec);

/// Fixed closed vocabulary shared by captions and the text encoder.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kCls = 1;
  static constexpr int kUnk = 2;

  static const Vocabulary& standard();
  static Vocabulary from_words(std::vector<std::string> words);

  int size() const noexcept { return static_cast<int>(words_.size()); }
  /// kUnk for out-of-vocabulary words.
  int id(std::string_view word) const;
  std::string_view word(int id) const;
  std::span<const std::string> words() const noexcept { return words_; }

  /// Whitespace tokenization, lower-cased.
  std::vector<int> encode(std::string_view text) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> words_;
};

/// Token budget per caption including the leading CLS slot.
inline constexpr int kMaxTokens = 16;

struct Caption {
  std::string text;
  std::vector<int> token_ids;
  std::vector<EventClass> class_tags;
};

/// Adjective describing an event under a template, derived from its parameters.
std::string_view adjective(const SoundEvent& e, int template_id);

Caption caption_of(const SceneSpec& spec);
/// Classes whose nouns occur in the token sequence.
std::vector<EventClass> classes_from_tokens(std::span<const int> ids);
std::array<double, kNumClasses> multi_hot(std::span<const EventClass> classes);

struct EventInterval {
  EventClass cls;
  double onset;
  double duration;
};

struct ManifestRow {
  std::string id;
  std::string split;
  /// Relative to the manifest directory.
  std::string wav;
  Caption caption;
  Relation relation = Relation::single;
  std::vector<EventInterval> events;
};

/// Tab-separated manifest, one row per clip, '#' header line.
struct Manifest {
  std::vector<ManifestRow> rows;

  std::vector<const ManifestRow*> split(std::string_view name) const;
  void write(const std::filesystem::path& path) const;
  static Manifest read(const std::filesystem::path& path);
};

inline constexpr const char* kManifestName = "manifest.tsv";

/// Ranks ids by FNV-1a hash; the first round(0.8 n) are train, the next round(0.1 n) val, the rest test.
std::vector<std::string> assign_splits(std::span<const std::string> ids);

/// Synthesizes n scenes under out_dir (wav/ subfolder) and writes the manifest.
Manifest generate_corpus(int n, std::uint64_t seed, const std::filesystem::path& out_dir);

/// A manifest row paired with its log-mel grid.
struct Clip {
  const ManifestRow* row = nullptr;
  dsp::MelSpectrogram mel;
  std::array<double, kNumClasses> tags{};
};

/// Loads the clips of one split (or all rows if split is empty), fitting each to cfg.frames().
std::vector<Clip> load_clips(const Manifest& m, const std::filesystem::path& root, std::string_view split,
                             const dsp::AudioConfig& cfg, const dsp::MelFilterbank& fb);

}  // namespace svqa::data
