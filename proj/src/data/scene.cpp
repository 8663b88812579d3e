#include <algorithm>
#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "svqa/core/rng.hpp"
#include "svqa/data/dataset.hpp"

namespace svqa::data {

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames{"tone", "chirp", "noise_burst", "square_beep", "am_tone",
                                                                "click_train"};
constexpr std::array<std::string_view, 3> kRelationNames{"single", "sequence", "overlap"};

void sample_params(SoundEvent& e, Rng& rng) {
  const bool flip = rng.uniform() < 0.5;
  e.gain = rng.uniform(0.45, 0.9);
  switch (e.cls) {
    case EventClass::tone:
      e.freq = flip ? rng.uniform(1000.0, 1800.0) : rng.uniform(220.0, 450.0);
      break;
    case EventClass::chirp: {
      const double lo = rng.uniform(300.0, 600.0), hi = rng.uniform(1600.0, 2600.0);
      e.freq = flip ? lo : hi;
      e.freq_end = flip ? hi : lo;
      break;
    }
    case EventClass::noise_burst:
      e.gain = flip ? rng.uniform(0.6, 0.9) : rng.uniform(0.15, 0.3);
      break;
    case EventClass::square_beep:
      e.freq = flip ? rng.uniform(900.0, 1400.0) : rng.uniform(200.0, 350.0);
      break;
    case EventClass::am_tone:
      e.freq = rng.uniform(500.0, 800.0);
      e.am_rate = flip ? rng.uniform(10.0, 16.0) : rng.uniform(2.0, 4.0);
      break;
    case EventClass::click_train:
      e.click_rate = flip ? rng.uniform(18.0, 28.0) : rng.uniform(6.0, 9.0);
      break;
  }
}

}  // namespace

std::string_view class_name(EventClass c) { return kClassNames.at(static_cast<std::size_t>(c)); }

std::optional<EventClass> class_from_name(std::string_view name) {
  for (int i = 0; i < kNumClasses; ++i) {
    if (kClassNames[i] == name) return static_cast<EventClass>(i);
  }
  return std::nullopt;
}

std::string_view relation_name(Relation r) { return kRelationNames.at(static_cast<std::size_t>(r)); }

std::optional<Relation> relation_from_name(std::string_view name) {
  for (int i = 0; i < 3; ++i) {
    if (kRelationNames[i] == name) return static_cast<Relation>(i);
  }
  return std::nullopt;
}

std::vector<EventClass> SceneSpec::classes() const {
  std::vector<EventClass> out;
  for (const auto& e : events) out.push_back(e.cls);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

void SceneSpec::validate() const {
  if (events.empty() || events.size() > 3) throw DatasetError(fmt::format("scene: {} events, expected 1-3", events.size()));
  if (classes().size() != events.size()) throw DatasetError("scene: event classes must be distinct");
  if (template_id < 0 || template_id >= kNumTemplates) throw DatasetError(fmt::format("scene: bad template {}", template_id));
  if ((relation == Relation::single) != (events.size() == 1)) {
    throw DatasetError(fmt::format("scene: relation '{}' with {} events", relation_name(relation), events.size()));
  }
  for (const auto& e : events) {
    if (e.onset < 0.0 || e.end() > clip_seconds + 1e-9) {
      throw DatasetError(fmt::format("scene: {} event [{}, {}] outside the clip", class_name(e.cls), e.onset, e.end()));
    }
    if (e.duration < 4.0 * kFadeSeconds) throw DatasetError("scene: event shorter than its fades");
    if (!(e.gain > 0.0 && e.gain <= 1.0)) throw DatasetError(fmt::format("scene: gain {} outside (0, 1]", e.gain));
  }
  for (std::size_t i = 0; i < events.size(); ++i) {
    for (std::size_t j = i + 1; j < events.size(); ++j) {
      const double ov = std::min(events[i].end(), events[j].end()) - std::max(events[i].onset, events[j].onset);
      if (relation == Relation::sequence && ov > 0.0) throw DatasetError("scene: sequence events overlap");
      if (relation == Relation::overlap && ov < kMinOverlapSeconds - 1e-9) {
        throw DatasetError(fmt::format("scene: overlap of {:.3f} s is below {} s", ov, kMinOverlapSeconds));
      }
    }
  }
}

SceneSpec sample_scene(std::uint64_t seed, double clip_seconds, int sample_rate) {
  Rng rng(seed, 1);
  SceneSpec spec;
  spec.seed = seed;
  spec.clip_seconds = clip_seconds;
  spec.sample_rate = sample_rate;
  spec.template_id = static_cast<int>(rng.below(kNumTemplates));

  std::array<int, kNumClasses> order{0, 1, 2, 3, 4, 5};
  rng.shuffle(std::span<int>(order));
  const int k = 1 + static_cast<int>(rng.below(3));
  spec.relation = k == 1 ? Relation::single : (rng.uniform() < 0.5 ? Relation::sequence : Relation::overlap);

  const double L = clip_seconds;
  double core_start = 0.0, core_len = 0.0;
  if (spec.relation == Relation::overlap) {
    core_len = rng.uniform(0.7, std::min(1.2, L - 0.6));
    core_start = rng.uniform(0.3, L - 0.3 - core_len);
  }
  for (int j = 0; j < k; ++j) {
    SoundEvent e;
    e.cls = static_cast<EventClass>(order[j]);
    switch (spec.relation) {
      case Relation::single:
        e.duration = rng.uniform(0.8, std::min(2.2, L));
        e.onset = rng.uniform(0.0, L - e.duration);
        break;
      case Relation::sequence: {
        const double slot = L / k;
        e.duration = rng.uniform(0.55, 0.9) * slot;
        e.onset = slot * j + rng.uniform(0.0, slot - e.duration);
        break;
      }
      case Relation::overlap: {
        e.onset = std::max(0.0, core_start - rng.uniform(0.0, 0.3));
        const double end = std::min(L, core_start + core_len + rng.uniform(0.0, 0.3));
        e.duration = end - e.onset;
        break;
      }
    }
    sample_params(e, rng);
    spec.events.push_back(e);
  }
  spec.validate();
  return spec;
}

dsp::Waveform synth_scene(const SceneSpec& spec) {
  spec.validate();
  const int sr = spec.sample_rate;
  const auto n = static_cast<std::int64_t>(std::llround(spec.clip_seconds * sr));
  dsp::Waveform w{std::vector<double>(static_cast<std::size_t>(n), 0.0), sr};
  const double two_pi = 2.0 * std::numbers::pi;
  const double fade = kFadeSeconds * sr;

  for (std::size_t ei = 0; ei < spec.events.size(); ++ei) {
    const SoundEvent& e = spec.events[ei];
    Rng rng(spec.seed, 100 + ei);
    const std::int64_t i0 = std::llround(e.onset * sr);
    const std::int64_t i1 = std::min<std::int64_t>(n, std::llround(e.end() * sr));
    const double dur = static_cast<double>(i1 - i0) / sr;
    double click_phase = 1.0;
    double click_env = 0.0;
    for (std::int64_t i = i0; i < i1; ++i) {
      const double t = static_cast<double>(i - i0) / sr;
      double v = 0.0;
      switch (e.cls) {
        case EventClass::tone:
          v = std::sin(two_pi * e.freq * t);
          break;
        case EventClass::chirp: {
          const double slope = (e.freq_end - e.freq) / dur;
          v = std::sin(two_pi * (e.freq * t + 0.5 * slope * t * t));
          break;
        }
        case EventClass::noise_burst:
          v = std::clamp(0.35 * rng.normal(), -1.0, 1.0);
          break;
        case EventClass::square_beep:
          // Band-limited square wave: odd harmonics below 7 kHz.
          for (int h = 1; h * e.freq < 7000.0; h += 2) v += std::sin(two_pi * h * e.freq * t) / h;
          v *= 2.0 / std::numbers::pi;
          break;
        case EventClass::am_tone:
          v = (0.5 + 0.5 * std::sin(two_pi * e.am_rate * t)) * std::sin(two_pi * e.freq * t);
          break;
        case EventClass::click_train:
          click_phase += e.click_rate / sr;
          if (click_phase >= 1.0) {
            click_phase -= 1.0;
            click_env = 1.0;
          }
          v = click_env * std::sin(two_pi * 4000.0 * click_phase / e.click_rate);
          click_env *= std::exp(-1.0 / (0.003 * sr));
          break;
      }
      const double env = std::min({1.0, static_cast<double>(i - i0) / fade, static_cast<double>(i1 - 1 - i) / fade});
      w.samples[static_cast<std::size_t>(i)] += e.gain * env * v;
    }
  }
  double peak = 0.0;
  for (double v : w.samples) peak = std::max(peak, std::abs(v));
  if (peak > kPeakLimit) {
    const double s = kPeakLimit / peak;
    for (double& v : w.samples) v *= s;
  }
  return w;
}

}  // namespace svqa::data
