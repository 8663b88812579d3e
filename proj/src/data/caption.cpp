#include <algorithm>
#include <cctype>
#include <sstream>

#include <fmt/format.h>

#include "svqa/data/dataset.hpp"

namespace svqa::data {

namespace {

constexpr std::array<std::string_view, kNumClasses> kNouns{"tone", "chirp", "noise", "beep", "hum", "clicks"};

// [class][template]
constexpr std::array<std::array<std::string_view, kNumTemplates>, kNumClasses> kVerbs{{
    {"plays", "rings", "sounds"},
    {"sweeps", "glides", "chirps"},
    {"hisses", "rushes", "roars"},
    {"beeps", "buzzes", "pulses"},
    {"hums", "wobbles", "drones"},
    {"tick", "rattle", "patter"},
}};

enum Adj { kHigh, kLow, kRising, kFalling, kLoud, kSoft, kSlow, kFast, kNumAdj };

constexpr std::array<std::array<std::string_view, kNumTemplates>, kNumAdj> kAdjectives{{
    {"high", "bright", "shrill"},
    {"low", "deep", "dull"},
    {"rising", "upward", "climbing"},
    {"falling", "downward", "sinking"},
    {"loud", "strong", "harsh"},
    {"soft", "quiet", "faint"},
    {"slow", "lazy", "gentle"},
    {"fast", "rapid", "quick"},
}};

std::string_view article(EventClass c, int template_id) {
  switch (template_id) {
    case 0:
      return c == EventClass::click_train ? "some" : "a";
    case 1:
      return "";
    default:
      return "the";
  }
}

Vocabulary build_standard() {
  std::vector<std::string> w{"<pad>", "<cls>", "<unk>", "a", "some", "the", "then", "while"};
  for (auto n : kNouns) w.emplace_back(n);
  for (const auto& row : kVerbs)
    for (auto v : row) w.emplace_back(v);
  for (const auto& row : kAdjectives)
    for (auto a : row) w.emplace_back(a);
  return Vocabulary::from_words(std::move(w));
}

}  // namespace

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
  Vocabulary v;
  v.words_ = std::move(words);
  return v;
}

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v = build_standard();
  return v;
}

int Vocabulary::id(std::string_view word) const {
  const auto it = std::find(words_.begin(), words_.end(), word);
  return it == words_.end() ? kUnk : static_cast<int>(it - words_.begin());
}

std::string_view Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw DatasetError(fmt::format("vocabulary: token id {} out of range", id));
  return words_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::string lowered(text);
  std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char c) { return std::tolower(c); });
  std::istringstream in(lowered);
  std::vector<int> ids;
  for (std::string tok; in >> tok;) ids.push_back(id(tok));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (int id : ids) {
    if (id == kPad || id == kCls) continue;
    if (!out.empty()) out += ' ';
    out += word(id);
  }
  return out;
}

std::string_view class_noun(EventClass c) { return kNouns.at(static_cast<std::size_t>(c)); }

std::string_view adjective(const SoundEvent& e, int template_id) {
  Adj a = kHigh;
  switch (e.cls) {
    case EventClass::tone:
    case EventClass::square_beep:
      a = e.freq >= 800.0 ? kHigh : kLow;
      break;
    case EventClass::chirp:
      a = e.freq_end > e.freq ? kRising : kFalling;
      break;
    case EventClass::noise_burst:
      a = e.gain >= 0.45 ? kLoud : kSoft;
      break;
    case EventClass::am_tone:
      a = e.am_rate >= 8.0 ? kFast : kSlow;
      break;
    case EventClass::click_train:
      a = e.click_rate >= 10.0 ? kFast : kSlow;
      break;
  }
  return kAdjectives[a].at(static_cast<std::size_t>(template_id));
}

Caption caption_of(const SceneSpec& spec) {
  std::vector<const SoundEvent*> order;
  for (const auto& e : spec.events) order.push_back(&e);
  if (spec.relation == Relation::sequence) {
    std::stable_sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->onset < b->onset; });
  }
  const std::string_view joiner = spec.relation == Relation::overlap ? "while" : "then";
  Caption c;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const SoundEvent& e = *order[i];
    if (i > 0) c.text += fmt::format(" {} ", joiner);
    const auto art = article(e.cls, spec.template_id);
    if (!art.empty()) c.text += fmt::format("{} ", art);
    c.text += fmt::format("{} {} {}", adjective(e, spec.template_id), class_noun(e.cls),
                          kVerbs[static_cast<std::size_t>(e.cls)][static_cast<std::size_t>(spec.template_id)]);
  }
  c.token_ids = Vocabulary::standard().encode(c.text);
  c.class_tags = spec.classes();
  return c;
}

std::vector<EventClass> classes_from_tokens(std::span<const int> ids) {
  const auto& v = Vocabulary::standard();
  std::vector<EventClass> out;
  for (int c = 0; c < kNumClasses; ++c) {
    const int noun = v.id(kNouns[c]);
    if (std::find(ids.begin(), ids.end(), noun) != ids.end()) out.push_back(static_cast<EventClass>(c));
  }
  return out;
}

std::array<double, kNumClasses> multi_hot(std::span<const EventClass> classes) {
  std::array<double, kNumClasses> out{};
  for (auto c : classes) out[static_cast<std::size_t>(c)] = 1.0;
  return out;
}

}  // namespace svqa::data
