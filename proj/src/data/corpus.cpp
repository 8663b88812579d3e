#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/core/rng.hpp"
#include "svqa/data/dataset.hpp"

namespace svqa::data {

namespace {

constexpr std::string_view kHeader = "#id\tsplit\twav\tcaption\ttokens\ttags\trelation\tevents";

std::vector<std::string> split_on(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, int line) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DatasetError(fmt::format("manifest line {}: '{}' is not a number", line, s));
  }
  return v;
}

}  // namespace

std::vector<const ManifestRow*> Manifest::split(std::string_view name) const {
  std::vector<const ManifestRow*> out;
  for (const auto& r : rows) {
    if (name.empty() || r.split == name) out.push_back(&r);
  }
  return out;
}

void Manifest::write(const std::filesystem::path& path) const {
  std::ostringstream out;
  out << kHeader << '\n';
  for (const auto& r : rows) {
    std::vector<std::string> tokens, tags, events;
    for (int t : r.caption.token_ids) tokens.push_back(std::to_string(t));
    for (auto c : r.caption.class_tags) tags.emplace_back(class_name(c));
    for (const auto& e : r.events) events.push_back(fmt::format("{}@{:.4f}+{:.4f}", class_name(e.cls), e.onset, e.duration));
    out << fmt::format("{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n", r.id, r.split, r.wav, r.caption.text, fmt::join(tokens, " "),
                       fmt::join(tags, ","), relation_name(r.relation), fmt::join(events, ";"));
  }
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw DatasetError(fmt::format("manifest: cannot create {}", path.string()));
  f << out.str();
  if (!f) throw DatasetError(fmt::format("manifest: write failed for {}", path.string()));
}

Manifest Manifest::read(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw DatasetError(fmt::format("manifest: cannot open {}", path.string()));
  Manifest m;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto cols = split_on(line, '\t');
    if (cols.size() != 8) {
      throw DatasetError(fmt::format("manifest line {}: expected 8 tab-separated fields, got {}", lineno, cols.size()));
    }
    ManifestRow r;
    r.id = cols[0];
    r.split = cols[1];
    r.wav = cols[2];
    r.caption.text = cols[3];
    std::istringstream toks(cols[4]);
    for (std::string t; toks >> t;) r.caption.token_ids.push_back(parse_number<int>(t, lineno));
    if (!cols[5].empty()) {
      for (const auto& t : split_on(cols[5], ',')) {
        const auto c = class_from_name(t);
        if (!c) throw DatasetError(fmt::format("manifest line {}: unknown class '{}'", lineno, t));
        r.caption.class_tags.push_back(*c);
      }
    }
    const auto rel = relation_from_name(cols[6]);
    if (!rel) throw DatasetError(fmt::format("manifest line {}: unknown relation '{}'", lineno, cols[6]));
    r.relation = *rel;
    for (const auto& ev : split_on(cols[7], ';')) {
      const auto at = ev.find('@'), plus = ev.find('+');
      if (at == std::string::npos || plus == std::string::npos || plus < at) {
        throw DatasetError(fmt::format("manifest line {}: malformed event '{}'", lineno, ev));
      }
      const auto c = class_from_name(ev.substr(0, at));
      if (!c) throw DatasetError(fmt::format("manifest line {}: unknown class in '{}'", lineno, ev));
      r.events.push_back({*c, parse_number<double>(std::string_view(ev).substr(at + 1, plus - at - 1), lineno),
                          parse_number<double>(std::string_view(ev).substr(plus + 1), lineno)});
    }
    m.rows.push_back(std::move(r));
  }
  if (m.rows.empty()) throw DatasetError(fmt::format("manifest: {} has no rows", path.string()));
  return m;
}

std::vector<std::string> assign_splits(std::span<const std::string> ids) {
  const std::size_t n = ids.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<std::uint64_t> h(n);
  for (std::size_t i = 0; i < n; ++i) h[i] = fnv1a64(ids[i]);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return h[a] != h[b] ? h[a] < h[b] : ids[a] < ids[b]; });
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  std::vector<std::string> out(n);
  for (std::size_t r = 0; r < n; ++r) out[order[r]] = r < n_train ? "train" : (r < n_train + n_val ? "val" : "test");
  return out;
}

Manifest generate_corpus(int n, std::uint64_t seed, const std::filesystem::path& out_dir) {
  if (n < 1) throw DatasetError(fmt::format("corpus: n must be >= 1, got {}", n));
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "wav", ec);
  if (ec) throw DatasetError(fmt::format("corpus: cannot create {}: {}", (out_dir / "wav").string(), ec.message()));

  Manifest m;
  std::vector<std::string> ids;
  const Rng root(seed, 7);
  for (int i = 0; i < n; ++i) {
    const auto id = fmt::format("scene_{:05d}", i);
    const SceneSpec spec = sample_scene(root.split(static_cast<std::uint64_t>(i)).next_u64());
    ManifestRow r;
    r.id = id;
    r.wav = fmt::format("wav/{}.wav", id);
    r.caption = caption_of(spec);
    r.relation = spec.relation;
    for (const auto& e : spec.events) r.events.push_back({e.cls, e.onset, e.duration});
    try {
      dsp::write_wav(out_dir / r.wav, synth_scene(spec));
    } catch (const dsp::DspError& e) {
      throw DatasetError(fmt::format("corpus: {}", e.what()));
    }
    ids.push_back(id);
    m.rows.push_back(std::move(r));
  }
  const auto splits = assign_splits(ids);
  for (std::size_t i = 0; i < m.rows.size(); ++i) m.rows[i].split = splits[i];
  m.write(out_dir / kManifestName);
  log::info("corpus: wrote {} clips to {}", n, out_dir.string());
  return m;
}

std::vector<Clip> load_clips(const Manifest& m, const std::filesystem::path& root, std::string_view split,
                             const dsp::AudioConfig& cfg, const dsp::MelFilterbank& fb) {
  std::vector<Clip> out;
  const auto want = static_cast<std::size_t>(cfg.clip_samples());
  for (const ManifestRow* r : m.split(split)) {
    dsp::Waveform w = dsp::read_wav(root / r->wav);
    if (w.sample_rate != cfg.sample_rate) {
      throw DatasetError(fmt::format("corpus: {} has rate {}, config expects {}", r->wav, w.sample_rate, cfg.sample_rate));
    }
    w.samples.resize(want, 0.0);
    Clip c;
    c.row = r;
    c.mel = dsp::mel_spectrogram(w, fb, cfg.hop);
    c.tags = multi_hot(r->caption.class_tags);
    out.push_back(std::move(c));
  }
  return out;
}

}  // namespace svqa::data
