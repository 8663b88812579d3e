#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/dsp/audio.hpp"

namespace svqa::dsp {

namespace {

std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 | static_cast<std::uint32_t>(p[2]) << 16 |
         static_cast<std::uint32_t>(p[3]) << 24;
}

std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | p[1] << 8); }

void put32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>(v >> 8));
}

}  // namespace

Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DspError(fmt::format("wav: cannot open {}", path.string()));
  const std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  auto fail = [&](std::string_view why) { return DspError(fmt::format("wav: {}: {}", path.string(), why)); };
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  int rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* h = bytes.data() + pos;
    const std::uint32_t size = le32(h + 4);
    const std::size_t body = pos + 8;
    if (size > bytes.size() - body) throw fail("truncated chunk");
    if (std::memcmp(h, "fmt ", 4) == 0) {
      if (size < 16) throw fail("fmt chunk too short");
      const unsigned char* f = bytes.data() + body;
      const auto format = le16(f), channels = le16(f + 2), bits = le16(f + 14);
      if (format != 1) throw fail(fmt::format("unsupported encoding (format tag {}), expected PCM", format));
      if (channels != 1) throw fail(fmt::format("expected mono, got {} channels", channels));
      if (bits != 16) throw fail(fmt::format("expected 16-bit samples, got {}", bits));
      rate = static_cast<int>(le32(f + 4));
      if (rate <= 0) throw fail("sample rate must be positive");
      have_fmt = true;
    } else if (std::memcmp(h, "data", 4) == 0) {
      if (!have_fmt) throw fail("data chunk before fmt chunk");
      if (size % 2 != 0) throw fail("odd data size for 16-bit samples");
      Waveform w;
      w.sample_rate = rate;
      w.samples.resize(size / 2);
      const unsigned char* d = bytes.data() + body;
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        w.samples[i] = static_cast<std::int16_t>(le16(d + 2 * i)) / 32767.0;
      }
      return w;
    }
    pos = body + size + (size & 1);
  }
  throw fail(have_fmt ? "missing data chunk" : "missing fmt chunk");
}

void write_wav(const std::filesystem::path& path, const Waveform& w) {
  if (w.sample_rate <= 0) throw DspError("wav: sample rate must be positive");
  const auto n = static_cast<std::uint32_t>(w.samples.size());
  std::string buf;
  buf.reserve(44 + 2 * n);
  buf += "RIFF";
  put32(buf, 36 + 2 * n);
  buf += "WAVEfmt ";
  put32(buf, 16);
  put16(buf, 1);
  put16(buf, 1);
  put32(buf, static_cast<std::uint32_t>(w.sample_rate));
  put32(buf, static_cast<std::uint32_t>(w.sample_rate) * 2);
  put16(buf, 2);
  put16(buf, 16);
  buf += "data";
  put32(buf, 2 * n);
  std::size_t clipped = 0;
  for (double s : w.samples) {
    if (!std::isfinite(s)) throw DspError(fmt::format("wav: non-finite sample while writing {}", path.string()));
    if (std::abs(s) > 1.0) ++clipped;
    const auto q = static_cast<std::int16_t>(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0));
    put16(buf, static_cast<std::uint16_t>(q));
  }
  if (clipped > 0) log::warn("wav: clipped {} samples writing {}", clipped, path.string());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DspError(fmt::format("wav: cannot create {}", path.string()));
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DspError(fmt::format("wav: write failed for {}", path.string()));
}

}  // namespace svqa::dsp
