#include <cmath>
#include <numbers>

#include <fmt/format.h>

#include "real_fft.hpp"
#include "svqa/dsp/audio.hpp"

namespace svqa::dsp {

std::int64_t AudioConfig::clip_samples() const { return std::llround(clip_seconds * sample_rate); }

std::int64_t AudioConfig::frames() const { return (clip_samples() + hop - 1) / hop; }

void AudioConfig::validate() const {
  if (sample_rate <= 0) throw DspError(fmt::format("audio: sample_rate must be positive, got {}", sample_rate));
  if (n_fft < 4 || n_fft % 2 != 0) throw DspError(fmt::format("audio: n_fft must be even and >= 4, got {}", n_fft));
  if (hop <= 0 || hop > n_fft) throw DspError(fmt::format("audio: hop must be in [1, n_fft], got {}", hop));
  if (mel_bands <= 0 || mel_bands > n_fft / 2) {
    throw DspError(fmt::format("audio: mel_bands must be in [1, n_fft/2], got {}", mel_bands));
  }
  if (!(clip_seconds > 0.0)) throw DspError("audio: clip_seconds must be positive");
  if (griffin_lim_iters < 1) throw DspError("audio: griffin_lim_iters must be >= 1");
}

Array Spectrum::magnitude() const {
  Array out({frames, bins});
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = std::abs(values[i]);
  return out;
}

std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

namespace {

void check_geometry(int n_fft, int hop) {
  if (n_fft < 2 || n_fft % 2 != 0) throw DspError(fmt::format("stft: n_fft must be even, got {}", n_fft));
  if (hop <= 0 || hop > n_fft) throw DspError(fmt::format("stft: hop must be in [1, n_fft], got {}", hop));
}

std::int64_t reflect(std::int64_t i, std::int64_t len) {
  if (len == 1) return 0;
  const std::int64_t period = 2 * (len - 1);
  i %= period;
  if (i < 0) i += period;
  return i < len ? i : period - i;
}

}  // namespace

Spectrum stft(std::span<const double> signal, int n_fft, int hop) {
  check_geometry(n_fft, hop);
  if (signal.empty()) throw DspError("stft: empty waveform");
  const auto len = static_cast<std::int64_t>(signal.size());
  const std::int64_t frames = (len + hop - 1) / hop;
  const std::int64_t padded_len = (frames - 1) * hop + n_fft;
  std::vector<double> padded(static_cast<std::size_t>(padded_len));
  const std::int64_t left = n_fft / 2;
  for (std::int64_t p = 0; p < padded_len; ++p) padded[p] = signal[reflect(p - left, len)];
  return stft_frames(padded, n_fft, hop, frames);
}

Spectrum stft_frames(std::span<const double> padded, int n_fft, int hop, std::int64_t frames) {
  check_geometry(n_fft, hop);
  if (frames < 1 || static_cast<std::int64_t>(padded.size()) < (frames - 1) * hop + n_fft) {
    throw DspError(fmt::format("stft: {} samples cannot hold {} frames", padded.size(), frames));
  }
  Spectrum spec;
  spec.frames = frames;
  spec.bins = n_fft / 2 + 1;
  spec.values.resize(static_cast<std::size_t>(frames * spec.bins));
  const auto w = hann_window(n_fft);
  detail::RealFft fft(n_fft);
  std::vector<double> buf(static_cast<std::size_t>(n_fft));
  for (std::int64_t t = 0; t < frames; ++t) {
    const double* src = padded.data() + t * hop;
    for (int i = 0; i < n_fft; ++i) buf[i] = src[i] * w[i];
    fft.forward(buf.data(), &spec.at(t, 0));
  }
  return spec;
}

std::vector<double> istft_frames(const Spectrum& spec, int n_fft, int hop) {
  check_geometry(n_fft, hop);
  if (spec.bins != n_fft / 2 + 1) {
    throw DspError(fmt::format("istft: spectrum has {} bins, n_fft {} needs {}", spec.bins, n_fft, n_fft / 2 + 1));
  }
  const std::int64_t len = (spec.frames - 1) * hop + n_fft;
  std::vector<double> out(static_cast<std::size_t>(len), 0.0);
  std::vector<double> norm(static_cast<std::size_t>(len), 0.0);
  const auto w = hann_window(n_fft);
  detail::RealFft fft(n_fft);
  std::vector<double> buf(static_cast<std::size_t>(n_fft));
  for (std::int64_t t = 0; t < spec.frames; ++t) {
    fft.inverse(spec.values.data() + t * spec.bins, buf.data());
    double* dst = out.data() + t * hop;
    double* nd = norm.data() + t * hop;
    for (int i = 0; i < n_fft; ++i) {
      dst[i] += w[i] * buf[i];
      nd[i] += w[i] * w[i];
    }
  }
  for (std::int64_t i = 0; i < len; ++i) out[i] = norm[i] > 1e-12 ? out[i] / norm[i] : 0.0;
  return out;
}

}  // namespace svqa::dsp
