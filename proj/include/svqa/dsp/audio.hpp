#pragma once

#include <complex>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "svqa/core/array.hpp"

namespace svqa::dsp {

class DspError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AudioConfig {
  int sample_rate = 16000;
  int n_fft = 512;
  int hop = 128;
  int mel_bands = 40;
  double clip_seconds = 2.56;
  int griffin_lim_iters = 32;

  std::int64_t clip_samples() const;
  /// ceil(clip_samples / hop)
  std::int64_t frames() const;
  void validate() const;
  friend bool operator==(const AudioConfig&, const AudioConfig&) = default;
};

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
};

/// Short-time spectrum, row-major [frames, n_fft/2 + 1].
struct Spectrum {
  std::int64_t frames = 0;
  std::int64_t bins = 0;
  std::vector<std::complex<double>> values;

  std::complex<double>& at(std::int64_t t, std::int64_t k) { return values[static_cast<std::size_t>(t * bins + k)]; }
  std::complex<double> at(std::int64_t t, std::int64_t k) const { return values[static_cast<std::size_t>(t * bins + k)]; }
  /// |X| as an Array [frames, bins].
  Array magnitude() const;
};

std::vector<double> hann_window(int n);

/// Centered STFT with a periodic Hann window. The signal is reflect-padded by
/// n_fft/2 on the left and enough on the right that there are ceil(len/hop) frames.
Spectrum stft(std::span<const double> signal, int n_fft, int hop);

/// STFT of an already padded signal: frame t covers [t*hop, t*hop + n_fft).
Spectrum stft_frames(std::span<const double> padded, int n_fft, int hop, std::int64_t frames);

/// Least-squares inverse of stft_frames: sum_t w * ifft(Y_t) / sum_t w^2.
/// Samples with zero window coverage are set to 0.
std::vector<double> istft_frames(const Spectrum& spec, int n_fft, int hop);

/// Nonnegative triangular filters on the HTK mel scale, mel = 2595 log10(1 + f/700).
class MelFilterbank {
 public:
  static MelFilterbank create(int sample_rate, int n_fft, int mel_bands);

  int sample_rate() const noexcept { return sample_rate_; }
  int n_fft() const noexcept { return n_fft_; }
  int bands() const noexcept { return bands_; }
  /// [bands, n_fft/2 + 1]
  const Array& weights() const noexcept { return weights_; }
  /// Moore-Penrose pseudo-inverse, [n_fft/2 + 1, bands].
  const Array& pseudo_inverse() const noexcept { return pinv_; }
  /// Centre frequency of a band in Hz.
  double center_hz(int band) const;

 private:
  int sample_rate_ = 0;
  int n_fft_ = 0;
  int bands_ = 0;
  std::vector<double> edges_hz_;
  Array weights_;
  Array pinv_;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Log-mel grid [M, T] normalized to [-1, 1].
struct MelSpectrogram {
  Array values;
  int hop = 128;
  int window = 512;

  std::int64_t bands() const { return values.dim(0); }
  std::int64_t frames() const { return values.dim(1); }
};

inline constexpr double kLogFloor = 1e-5;
inline constexpr double kLogCeiling = 1e3;

/// Affine map of log(max(e, floor)) from [log floor, log ceiling] onto [-1, 1], clamped.
double normalize_log_energy(double energy);
/// Inverse of normalize_log_energy on the unclamped range.
double denormalize_log_energy(double value);

MelSpectrogram mel_spectrogram(const Waveform& w, const MelFilterbank& fb, int hop);

struct GriffinLimOptions {
  int iters = 32;
  int hop = 128;
  /// Output length in samples; 0 means frames * hop.
  std::int64_t length = 0;
};

struct GriffinLimResult {
  Waveform waveform;
  /// Spectral convergence ||(|STFT x_i| - S)|| / ||S|| before each projection and after the last, full-spectrum norm.
  std::vector<double> convergence;
};

/// Phase reconstruction from a log-mel grid. Mel energies are mapped back to
/// linear magnitude with the clamped pseudo-inverse; initial phase is zero.
GriffinLimResult griffin_lim(const MelSpectrogram& mel, const MelFilterbank& fb, const GriffinLimOptions& opts);

/// Reads RIFF/WAVE PCM 16-bit mono.
Waveform read_wav(const std::filesystem::path& path);
/// Writes PCM 16-bit mono. Samples outside [-1, 1] are clipped with a warning.
void write_wav(const std::filesystem::path& path, const Waveform& w);

}  // namespace svqa::dsp
