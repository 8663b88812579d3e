#include <Eigen/Dense>

#include <algorithm>
#include <cmath>

#include <fmt/format.h>

#include "svqa/dsp/audio.hpp"

namespace svqa::dsp {

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank MelFilterbank::create(int sample_rate, int n_fft, int mel_bands) {
  if (sample_rate <= 0 || n_fft < 2 || mel_bands < 1) {
    throw DspError(fmt::format("mel filterbank: bad geometry sr={} n_fft={} bands={}", sample_rate, n_fft, mel_bands));
  }
  MelFilterbank fb;
  fb.sample_rate_ = sample_rate;
  fb.n_fft_ = n_fft;
  fb.bands_ = mel_bands;
  const int bins = n_fft / 2 + 1;
  const double top = hz_to_mel(sample_rate / 2.0);
  fb.edges_hz_.resize(static_cast<std::size_t>(mel_bands + 2));
  for (int i = 0; i < mel_bands + 2; ++i) fb.edges_hz_[i] = mel_to_hz(top * i / (mel_bands + 1));

  fb.weights_ = Array({mel_bands, bins});
  for (int b = 0; b < mel_bands; ++b) {
    const double lo = fb.edges_hz_[b], mid = fb.edges_hz_[b + 1], hi = fb.edges_hz_[b + 2];
    double row_sum = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / n_fft;
      const double v = std::max(0.0, std::min((f - lo) / (mid - lo), (hi - f) / (hi - mid)));
      fb.weights_[static_cast<std::size_t>(b * bins + k)] = v;
      row_sum += v;
    }
    if (!(row_sum > 0.0)) {
      throw DspError(fmt::format("mel filterbank: band {} covers no FFT bin (n_fft {} too small for {} bands)", b, n_fft,
                                 mel_bands));
    }
  }

  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> w(fb.weights_.data(), mel_bands, bins);
  const RowMat pinv = w.completeOrthogonalDecomposition().pseudoInverse();
  fb.pinv_ = Array({bins, mel_bands});
  Eigen::Map<RowMat>(fb.pinv_.data(), bins, mel_bands) = pinv;
  return fb;
}

double MelFilterbank::center_hz(int band) const {
  if (band < 0 || band >= bands_) throw DspError(fmt::format("mel filterbank: band {} out of range", band));
  return edges_hz_[static_cast<std::size_t>(band + 1)];
}

namespace {
const double kLogLo = std::log(kLogFloor);
const double kLogHi = std::log(kLogCeiling);
}  // namespace

double normalize_log_energy(double energy) {
  const double l = std::log(std::max(energy, kLogFloor));
  return std::clamp(2.0 * (l - kLogLo) / (kLogHi - kLogLo) - 1.0, -1.0, 1.0);
}

double denormalize_log_energy(double value) { return std::exp(kLogLo + (value + 1.0) * 0.5 * (kLogHi - kLogLo)); }

MelSpectrogram mel_spectrogram(const Waveform& w, const MelFilterbank& fb, int hop) {
  if (w.sample_rate != fb.sample_rate()) {
    throw DspError(fmt::format("mel_spectrogram: waveform rate {} does not match filterbank rate {}", w.sample_rate,
                               fb.sample_rate()));
  }
  const Spectrum spec = stft(w.samples, fb.n_fft(), hop);
  const auto bins = spec.bins;
  const int bands = fb.bands();
  MelSpectrogram out;
  out.hop = hop;
  out.window = fb.n_fft();
  out.values = Array({bands, spec.frames});
  const Array mag = spec.magnitude();
  for (int b = 0; b < bands; ++b) {
    const double* row = fb.weights().data() + b * bins;
    for (std::int64_t t = 0; t < spec.frames; ++t) {
      const double* m = mag.data() + t * bins;
      double e = 0.0;
      for (std::int64_t k = 0; k < bins; ++k) e += row[k] * m[k];
      out.values[static_cast<std::size_t>(b * spec.frames + t)] = normalize_log_energy(e);
    }
  }
  return out;
}

}  // namespace svqa::dsp
