#include <algorithm>
#include <cmath>
#include <complex>

#include <fmt/format.h>

#include "svqa/core/log.hpp"
#include "svqa/dsp/audio.hpp"

namespace svqa::dsp {

namespace {

// Norm over the full two-sided spectrum: interior bins appear twice.
double full_norm_sq(const Spectrum& s, const Array& target, bool diff) {
  double acc = 0.0;
  for (std::int64_t t = 0; t < s.frames; ++t) {
    for (std::int64_t k = 0; k < s.bins; ++k) {
      const double ref = target[static_cast<std::size_t>(t * s.bins + k)];
      const double v = diff ? std::abs(s.at(t, k)) - ref : ref;
      const double weight = (k == 0 || k == s.bins - 1) ? 1.0 : 2.0;
      acc += weight * v * v;
    }
  }
  return acc;
}

}  // namespace

GriffinLimResult griffin_lim(const MelSpectrogram& mel, const MelFilterbank& fb, const GriffinLimOptions& opts) {
  if (opts.iters < 1) throw DspError(fmt::format("griffin_lim: iters must be >= 1, got {}", opts.iters));
  if (mel.values.rank() != 2 || mel.bands() != fb.bands()) {
    throw DspError(fmt::format("griffin_lim: mel grid {} does not match a {}-band filterbank", shape_str(mel.values.shape()),
                               fb.bands()));
  }
  const int n_fft = fb.n_fft();
  const int hop = opts.hop;
  const std::int64_t frames = mel.frames();
  const std::int64_t bins = n_fft / 2 + 1;
  const int bands = fb.bands();

  // Target linear magnitude [frames, bins].
  Array target({frames, bins});
  std::vector<double> energy(static_cast<std::size_t>(bands));
  for (std::int64_t t = 0; t < frames; ++t) {
    for (int b = 0; b < bands; ++b) energy[b] = denormalize_log_energy(mel.values[static_cast<std::size_t>(b * frames + t)]);
    for (std::int64_t k = 0; k < bins; ++k) {
      const double* row = fb.pseudo_inverse().data() + k * bands;
      double v = 0.0;
      for (int b = 0; b < bands; ++b) v += row[b] * energy[b];
      target[static_cast<std::size_t>(t * bins + k)] = std::max(0.0, v);
    }
  }
  const double target_norm = std::sqrt(full_norm_sq(Spectrum{frames, bins, {}}, target, false));
  const double denom = target_norm > 0.0 ? target_norm : 1.0;

  Spectrum est{frames, bins, std::vector<std::complex<double>>(static_cast<std::size_t>(frames * bins))};
  for (std::size_t i = 0; i < est.values.size(); ++i) est.values[i] = target[i];

  GriffinLimResult result;
  std::vector<double> x = istft_frames(est, n_fft, hop);
  for (int it = 0; it <= opts.iters; ++it) {
    const Spectrum consistent = stft_frames(x, n_fft, hop, frames);
    result.convergence.push_back(std::sqrt(full_norm_sq(consistent, target, true)) / denom);
    if (it == opts.iters) break;
    for (std::size_t i = 0; i < est.values.size(); ++i) {
      const auto c = consistent.values[i];
      const double a = std::abs(c);
      est.values[i] = a > 0.0 ? c * (target[i] / a) : std::complex<double>(target[i], 0.0);
    }
    x = istft_frames(est, n_fft, hop);
  }

  const std::int64_t length = opts.length > 0 ? opts.length : frames * hop;
  const std::int64_t start = n_fft / 2;
  Waveform& w = result.waveform;
  w.sample_rate = fb.sample_rate();
  w.samples.assign(static_cast<std::size_t>(length), 0.0);
  std::int64_t clipped = 0;
  for (std::int64_t i = 0; i < length && start + i < static_cast<std::int64_t>(x.size()); ++i) {
    double v = x[static_cast<std::size_t>(start + i)];
    if (std::abs(v) > 1.0) {
      ++clipped;
      v = std::clamp(v, -1.0, 1.0);
    }
    w.samples[static_cast<std::size_t>(i)] = v;
  }
  if (clipped > 0) log::warn("griffin_lim: clipped {} samples to [-1, 1]", clipped);
  return result;
}

}  // namespace svqa::dsp
