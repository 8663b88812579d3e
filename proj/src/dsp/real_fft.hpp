#pragma once

#include <fftw3.h>

#include <complex>

namespace svqa::dsp::detail {

/// Owns a pair of FFTW plans for a fixed real transform size.
class RealFft {
 public:
  explicit RealFft(int n);
  ~RealFft();
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  int size() const noexcept { return n_; }
  /// n real samples -> n/2 + 1 bins.
  void forward(const double* in, std::complex<double>* out);
  /// n/2 + 1 bins -> n real samples, scaled by 1/n.
  void inverse(const std::complex<double>* in, double* out);

 private:
  int n_;
  double* real_;
  fftw_complex* spec_;
  fftw_plan fwd_;
  fftw_plan inv_;
};

}  // namespace svqa::dsp::detail
