#include "real_fft.hpp"

#include <algorithm>
#include <cstring>

namespace svqa::dsp::detail {

RealFft::RealFft(int n)
    : n_(n),
      real_(fftw_alloc_real(static_cast<std::size_t>(n))),
      spec_(fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1))),
      fwd_(fftw_plan_dft_r2c_1d(n, real_, spec_, FFTW_ESTIMATE)),
      inv_(fftw_plan_dft_c2r_1d(n, spec_, real_, FFTW_ESTIMATE)) {}

RealFft::~RealFft() {
  fftw_destroy_plan(fwd_);
  fftw_destroy_plan(inv_);
  fftw_free(real_);
  fftw_free(spec_);
}

void RealFft::forward(const double* in, std::complex<double>* out) {
  std::copy_n(in, n_, real_);
  fftw_execute(fwd_);
  std::memcpy(static_cast<void*>(out), spec_, sizeof(fftw_complex) * static_cast<std::size_t>(n_ / 2 + 1));
}

void RealFft::inverse(const std::complex<double>* in, double* out) {
  // c2r destroys its input, so it always runs on the internal copy.
  std::memcpy(spec_, static_cast<const void*>(in), sizeof(fftw_complex) * static_cast<std::size_t>(n_ / 2 + 1));
  fftw_execute(inv_);
  const double s = 1.0 / static_cast<double>(n_);
  for (int i = 0; i < n_; ++i) out[i] = real_[i] * s;
}

}  // namespace svqa::dsp::detail
