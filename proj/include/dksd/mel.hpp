#pragma once

// 80-bin log-mel spectrogram: 50 ms Hann window, 12.5 ms hop, 1024-point FFT,
// triangular filters on the 2595*log10(1 + f/700) mel scale, natural log.

#include <fftw3.h>

#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "dksd/audio.hpp"
#include "dksd/autodiff.hpp"

namespace dksd {

inline constexpr int kWindow = 800;
inline constexpr int kHop = 200;
inline constexpr int kFftSize = 1024;
inline constexpr int kMels = 80;
inline const double kLogFloor = std::log(1e-10);

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

/// Center frequencies (Hz) of the filters; edges are at 0 and 8000 Hz.
inline std::vector<double> mel_center_frequencies(int n_mels = kMels, double f_max = 8000.0) {
  const double top = hz_to_mel(f_max);
  std::vector<double> c(static_cast<std::size_t>(n_mels));
  for (int i = 0; i < n_mels; ++i) c[static_cast<std::size_t>(i)] = mel_to_hz(top * (i + 1) / (n_mels + 1));
  return c;
}

/// n_mels x (fft/2 + 1) weights, unit peak triangles.
inline Matrix<double> mel_filterbank(int n_mels = kMels, int fft = kFftSize, int rate = kSampleRate) {
  const double f_max = rate / 2.0;
  const double top = hz_to_mel(f_max);
  std::vector<double> edges(static_cast<std::size_t>(n_mels + 2));
  for (int i = 0; i < n_mels + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(top * i / (n_mels + 1));
  const int bins = fft / 2 + 1;
  Matrix<double> fb = Matrix<double>::Zero(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[static_cast<std::size_t>(m)];
    const double mid = edges[static_cast<std::size_t>(m + 1)];
    const double hi = edges[static_cast<std::size_t>(m + 2)];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * rate / fft;
      double w = 0.0;
      if (f > lo && f <= mid) w = (f - lo) / (mid - lo);
      else if (f > mid && f < hi) w = (hi - f) / (hi - mid);
      fb(m, k) = w;
    }
  }
  return fb;
}

inline std::vector<double> hann_window(int n = kWindow) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n);
  return w;
}

inline long frame_count(long samples) { return samples < kWindow ? 0 : 1 + (samples - kWindow) / kHop; }

namespace detail {

// FFTW planning is not thread-safe; plan setup and teardown take a lock.
class RealFft {
 public:
  RealFft() {
    std::lock_guard<std::mutex> lock(mutex());
    in_ = fftw_alloc_real(kFftSize);
    out_ = fftw_alloc_complex(kFftSize / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(kFftSize, in_, out_, FFTW_ESTIMATE);
  }
  ~RealFft() {
    std::lock_guard<std::mutex> lock(mutex());
    fftw_destroy_plan(plan_);
    fftw_free(in_);
    fftw_free(out_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  double* input() { return in_; }
  const fftw_complex* output() const { return out_; }
  void run() { fftw_execute(plan_); }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  double* in_;
  fftw_complex* out_;
  fftw_plan plan_;
};

}  // namespace detail

/// T x 80 log-mel energies of a 16 kHz waveform.
inline Matrix<double> compute_log_mel(const Waveform& w) {
  if (w.sample_rate != kSampleRate) throw ValidationError("log-mel expects 16 kHz audio, got " + std::to_string(w.sample_rate));
  const long t = frame_count(static_cast<long>(w.samples.size()));
  if (t < 1) {
    throw TooShortError("waveform has " + std::to_string(w.samples.size()) + " samples; at least " +
                        std::to_string(kWindow) + " are needed for one frame");
  }
  static const Matrix<double> fb = mel_filterbank();
  static const std::vector<double> win = hann_window();
  detail::RealFft fft;
  Matrix<double> out(t, kMels);
  Eigen::VectorXd power(kFftSize / 2 + 1);
  for (long f = 0; f < t; ++f) {
    double* in = fft.input();
    for (int i = 0; i < kWindow; ++i) in[i] = w.samples[static_cast<std::size_t>(f * kHop + i)] * win[static_cast<std::size_t>(i)];
    for (int i = kWindow; i < kFftSize; ++i) in[i] = 0.0;
    fft.run();
    const fftw_complex* o = fft.output();
    for (int k = 0; k <= kFftSize / 2; ++k) power[k] = o[k][0] * o[k][0] + o[k][1] * o[k][1];
    const Eigen::VectorXd energy = fb * power;
    for (int m = 0; m < kMels; ++m) out(f, m) = energy[m] > 1e-10 ? std::log(energy[m]) : kLogFloor;
  }
  return out;
}

}  // namespace dksd
