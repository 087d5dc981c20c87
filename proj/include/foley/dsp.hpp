#pragma once

#include <cmath>
#include <complex>
#include <numbers>
#include <unsupported/Eigen/FFT>
#include <vector>

#include "foley/rng.hpp"
#include "foley/tensor.hpp"
#include "foley/wav.hpp"

namespace foley::dsp {

enum class Window { hann, rect };

struct StftConfig {
  int fft_size = 256;
  int hop_size = 125;
  Window window = Window::hann;

  void validate() const {
    check_config(fft_size > 0, "StftConfig: fft_size must be positive");
    check_config(hop_size > 0 && hop_size <= fft_size, "StftConfig: need 0 < hop_size <= fft_size");
  }
};

template <typename S>
struct MelSpecT {
  MatrixX<S> values;  // time x mel, log amplitude
  int mel_basis = 0;
  int fft_size = 0;
  int hop_size = 0;
  int sample_rate = 0;
  S floor = S(1e-5);

  std::int64_t frames() const { return values.rows(); }
};

using MelSpec = MelSpecT<double>;

template <typename S>
VectorX<S> window_taper(int n, Window w) {
  VectorX<S> v(n);
  if (w == Window::rect) {
    v.setOnes();
  } else {
    for (int i = 0; i < n; ++i)  // periodic Hann
      v(i) = S(0.5) * (S(1) - std::cos(S(2) * std::numbers::pi_v<S> * S(i) / S(n)));
  }
  return v;
}

/// Frame count under the no-padding convention: frames start at multiples of
/// hop_size and must fit entirely inside the waveform.
inline std::int64_t stft_frames(std::int64_t samples, const StftConfig& cfg) {
  return 1 + (samples - cfg.fft_size) / cfg.hop_size;
}

/// Samples consumed by exactly `frames` STFT frames.
inline std::int64_t samples_for_frames(std::int64_t frames, const StftConfig& cfg) {
  return (frames - 1) * cfg.hop_size + cfg.fft_size;
}

template <typename S>
MatrixX<std::complex<S>> stft_complex(const WaveformT<S>& w, const StftConfig& cfg) {
  cfg.validate();
  const auto n = static_cast<std::int64_t>(w.samples.size());
  check_config(n >= cfg.fft_size,
               msg("stft: waveform of ", n, " samples is shorter than one fft window (", cfg.fft_size, ")"));
  const std::int64_t frames = stft_frames(n, cfg);
  const int bins = cfg.fft_size / 2 + 1;
  const VectorX<S> taper = window_taper<S>(cfg.fft_size, cfg.window);

  Eigen::FFT<S> fft;
  std::vector<std::complex<S>> in(static_cast<size_t>(cfg.fft_size)), out(static_cast<size_t>(cfg.fft_size));
  MatrixX<std::complex<S>> spec(frames, bins);
  for (std::int64_t f = 0; f < frames; ++f) {
    const std::int64_t off = f * cfg.hop_size;
    for (int i = 0; i < cfg.fft_size; ++i)
      in[static_cast<size_t>(i)] = std::complex<S>(w.samples[static_cast<size_t>(off + i)] * taper(i), S(0));
    fft.fwd(out, in);
    for (int b = 0; b < bins; ++b) spec(f, b) = out[static_cast<size_t>(b)];
  }
  return spec;
}

/// Magnitude spectrogram, one row per frame, fft_size/2+1 bins.
template <typename S>
MatrixX<S> stft_magnitude(const WaveformT<S>& w, const StftConfig& cfg) {
  return stft_complex(w, cfg).cwiseAbs();
}

/// Least-squares inverse STFT (windowed overlap-add normalized by the summed
/// squared taper), the inverse Griffin-Lim's monotonicity argument assumes.
template <typename S>
WaveformT<S> istft(const MatrixX<std::complex<S>>& spec, const StftConfig& cfg, int sample_rate) {
  cfg.validate();
  const std::int64_t frames = spec.rows();
  const int bins = cfg.fft_size / 2 + 1;
  check_config(spec.cols() == bins, msg("istft: expected ", bins, " bins, got ", spec.cols()));
  const std::int64_t n = samples_for_frames(frames, cfg);
  const VectorX<S> taper = window_taper<S>(cfg.fft_size, cfg.window);

  Eigen::FFT<S> fft;
  std::vector<std::complex<S>> in(static_cast<size_t>(cfg.fft_size)), out(static_cast<size_t>(cfg.fft_size));
  VectorX<S> acc = VectorX<S>::Zero(n), norm = VectorX<S>::Zero(n);
  for (std::int64_t f = 0; f < frames; ++f) {
    for (int b = 0; b < bins; ++b) in[static_cast<size_t>(b)] = spec(f, b);
    for (int b = bins; b < cfg.fft_size; ++b) in[static_cast<size_t>(b)] = std::conj(spec(f, cfg.fft_size - b));
    fft.inv(out, in);
    const std::int64_t off = f * cfg.hop_size;
    for (int i = 0; i < cfg.fft_size; ++i) {
      acc(off + i) += taper(i) * out[static_cast<size_t>(i)].real();
      norm(off + i) += taper(i) * taper(i);
    }
  }
  WaveformT<S> w;
  w.sample_rate = sample_rate;
  w.samples.resize(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    w.samples[static_cast<size_t>(i)] = norm(i) > S(1e-12) ? acc(i) / norm(i) : S(0);
  return w;
}

inline double mel_from_hz(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }  // HTK scale
inline double hz_from_mel(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Triangular mel filterbank, peak-normalized to 1; rows are filters over
/// fft_size/2+1 linear bins, spanning [0, sr/2].
template <typename S>
MatrixX<S> mel_filterbank(int mel_basis, int fft_size, int sample_rate) {
  check_config(mel_basis >= 2, "mel_filterbank: mel_basis must be >= 2");
  const int bins = fft_size / 2 + 1;
  const double mel_hi = mel_from_hz(sample_rate / 2.0);
  std::vector<double> edges(static_cast<size_t>(mel_basis) + 2);
  for (int i = 0; i < mel_basis + 2; ++i)
    edges[static_cast<size_t>(i)] = hz_from_mel(mel_hi * i / (mel_basis + 1));

  MatrixX<S> fb = MatrixX<S>::Zero(mel_basis, bins);
  for (int m = 0; m < mel_basis; ++m) {
    const double lo = edges[static_cast<size_t>(m)];
    const double mid = edges[static_cast<size_t>(m) + 1];
    const double hi = edges[static_cast<size_t>(m) + 2];
    for (int b = 0; b < bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / fft_size;
      double v = 0.0;
      if (f > lo && f < mid)
        v = (f - lo) / (mid - lo);
      else if (f >= mid && f < hi)
        v = (hi - f) / (hi - mid);
      fb(m, b) = static_cast<S>(std::max(0.0, v));
    }
    // Guarantee every filter has support even at coarse FFT resolution.
    if (fb.row(m).maxCoeff() <= S(0)) {
      const int b = static_cast<int>(std::lround(mid * fft_size / sample_rate));
      fb(m, std::clamp(b, 0, bins - 1)) = S(1);
    }
  }
  return fb;
}

/// Center frequency (Hz) of each mel filter; used by tests to map a tone to
/// its expected argmax bin.
inline std::vector<double> mel_center_frequencies(int mel_basis, int sample_rate) {
  const double mel_hi = mel_from_hz(sample_rate / 2.0);
  std::vector<double> centers(static_cast<size_t>(mel_basis));
  for (int m = 0; m < mel_basis; ++m)
    centers[static_cast<size_t>(m)] = hz_from_mel(mel_hi * (m + 1) / (mel_basis + 1));
  return centers;
}

template <typename S>
MelSpecT<S> mel_spectrogram(const WaveformT<S>& w, const StftConfig& cfg, int mel_basis, S floor = S(1e-5)) {
  check_config(floor > S(0), "mel_spectrogram: floor must be positive");
  const MatrixX<S> mag = stft_magnitude(w, cfg);
  const MatrixX<S> fb = mel_filterbank<S>(mel_basis, cfg.fft_size, w.sample_rate);
  MelSpecT<S> m;
  // Row-by-row so each frame's arithmetic is independent of its position;
  // identical frames then produce bit-identical rows (shift covariance).
  m.values.resize(mag.rows(), mel_basis);
  for (std::int64_t r = 0; r < mag.rows(); ++r)
    m.values.row(r) = (fb * mag.row(r).transpose()).transpose();
  m.values = m.values.cwiseMax(floor).array().log().matrix();
  m.mel_basis = mel_basis;
  m.fft_size = cfg.fft_size;
  m.hop_size = cfg.hop_size;
  m.sample_rate = w.sample_rate;
  m.floor = floor;
  return m;
}

// Log-mel values live in [log(floor), ~0]; nets consume them mapped to ~[-1, 1].
inline double mel_norm_center(double floor = 1e-5) { return std::log(floor) / 2.0; }
inline double mel_norm_scale(double floor = 1e-5) { return -std::log(floor) / 2.0; }

template <typename S>
MatrixX<S> normalized_mel(const MelSpecT<S>& m) {
  const S c = static_cast<S>(mel_norm_center(static_cast<double>(m.floor)));
  const S s = static_cast<S>(mel_norm_scale(static_cast<double>(m.floor)));
  return ((m.values.array() - c) / s).matrix();
}

template <typename S>
MelSpecT<S> denormalized_mel(const MatrixX<S>& values, const MelSpecT<S>& like) {
  const S c = static_cast<S>(mel_norm_center(static_cast<double>(like.floor)));
  const S s = static_cast<S>(mel_norm_scale(static_cast<double>(like.floor)));
  MelSpecT<S> m = like;
  m.values = (values.array() * s + c).matrix();
  return m;
}

template <typename S>
struct GriffinLimResult {
  WaveformT<S> waveform;
  std::vector<S> magnitude_errors;  // Frobenius distance to target per iteration
};

/// Griffin-Lim with per-iteration reconstruction error, for the monotonicity check.
template <typename S>
GriffinLimResult<S> griffin_lim_trace(const MelSpecT<S>& m, int iterations, std::uint64_t seed) {
  check_config(iterations >= 1, "griffin_lim: iterations must be >= 1");
  check_config(m.values.allFinite(), "griffin_lim: spectrogram has non-finite entries");
  const int bins = m.fft_size / 2 + 1;
  check_config(m.mel_basis <= bins,
               msg("griffin_lim: mel basis ", m.mel_basis, " exceeds fft bins ", bins));
  StftConfig cfg{m.fft_size, m.hop_size, Window::hann};

  // Mel inversion by regularized least squares, clipped to non-negative magnitudes.
  const MatrixX<S> fb = mel_filterbank<S>(m.mel_basis, m.fft_size, m.sample_rate);
  MatrixX<S> gram = fb * fb.transpose();
  gram.diagonal().array() += S(1e-8);
  const MatrixX<S> pinv = fb.transpose() * gram.llt().solve(MatrixX<S>::Identity(m.mel_basis, m.mel_basis));
  const MatrixX<S> target = (m.values.array().exp().matrix() * pinv.transpose()).cwiseMax(S(0));

  Rng rng(seed);
  MatrixX<std::complex<S>> spec(target.rows(), bins);
  for (std::int64_t f = 0; f < target.rows(); ++f)
    for (int b = 0; b < bins; ++b) {
      const S phase = static_cast<S>(rng.uniform(0.0, 2.0 * std::numbers::pi));
      spec(f, b) = std::polar(target(f, b), phase);
    }

  GriffinLimResult<S> result;
  WaveformT<S> x;
  for (int it = 0; it < iterations; ++it) {
    x = istft(spec, cfg, m.sample_rate);
    const MatrixX<std::complex<S>> re = stft_complex(x, cfg);
    result.magnitude_errors.push_back(static_cast<S>((re.cwiseAbs() - target).norm()));
    for (std::int64_t f = 0; f < target.rows(); ++f)
      for (int b = 0; b < bins; ++b) {
        const S a = std::abs(re(f, b));
        spec(f, b) = a > S(1e-12) ? std::complex<S>(re(f, b) * (target(f, b) / a))
                                  : std::complex<S>(target(f, b), S(0));
      }
  }
  result.waveform = istft(spec, cfg, m.sample_rate);
  return result;
}

template <typename S>
WaveformT<S> griffin_lim(const MelSpecT<S>& m, int iterations, std::uint64_t seed) {
  return griffin_lim_trace(m, iterations, seed).waveform;
}

template <typename S>
void peak_normalize(WaveformT<S>& w) {
  S peak = S(0);
  for (S s : w.samples) peak = std::max(peak, std::abs(s));
  if (peak > S(1))
    for (S& s : w.samples) s /= peak;
}

}  // namespace foley::dsp
