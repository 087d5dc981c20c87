#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "foley/dsp.hpp"
#include "foley/synthav.hpp"

using namespace foley;
using dsp::StftConfig;
using dsp::Window;

namespace {

Waveform sine(double freq, double seconds, int sr, double amp = 0.5) {
  Waveform w;
  w.sample_rate = sr;
  const auto n = static_cast<std::int64_t>(seconds * sr);
  for (std::int64_t i = 0; i < n; ++i)
    w.samples.push_back(amp * std::sin(2.0 * std::numbers::pi * freq * i / sr));
  return w;
}

Waveform zeros(double seconds, int sr) {
  Waveform w;
  w.sample_rate = sr;
  w.samples.assign(static_cast<size_t>(seconds * sr), 0.0);
  return w;
}

double pearson(const MatrixXd& a, const MatrixXd& b) {
  const double ma = a.mean(), mb = b.mean();
  const auto ca = (a.array() - ma), cb = (b.array() - mb);
  return (ca * cb).sum() / std::sqrt(ca.square().sum() * cb.square().sum());
}

}  // namespace

TEST_CASE("zero waveform gives a zero magnitude matrix") {
  const StftConfig cfg{256, 125, Window::hann};
  const MatrixXd mag = dsp::stft_magnitude(zeros(1.0, 8000), cfg);
  CHECK(mag.rows() == 1 + (8000 - 256) / 125);
  CHECK(mag.cols() == 129);
  CHECK(mag.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("pure sine peaks at the closed-form DFT bin") {
  // bin = f * fft_size / sr = 500 * 256 / 8000 = 16
  const StftConfig cfg{256, 125, Window::hann};
  const MatrixXd mag = dsp::stft_magnitude(sine(500.0, 1.0, 8000), cfg);
  for (Eigen::Index r = 0; r < mag.rows(); ++r) {
    Eigen::Index arg = -1;
    mag.row(r).maxCoeff(&arg);
    CHECK(arg == 16);
  }
}

TEST_CASE("waveform too short for one window is an explicit error") {
  Waveform w = zeros(1.0, 8000);
  w.samples.resize(200);
  CHECK_THROWS_WITH_AS(dsp::stft_magnitude(w, StftConfig{256, 125, Window::hann}),
                       doctest::Contains("shorter than one fft window"), ConfigError);
}

TEST_CASE("frame-aligned concatenation concatenates rows (rectangular window)") {
  const StftConfig cfg{256, 125, Window::rect};
  const Waveform a = sine(500.0, 1.0, 8000);
  const Waveform b = sine(900.0, 1.0, 8000);
  REQUIRE(static_cast<int>(a.samples.size()) % cfg.hop_size == 0);

  Waveform ab = a;
  ab.samples.insert(ab.samples.end(), b.samples.begin(), b.samples.end());
  const MatrixXd ma = dsp::stft_magnitude(a, cfg);
  const MatrixXd mb = dsp::stft_magnitude(b, cfg);
  const MatrixXd mab = dsp::stft_magnitude(ab, cfg);

  // rows fully inside a (before the seam) and rows starting at/after the seam
  const std::int64_t la = static_cast<std::int64_t>(a.samples.size());
  const std::int64_t seam_row = la / cfg.hop_size;  // first row whose window starts at the seam
  for (Eigen::Index r = 0; r < ma.rows(); ++r) CHECK((mab.row(r) - ma.row(r)).cwiseAbs().maxCoeff() == 0.0);
  for (Eigen::Index r = 0; r < mb.rows(); ++r)
    CHECK((mab.row(seam_row + r) - mb.row(r)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("zero waveform maps to a constant log(floor) mel matrix") {
  const StftConfig cfg{256, 125, Window::hann};
  const auto mel = dsp::mel_spectrogram(zeros(1.0, 8000), cfg, 32, 1e-5);
  CHECK(mel.values.maxCoeff() == doctest::Approx(std::log(1e-5)));
  CHECK(mel.values.minCoeff() == doctest::Approx(std::log(1e-5)));
}

TEST_CASE("pure sine peaks at the mel bin whose center is nearest the tone") {
  const StftConfig cfg{256, 125, Window::hann};
  const double freq = 500.0;
  const auto mel = dsp::mel_spectrogram(sine(freq, 1.0, 8000), cfg, 32, 1e-5);
  // independent oracle: evaluate the mel(f) center mapping directly
  const auto centers = dsp::mel_center_frequencies(32, 8000);
  int expect = 0;
  for (int m = 1; m < 32; ++m)
    if (std::abs(centers[static_cast<size_t>(m)] - freq) < std::abs(centers[static_cast<size_t>(expect)] - freq))
      expect = m;
  for (Eigen::Index r = 0; r < mel.values.rows(); ++r) {
    Eigen::Index arg = -1;
    mel.values.row(r).maxCoeff(&arg);
    CHECK(arg == expect);
  }
}

TEST_CASE("reference configuration rows: frame-aligned 10 s pairing gives 640, raw formula 636") {
  // 16 kHz / fft 1024 / hop 250 / 128 mels; 40 video frames at 4 fps
  synthav::AvFormat fmt;
  fmt.sample_rate = 16000;
  fmt.fft_size = 1024;
  fmt.hop_pretrain = 250;
  fmt.hop_ldm = 256;
  fmt.mel_bins = 128;
  const int spf = synthav::frames_per_video_frame(fmt, synthav::Stage::pretrain);
  CHECK(spf == 16);
  CHECK(40 * spf == 640);

  Waveform w = zeros(10.0, 16000);
  const StftConfig cfg{1024, 250, Window::hann};
  const auto mel = dsp::mel_spectrogram(w, cfg, 128, 1e-5);
  CHECK(mel.values.rows() == 1 + (160000 - 1024) / 250);
  CHECK(mel.values.rows() == 636);
  CHECK(mel.values.cols() == 128);

  // with the framing margin the paired crop holds the full 640 rows
  w.samples.resize(static_cast<size_t>(dsp::samples_for_frames(640, cfg)));
  CHECK(dsp::stft_frames(static_cast<std::int64_t>(w.samples.size()), cfg) == 640);
}


TEST_CASE("griffin-lim recovers the dominant frequency of a tone") {
  const StftConfig cfg{256, 125, Window::hann};
  const int sr = 8000;
  const auto mel = dsp::mel_spectrogram(sine(500.0, 1.0, sr), cfg, 32, 1e-5);
  const Waveform rec = dsp::griffin_lim(mel, 48, 99);
  const MatrixXd mag = dsp::stft_magnitude(rec, cfg);
  const Eigen::VectorXd avg = mag.colwise().mean();
  Eigen::Index arg = -1;
  avg.maxCoeff(&arg);
  const double bin_hz = static_cast<double>(sr) / cfg.fft_size;
  CHECK(std::abs(arg * bin_hz - 500.0) <= bin_hz + 1e-9);
}

TEST_CASE("griffin-lim magnitude error never increases across iterations") {
  const StftConfig cfg{256, 125, Window::hann};
  Waveform mix = sine(500.0, 1.0, 8000);
  const Waveform other = sine(1700.0, 1.0, 8000, 0.3);
  for (size_t i = 0; i < mix.samples.size(); ++i) mix.samples[i] += other.samples[i];
  const auto mel = dsp::mel_spectrogram(mix, cfg, 32, 1e-5);
  const auto trace = dsp::griffin_lim_trace(mel, 64, 7);
  REQUIRE(trace.magnitude_errors.size() == 64);
  for (size_t i = 1; i < trace.magnitude_errors.size(); ++i)
    CHECK(trace.magnitude_errors[i] <= trace.magnitude_errors[i - 1] + 1e-9);
  CHECK(trace.magnitude_errors.back() <= trace.magnitude_errors.front());
}

TEST_CASE("all-floor spectrogram reconstructs to near silence") {
  dsp::MelSpec mel;
  mel.values = MatrixXd::Constant(64, 32, std::log(1e-5));
  mel.mel_basis = 32;
  mel.fft_size = 256;
  mel.hop_size = 125;
  mel.sample_rate = 8000;
  mel.floor = 1e-5;
  const Waveform rec = dsp::griffin_lim(mel, 8, 3);
  double rms = 0;
  for (double s : rec.samples) rms += s * s;
  rms = std::sqrt(rms / static_cast<double>(rec.samples.size()));
  CHECK(rms <= 1e-3);  // floor-level tolerance
}

TEST_CASE("non-finite spectrogram entries are rejected") {
  dsp::MelSpec mel;
  mel.values = MatrixXd::Constant(8, 32, -1.0);
  mel.values(3, 3) = std::numeric_limits<double>::quiet_NaN();
  mel.mel_basis = 32;
  mel.fft_size = 256;
  mel.hop_size = 125;
  mel.sample_rate = 8000;
  CHECK_THROWS_AS(dsp::griffin_lim(mel, 4, 1), ConfigError);
}

TEST_CASE("mel spectrogram is shift-covariant on the hop grid") {
  const StftConfig cfg{256, 125, Window::hann};
  Rng rng(21);
  Waveform w;
  w.sample_rate = 8000;
  for (int i = 0; i < 8000; ++i) w.samples.push_back(0.3 * rng.normal());
  const int k = 3;
  Waveform delayed;
  delayed.sample_rate = 8000;
  delayed.samples.assign(static_cast<size_t>(k * cfg.hop_size), 0.0);
  delayed.samples.insert(delayed.samples.end(), w.samples.begin(), w.samples.end());

  const auto m0 = dsp::mel_spectrogram(w, cfg, 32, 1e-5);
  const auto m1 = dsp::mel_spectrogram(delayed, cfg, 32, 1e-5);
  for (Eigen::Index r = 0; r < m0.values.rows(); ++r)
    CHECK((m1.values.row(r + k) - m0.values.row(r)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("tonal mel round trip through griffin-lim correlates >= 0.9") {
  const StftConfig cfg{256, 125, Window::hann};
  Waveform mix = sine(620.0, 1.0, 8000, 0.45);
  const Waveform hi = sine(1900.0, 1.0, 8000, 0.25);
  for (size_t i = 0; i < mix.samples.size(); ++i) mix.samples[i] += hi.samples[i];
  const auto mel = dsp::mel_spectrogram(mix, cfg, 32, 1e-5);
  const Waveform rec = dsp::griffin_lim(mel, 64, 17);
  Waveform trimmed = rec;
  trimmed.samples.resize(mix.samples.size());
  const auto mel2 = dsp::mel_spectrogram(trimmed, cfg, 32, 1e-5);
  CHECK(pearson(mel.values, mel2.values) >= 0.9);
}

TEST_CASE("every mel filter is non-negative with support") {
  const MatrixXd fb = dsp::mel_filterbank<double>(32, 256, 8000);
  CHECK(fb.minCoeff() >= 0.0);
  for (Eigen::Index m = 0; m < fb.rows(); ++m) CHECK(fb.row(m).maxCoeff() > 0.0);
}

TEST_CASE("invalid stft configs are rejected") {
  CHECK_THROWS_AS(dsp::stft_magnitude(zeros(1.0, 8000), StftConfig{256, 0, Window::hann}), ConfigError);
  CHECK_THROWS_AS(dsp::stft_magnitude(zeros(1.0, 8000), StftConfig{256, 300, Window::hann}), ConfigError);
  CHECK_THROWS_AS(dsp::mel_spectrogram(zeros(1.0, 8000), StftConfig{256, 125, Window::hann}, 32, 0.0),
                  ConfigError);
}
