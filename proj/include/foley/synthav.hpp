#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "foley/dsp.hpp"
#include "foley/rng.hpp"
#include "foley/tensor.hpp"
#include "foley/wav.hpp"

namespace foley::synthav {

/// Shared audio-visual geometry: sample rates, clip framing and the dual hop
/// convention (alignment hop for pretraining, compression-friendly hop for the
/// latent model).
struct AvFormat {
  int sample_rate = 8000;
  int fps = 4;
  int height = 32;
  int width = 32;
  int classes = 8;
  int fft_size = 256;
  int hop_pretrain = 125;
  int hop_ldm = 128;
  int mel_bins = 32;
  double mel_floor = 1e-5;

  void validate() const;
};

enum class Stage { pretrain, ldm };

inline int stage_hop(const AvFormat& fmt, Stage s) {
  return s == Stage::pretrain ? fmt.hop_pretrain : fmt.hop_ldm;
}

/// Spectrogram frames per video frame for a stage; the pretraining hop divides
/// the frame period exactly, the LDM hop rounds up (its spectrogram runs a few
/// hops past nominal time, mirroring the reference 512-row / 32-frame pairing).
int frames_per_video_frame(const AvFormat& fmt, Stage s);

/// Audio samples a generated clip must carry so that frame-aligned mel crops
/// anywhere in [0, duration] never run out of signal (padding = framing margin).
std::int64_t audio_samples_for(double duration, const AvFormat& fmt);

struct Event {
  double time = 0;       // seconds, snapped to the video frame grid
  int class_id = 0;      // in [0, classes)
  double intensity = 1;  // in (0, 1]
};

struct EventScript {
  double clip_duration = 0;
  std::vector<Event> events;

  void validate(const AvFormat& fmt) const;
};

struct VideoClip {
  Tensor frames;  // (T, H, W), grayscale in [0, 1]
  int fps = 0;

  std::int64_t frame_count() const { return frames.ndim() ? frames.dim(0) : 0; }
};

struct AVSample {
  std::string id;
  std::string split;
  VideoClip video;
  Waveform audio;
  EventScript script;
};

/// Per-class audio carrier frequency (uniform in mel so carriers stay >= 2 mel
/// bins apart) and flash position on the frame.
double class_carrier_hz(int class_id, const AvFormat& fmt);
std::pair<int, int> class_flash_center(int class_id, const AvFormat& fmt);

EventScript make_random_script(int class_id, double duration, const AvFormat& fmt, Rng& rng);

/// Deterministic renderer: each event is a decaying class-colored sinusoid in
/// audio and a decaying disc flash in video at the same time; background is
/// low-amplitude noise.
AVSample render_sample(const EventScript& script, const AvFormat& fmt, Rng& noise_rng,
                       std::string id = "sample", std::string split = "train");

/// Random single-class script + render, one independent stream per call.
AVSample generate_sample(int class_count, double duration, Rng& rng);

struct GenConfig {
  std::filesystem::path root;
  AvFormat format;
  int train_samples = 200;
  int test_samples = 40;
  double duration = 10.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ManifestRecord {
  std::string id;
  std::string split;
  int class_id = 0;
  std::string wav_path;    // relative to manifest root
  std::string video_path;  // relative to manifest root
  EventScript script;
};

struct DatasetManifest {
  std::filesystem::path root;
  GenConfig config;
  std::vector<ManifestRecord> records;

  std::vector<const ManifestRecord*> split_records(const std::string& split) const;
};

DatasetManifest build_dataset(const GenConfig& config);

/// Parse manifest.json; with verify=true also check every referenced file
/// exists and the video blob round-trips.
DatasetManifest load_manifest(const std::filesystem::path& manifest_path, bool verify = false);

AVSample load_sample(const DatasetManifest& manifest, const ManifestRecord& record);

/// Temporally aligned (mel, video) crop. Crop boundaries must sit on the video
/// frame grid; the mel has exactly frames_per_video_frame * n_frames rows.
std::pair<dsp::MelSpec, VideoClip> clip_pair(const AVSample& sample, double start, double length, Stage stage,
                                             const AvFormat& fmt);

/// Frame-aligned mel rows [f0, f0+n_frames) of a sample, identical to the same
/// rows of any longer crop under the no-padding STFT convention.
dsp::MelSpec mel_for_frames(const AVSample& sample, std::int64_t f0, std::int64_t n_frames, Stage stage,
                            const AvFormat& fmt);

VideoClip video_crop(const VideoClip& video, std::int64_t f0, std::int64_t n_frames);

/// Center time of the short-window RMS peak; ground-truth synchronization probe.
double audio_energy_argmax_time(const Waveform& w, double window_s = 0.1, double hop_s = 0.025);

/// Time of the largest frame-to-frame brightness change.
double video_change_argmax_time(const VideoClip& v);

}  // namespace foley::synthav
