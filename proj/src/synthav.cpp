#include "foley/synthav.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "foley/blob.hpp"
#include "json.hpp"

namespace foley::synthav {

using nlohmann::json;

void AvFormat::validate() const {
  check_config(sample_rate > 0 && fps > 0 && height > 0 && width > 0, "AvFormat: dimensions must be positive");
  check_config(classes >= 2, "AvFormat: need at least 2 event classes");
  check_config(hop_pretrain > 0 && hop_pretrain <= fft_size, "AvFormat: bad pretrain hop");
  check_config(hop_ldm > 0 && hop_ldm <= fft_size, "AvFormat: bad ldm hop");
  check_config(sample_rate % (fps * hop_pretrain) == 0,
               msg("AvFormat: pretrain hop ", hop_pretrain, " must divide the frame period exactly (sr ",
                   sample_rate, ", fps ", fps, ")"));
  check_config(mel_bins >= 2 && mel_bins <= fft_size / 2 + 1, "AvFormat: bad mel basis count");
}

int frames_per_video_frame(const AvFormat& fmt, Stage s) {
  const int hop = stage_hop(fmt, s);
  return static_cast<int>((static_cast<std::int64_t>(fmt.sample_rate) + fmt.fps * hop - 1) /
                          (static_cast<std::int64_t>(fmt.fps) * hop));
}

std::int64_t audio_samples_for(double duration, const AvFormat& fmt) {
  const auto total_frames = static_cast<std::int64_t>(std::llround(duration * fmt.fps));
  std::int64_t need = 0;
  for (Stage s : {Stage::pretrain, Stage::ldm}) {
    const std::int64_t hop = stage_hop(fmt, s);
    const std::int64_t rows = total_frames * frames_per_video_frame(fmt, s);
    need = std::max(need, (rows - 1) * hop + fmt.fft_size);
  }
  return need;
}

void EventScript::validate(const AvFormat& fmt) const {
  check_config(clip_duration > 0, "EventScript: clip_duration must be positive");
  const double frame_period = 1.0 / fmt.fps;
  double prev = -1e9;
  for (const auto& e : events) {
    check_config(e.time >= 0 && e.time < clip_duration,
                 msg("EventScript: event time ", e.time, " outside [0, ", clip_duration, ")"));
    check_config(e.class_id >= 0 && e.class_id < fmt.classes, msg("EventScript: bad class id ", e.class_id));
    check_config(e.intensity > 0 && e.intensity <= 1, "EventScript: intensity must be in (0, 1]");
    check_config(e.time - prev >= frame_period - 1e-9, "EventScript: events closer than one frame period");
    prev = e.time;
  }
}

double class_carrier_hz(int class_id, const AvFormat& fmt) {
  check_config(class_id >= 0 && class_id < fmt.classes, msg("bad class id ", class_id));
  const double lo = dsp::mel_from_hz(450.0);
  const double hi = dsp::mel_from_hz(0.425 * fmt.sample_rate);
  const double mel = fmt.classes == 1 ? lo : lo + (hi - lo) * class_id / (fmt.classes - 1);
  return dsp::hz_from_mel(mel);
}

std::pair<int, int> class_flash_center(int class_id, const AvFormat& fmt) {
  const int per_row = 4;
  const int col = class_id % per_row;
  const int row = class_id / per_row;
  const int rows = (fmt.classes + per_row - 1) / per_row;
  const int cx = fmt.width * (2 * col + 1) / (2 * per_row);
  const int cy = fmt.height * (2 * row + 1) / (2 * rows);
  return {cx, cy};
}

EventScript make_random_script(int class_id, double duration, const AvFormat& fmt, Rng& rng) {
  const auto total_frames = static_cast<std::int64_t>(std::llround(duration * fmt.fps));
  check_config(total_frames >= 8, "make_random_script: clip too short");
  const int count = static_cast<int>(rng.uniform_int(1, 4));
  std::set<std::int64_t> frames;
  while (static_cast<int>(frames.size()) < count)
    frames.insert(rng.uniform_int(1, total_frames - 3));
  EventScript script;
  script.clip_duration = duration;
  for (std::int64_t f : frames)
    script.events.push_back({static_cast<double>(f) / fmt.fps, class_id, rng.uniform(0.4, 1.0)});
  return script;
}

namespace {

constexpr double kAudioEventLen = 0.5;   // seconds
constexpr double kAudioDecay = 0.12;     // seconds
constexpr double kAudioAmp = 0.8;
// Background noise sits below the mel amplitude floor (and 16-bit WAV
// quantization), so silence regions stay compressible for the latent codec.
constexpr double kNoiseSigma = 3e-7;
constexpr int kFlashFrames = 3;
constexpr double kFlashDecay = 0.5;
constexpr double kFlashRadius = 3.5;

}  // namespace

AVSample render_sample(const EventScript& script, const AvFormat& fmt, Rng& noise_rng, std::string id,
                       std::string split) {
  fmt.validate();
  script.validate(fmt);

  AVSample s;
  s.id = std::move(id);
  s.split = std::move(split);
  s.script = script;

  const auto total_frames = static_cast<std::int64_t>(std::llround(script.clip_duration * fmt.fps));
  s.video.fps = fmt.fps;
  s.video.frames = Tensor({total_frames, fmt.height, fmt.width});

  const std::int64_t n = audio_samples_for(script.clip_duration, fmt);
  s.audio.sample_rate = fmt.sample_rate;
  s.audio.samples.assign(static_cast<size_t>(n), 0.0);
  for (auto& v : s.audio.samples) v = kNoiseSigma * noise_rng.normal();

  for (const auto& e : script.events) {
    const double carrier = class_carrier_hz(e.class_id, fmt);
    const auto start = static_cast<std::int64_t>(std::llround(e.time * fmt.sample_rate));
    const auto len = static_cast<std::int64_t>(kAudioEventLen * fmt.sample_rate);
    for (std::int64_t i = 0; i < len && start + i < n; ++i) {
      const double t = static_cast<double>(i) / fmt.sample_rate;
      s.audio.samples[static_cast<size_t>(start + i)] +=
          kAudioAmp * e.intensity * std::exp(-t / kAudioDecay) *
          std::sin(2.0 * std::numbers::pi * carrier * t);
    }

    const auto [cx, cy] = class_flash_center(e.class_id, fmt);
    const auto f0 = static_cast<std::int64_t>(std::llround(e.time * fmt.fps));
    for (int j = 0; j < kFlashFrames; ++j) {
      const std::int64_t f = f0 + j;
      if (f >= total_frames) break;
      const double level = e.intensity * std::pow(kFlashDecay, j);
      for (int y = 0; y < fmt.height; ++y)
        for (int x = 0; x < fmt.width; ++x) {
          const double d2 = double(x - cx) * (x - cx) + double(y - cy) * (y - cy);
          if (d2 <= kFlashRadius * kFlashRadius)
            s.video.frames.at(f, y, x) = std::min(1.0, s.video.frames.at(f, y, x) + level);
        }
    }
  }

  dsp::peak_normalize(s.audio);
  return s;
}

AVSample generate_sample(int class_count, double duration, Rng& rng) {
  check_config(class_count >= 2, "generate_sample: need at least 2 classes");
  check_config(duration >= 4.0, "generate_sample: duration must be >= 4 s");
  AvFormat fmt;
  fmt.classes = class_count;
  const int class_id = static_cast<int>(rng.uniform_int(0, class_count - 1));
  const EventScript script = make_random_script(class_id, duration, fmt, rng);
  return render_sample(script, fmt, rng);
}

void GenConfig::validate() const {
  format.validate();
  check_config(!root.empty(), "GenConfig: dataset root path is empty");
  check_config(train_samples >= 0 && test_samples >= 0, "GenConfig: negative sample count");
  check_config(train_samples + test_samples > 0, "GenConfig: dataset would be empty");
  check_config(duration >= 4.0, "GenConfig: duration must be >= 4 s");
}

namespace {

json script_to_json(const EventScript& s) {
  json events = json::array();
  for (const auto& e : s.events)
    events.push_back({{"time", e.time}, {"class_id", e.class_id}, {"intensity", e.intensity}});
  return {{"clip_duration", s.clip_duration}, {"events", events}};
}

EventScript script_from_json(const json& j) {
  EventScript s;
  s.clip_duration = j.at("clip_duration").get<double>();
  for (const auto& e : j.at("events"))
    s.events.push_back({e.at("time").get<double>(), e.at("class_id").get<int>(), e.at("intensity").get<double>()});
  return s;
}

json format_to_json(const AvFormat& f) {
  return {{"sample_rate", f.sample_rate}, {"fps", f.fps},           {"height", f.height},
          {"width", f.width},             {"classes", f.classes},   {"fft_size", f.fft_size},
          {"hop_pretrain", f.hop_pretrain}, {"hop_ldm", f.hop_ldm}, {"mel_bins", f.mel_bins},
          {"mel_floor", f.mel_floor}};
}

AvFormat format_from_json(const json& j) {
  AvFormat f;
  f.sample_rate = j.at("sample_rate").get<int>();
  f.fps = j.at("fps").get<int>();
  f.height = j.at("height").get<int>();
  f.width = j.at("width").get<int>();
  f.classes = j.at("classes").get<int>();
  f.fft_size = j.at("fft_size").get<int>();
  f.hop_pretrain = j.at("hop_pretrain").get<int>();
  f.hop_ldm = j.at("hop_ldm").get<int>();
  f.mel_bins = j.at("mel_bins").get<int>();
  f.mel_floor = j.at("mel_floor").get<double>();
  return f;
}

ManifestRecord make_record(const GenConfig& cfg, const std::string& split, int index) {
  const std::string id = msg(split, "-", index < 10 ? "000" : index < 100 ? "00" : index < 1000 ? "0" : "", index);
  Rng script_rng = Rng::stream(cfg.seed, msg("script/", id));
  Rng noise_rng = Rng::stream(cfg.seed, msg("noise/", id));
  const int class_id = index % cfg.format.classes;
  const EventScript script = make_random_script(class_id, cfg.duration, cfg.format, script_rng);
  AVSample sample = render_sample(script, cfg.format, noise_rng, id, split);

  ManifestRecord rec;
  rec.id = id;
  rec.split = split;
  rec.class_id = class_id;
  rec.wav_path = "audio/" + id + ".wav";
  rec.video_path = "video/" + id + ".blob";
  rec.script = script;

  write_wav(cfg.root / rec.wav_path, sample.audio);
  write_blob(cfg.root / rec.video_path, sample.video.frames, BlobDtype::f32);
  return rec;
}

}  // namespace

DatasetManifest build_dataset(const GenConfig& config) {
  config.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(config.root / "audio", ec);
  fs::create_directories(config.root / "video", ec);
  check_runtime(fs::exists(config.root / "audio") && fs::exists(config.root / "video"),
                msg("build_dataset: cannot create dataset directories under ", config.root.string()));

  DatasetManifest manifest;
  manifest.root = config.root;
  manifest.config = config;
  for (int i = 0; i < config.train_samples; ++i) manifest.records.push_back(make_record(config, "train", i));
  for (int i = 0; i < config.test_samples; ++i) manifest.records.push_back(make_record(config, "test", i));

  json records = json::array();
  for (const auto& r : manifest.records) {
    json hist = json::object();
    std::vector<int> counts(static_cast<size_t>(config.format.classes), 0);
    for (const auto& e : r.script.events) counts[static_cast<size_t>(e.class_id)]++;
    for (int c = 0; c < config.format.classes; ++c)
      if (counts[static_cast<size_t>(c)] > 0) hist[std::to_string(c)] = counts[static_cast<size_t>(c)];
    records.push_back({{"id", r.id},
                       {"split", r.split},
                       {"class_id", r.class_id},
                       {"wav", r.wav_path},
                       {"video", r.video_path},
                       {"class_histogram", hist},
                       {"script", script_to_json(r.script)}});
  }
  const json doc = {{"schema_version", 1},
                    {"config",
                     {{"format", format_to_json(config.format)},
                      {"train_samples", config.train_samples},
                      {"test_samples", config.test_samples},
                      {"duration", config.duration},
                      {"seed", config.seed}}},
                    {"records", records}};

  std::ofstream f(config.root / "manifest.json");
  check_runtime(f.good(), msg("cannot write manifest at ", (config.root / "manifest.json").string()));
  f << doc.dump(2) << "\n";
  return manifest;
}

DatasetManifest load_manifest(const std::filesystem::path& manifest_path, bool verify) {
  std::ifstream f(manifest_path);
  check_runtime(f.good(), msg("cannot open manifest ", manifest_path.string()));
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw RuntimeError(msg("malformed manifest ", manifest_path.string(), ": ", e.what()));
  }
  check_runtime(doc.at("schema_version").get<int>() == 1, "manifest: unsupported schema_version");

  DatasetManifest m;
  m.root = manifest_path.parent_path();
  const auto& cfg = doc.at("config");
  m.config.root = m.root;
  m.config.format = format_from_json(cfg.at("format"));
  m.config.train_samples = cfg.at("train_samples").get<int>();
  m.config.test_samples = cfg.at("test_samples").get<int>();
  m.config.duration = cfg.at("duration").get<double>();
  m.config.seed = cfg.at("seed").get<std::uint64_t>();

  for (const auto& r : doc.at("records")) {
    ManifestRecord rec;
    rec.id = r.at("id").get<std::string>();
    rec.split = r.at("split").get<std::string>();
    rec.class_id = r.at("class_id").get<int>();
    rec.wav_path = r.at("wav").get<std::string>();
    rec.video_path = r.at("video").get<std::string>();
    rec.script = script_from_json(r.at("script"));
    if (verify) {
      check_runtime(std::filesystem::exists(m.root / rec.wav_path),
                    msg("manifest references missing file ", (m.root / rec.wav_path).string()));
      const auto vpath = m.root / rec.video_path;
      check_runtime(std::filesystem::exists(vpath), msg("manifest references missing file ", vpath.string()));
      const Tensor v = read_blob(vpath);  // throws on corrupt blob
      check_runtime(v.ndim() == 3, msg("video blob ", vpath.string(), " is not a 3-d tensor"));
    }
    m.records.push_back(std::move(rec));
  }
  return m;
}

std::vector<const ManifestRecord*> DatasetManifest::split_records(const std::string& split) const {
  std::vector<const ManifestRecord*> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(&r);
  return out;
}

AVSample load_sample(const DatasetManifest& manifest, const ManifestRecord& record) {
  AVSample s;
  s.id = record.id;
  s.split = record.split;
  s.script = record.script;
  s.audio = read_wav(manifest.root / record.wav_path);
  s.video.frames = read_blob(manifest.root / record.video_path);
  s.video.fps = manifest.config.format.fps;
  return s;
}

dsp::MelSpec mel_for_frames(const AVSample& sample, std::int64_t f0, std::int64_t n_frames, Stage stage,
                            const AvFormat& fmt) {
  check_config(f0 >= 0 && n_frames >= 1, "mel_for_frames: bad frame range");
  const std::int64_t hop = stage_hop(fmt, stage);
  const std::int64_t spf = frames_per_video_frame(fmt, stage);
  const std::int64_t rows = n_frames * spf;
  const std::int64_t offset = f0 * spf * hop;
  const std::int64_t need = (rows - 1) * hop + fmt.fft_size;
  const auto have = static_cast<std::int64_t>(sample.audio.samples.size());
  check_config(offset + need <= have,
               msg("mel_for_frames: crop at frame ", f0, " of ", n_frames, " frames needs ", offset + need,
                   " audio samples but sample '", sample.id, "' has ", have));

  Waveform crop;
  crop.sample_rate = sample.audio.sample_rate;
  crop.samples.assign(sample.audio.samples.begin() + offset, sample.audio.samples.begin() + offset + need);
  dsp::StftConfig cfg{fmt.fft_size, static_cast<int>(hop), dsp::Window::hann};
  return dsp::mel_spectrogram(crop, cfg, fmt.mel_bins, fmt.mel_floor);
}

VideoClip video_crop(const VideoClip& video, std::int64_t f0, std::int64_t n_frames) {
  check_config(f0 >= 0 && n_frames >= 1 && f0 + n_frames <= video.frame_count(),
               msg("video_crop: frames [", f0, ", ", f0 + n_frames, ") out of range, clip has ",
                   video.frame_count()));
  VideoClip out;
  out.fps = video.fps;
  out.frames = Tensor({n_frames, video.frames.dim(1), video.frames.dim(2)});
  const std::int64_t per_frame = video.frames.dim(1) * video.frames.dim(2);
  std::copy_n(video.frames.data() + f0 * per_frame, n_frames * per_frame, out.frames.data());
  return out;
}

std::pair<dsp::MelSpec, VideoClip> clip_pair(const AVSample& sample, double start, double length, Stage stage,
                                             const AvFormat& fmt) {
  check_config(start >= 0 && length > 0, "clip_pair: start/length must be non-negative/positive");
  check_config(start + length <= sample.script.clip_duration + 1e-9,
               msg("clip_pair: crop [", start, ", ", start + length, ") exceeds sample duration ",
                   sample.script.clip_duration));
  const double f0_real = start * fmt.fps;
  const double n_real = length * fmt.fps;
  const auto f0 = static_cast<std::int64_t>(std::llround(f0_real));
  const auto n = static_cast<std::int64_t>(std::llround(n_real));
  check_config(std::abs(f0_real - static_cast<double>(f0)) < 1e-6 &&
                   std::abs(n_real - static_cast<double>(n)) < 1e-6,
               msg("clip_pair: start ", start, " and length ", length, " must align to the ", fmt.fps,
                   " fps frame grid"));
  return {mel_for_frames(sample, f0, n, stage, fmt), video_crop(sample.video, f0, n)};
}

double audio_energy_argmax_time(const Waveform& w, double window_s, double hop_s) {
  const auto win = static_cast<std::int64_t>(window_s * w.sample_rate);
  const auto hop = static_cast<std::int64_t>(hop_s * w.sample_rate);
  const auto n = static_cast<std::int64_t>(w.samples.size());
  check_config(win >= 1 && hop >= 1 && n >= win, "audio_energy_argmax_time: waveform shorter than window");
  double best = -1, best_t = 0;
  for (std::int64_t o = 0; o + win <= n; o += hop) {
    double e = 0;
    for (std::int64_t i = o; i < o + win; ++i) e += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i)];
    if (e > best) {
      best = e;
      best_t = static_cast<double>(o + win / 2) / w.sample_rate;
    }
  }
  return best_t;
}

double video_change_argmax_time(const VideoClip& v) {
  const std::int64_t t = v.frame_count();
  check_config(t >= 2, "video_change_argmax_time: need at least 2 frames");
  const std::int64_t per_frame = v.frames.dim(1) * v.frames.dim(2);
  double best = -1;
  std::int64_t best_f = 0;
  for (std::int64_t f = 1; f < t; ++f) {
    double d = 0;
    for (std::int64_t i = 0; i < per_frame; ++i)
      d += std::abs(v.frames.flat(f * per_frame + i) - v.frames.flat((f - 1) * per_frame + i));
    if (d > best) {
      best = d;
      best_f = f;
    }
  }
  return static_cast<double>(best_f) / v.fps;
}

}  // namespace foley::synthav
