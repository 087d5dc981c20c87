#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "foley/synthav.hpp"

using namespace foley;
using namespace foley::synthav;
namespace fs = std::filesystem;

namespace {

AvFormat desk_format() { return AvFormat{}; }

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / "foley_test_synthav" / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double rms(const Waveform& w, double t0, double t1) {
  const auto a = static_cast<std::int64_t>(t0 * w.sample_rate);
  const auto b = static_cast<std::int64_t>(t1 * w.sample_rate);
  double e = 0;
  for (std::int64_t i = a; i < b; ++i) e += w.samples[static_cast<size_t>(i)] * w.samples[static_cast<size_t>(i)];
  return std::sqrt(e / static_cast<double>(b - a));
}

}  // namespace

TEST_CASE("zero-event script renders near-black video and near-silent audio") {
  const AvFormat fmt = desk_format();
  EventScript script;
  script.clip_duration = 10.0;
  Rng rng(3);
  const AVSample s = render_sample(script, fmt, rng);
  CHECK(s.video.frames.vec().maxCoeff() == 0.0);
  CHECK(rms(s.audio, 0.0, 10.0) < 0.01);
}

TEST_CASE("single event lights the right frame and the audio energy window") {
  const AvFormat fmt = desk_format();
  EventScript script;
  script.clip_duration = 10.0;
  script.events.push_back({2.0, 2, 0.9});
  Rng rng(4);
  const AVSample s = render_sample(script, fmt, rng);

  // frame 8 = round(2.0 s * 4 fps) is the brightest frame
  const std::int64_t per_frame = s.video.frames.dim(1) * s.video.frames.dim(2);
  double best = -1;
  std::int64_t best_f = -1;
  for (std::int64_t f = 0; f < s.video.frame_count(); ++f) {
    double sum = 0;
    for (std::int64_t i = 0; i < per_frame; ++i) sum += s.video.frames.flat(f * per_frame + i);
    if (sum > best) {
      best = sum;
      best_f = f;
    }
  }
  CHECK(best_f == 8);
  CHECK(rms(s.audio, 2.0, 2.2) >= 10.0 * rms(s.audio, 1.0, 1.2));
}

TEST_CASE("same seed renders bit-identical samples") {
  Rng a(77), b(77);
  const AVSample s1 = generate_sample(8, 10.0, a);
  const AVSample s2 = generate_sample(8, 10.0, b);
  CHECK(bit_equal(s1.video.frames, s2.video.frames));
  CHECK(s1.audio.samples == s2.audio.samples);
}

TEST_CASE("event visual change and audio energy agree within one frame period") {
  const AvFormat fmt = desk_format();
  for (std::uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    Rng rng(seed);
    EventScript script;
    script.clip_duration = 10.0;
    script.events.push_back({rng.uniform_int(2, 36) / 4.0, static_cast<int>(rng.uniform_int(0, 7)), 0.8});
    Rng noise(seed + 100);
    const AVSample s = render_sample(script, fmt, noise);
    const double ta = audio_energy_argmax_time(s.audio);
    const double tv = video_change_argmax_time(s.video);
    CHECK(std::abs(ta - tv) <= 1.0 / fmt.fps + 0.1);
    CHECK(std::abs(ta - script.events[0].time) <= 0.5);
  }
}

TEST_CASE("class carriers are separated by at least 2 mel bins") {
  const AvFormat fmt = desk_format();
  const auto centers = dsp::mel_center_frequencies(fmt.mel_bins, fmt.sample_rate);
  auto nearest_bin = [&](double f) {
    int best = 0;
    for (int m = 1; m < fmt.mel_bins; ++m)
      if (std::abs(centers[static_cast<size_t>(m)] - f) < std::abs(centers[static_cast<size_t>(best)] - f))
        best = m;
    return best;
  };
  for (int k = 1; k < fmt.classes; ++k) {
    const int b0 = nearest_bin(class_carrier_hz(k - 1, fmt));
    const int b1 = nearest_bin(class_carrier_hz(k, fmt));
    CHECK(b1 - b0 >= 2);
  }
}

TEST_CASE("build_dataset writes a loadable manifest with disjoint splits") {
  GenConfig cfg;
  cfg.root = fresh_dir("ds1");
  cfg.train_samples = 18;
  cfg.test_samples = 9;
  cfg.duration = 10.0;
  cfg.seed = 42;
  const DatasetManifest built = build_dataset(cfg);
  CHECK(built.records.size() == 27);

  const DatasetManifest loaded = load_manifest(cfg.root / "manifest.json", /*verify=*/true);
  CHECK(loaded.records.size() == 27);
  CHECK(loaded.config.train_samples == 18);

  std::set<std::string> train_ids, test_ids;
  for (const auto& r : loaded.records) (r.split == "train" ? train_ids : test_ids).insert(r.id);
  CHECK(train_ids.size() == 18);
  CHECK(test_ids.size() == 9);
  for (const auto& id : train_ids) CHECK(test_ids.count(id) == 0);

  // every class appears in at least one test sample (9 test samples, 8 classes)
  std::set<int> test_classes;
  for (const auto& r : loaded.records)
    if (r.split == "test") test_classes.insert(r.class_id);
  CHECK(static_cast<int>(test_classes.size()) == 8);
}

TEST_CASE("zero test fraction gives an empty test split") {
  GenConfig cfg;
  cfg.root = fresh_dir("ds2");
  cfg.train_samples = 4;
  cfg.test_samples = 0;
  cfg.seed = 1;
  const DatasetManifest m = build_dataset(cfg);
  CHECK(m.split_records("test").empty());
  CHECK(m.split_records("train").size() == 4);
}

TEST_CASE("regeneration with the same config and seed is byte-identical") {
  GenConfig cfg;
  cfg.root = fresh_dir("ds3a");
  cfg.train_samples = 5;
  cfg.test_samples = 2;
  cfg.seed = 9;
  build_dataset(cfg);
  auto read_file = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(f), {});
  };
  const std::string m1 = read_file(cfg.root / "manifest.json");
  const std::string w1 = read_file(cfg.root / "audio" / "train-0003.wav");

  cfg.root = fresh_dir("ds3b");
  build_dataset(cfg);
  CHECK(read_file(cfg.root / "manifest.json") == m1);
  CHECK(read_file(cfg.root / "audio" / "train-0003.wav") == w1);
}

TEST_CASE("clip_pair produces aligned desk shapes") {
  const AvFormat fmt = desk_format();
  Rng rng(8);
  const AVSample s = generate_sample(8, 10.0, rng);

  // desk config: 4 s at 4 fps, hop 125, sr 8 kHz -> 256 audio frames, 16 video frames
  const auto [mel1, clip1] = clip_pair(s, 0.0, 4.0, Stage::pretrain, fmt);
  CHECK(mel1.values.rows() == 256);
  CHECK(mel1.values.cols() == 32);
  CHECK(clip1.frame_count() == 16);
  CHECK(mel1.values.rows() % clip1.frame_count() == 0);  // integer frames per video frame
  CHECK(mel1.values.rows() / clip1.frame_count() == 16);

  // ldm stage: 8 s -> 512 x 32 mel against 32 frames
  const auto [mel2, clip2] = clip_pair(s, 0.0, 8.0, Stage::ldm, fmt);
  CHECK(mel2.values.rows() == 512);
  CHECK(clip2.frame_count() == 32);

  // full-sample pair
  const auto [mel3, clip3] = clip_pair(s, 0.0, 10.0, Stage::ldm, fmt);
  CHECK(clip3.frame_count() == 40);
  CHECK(mel3.values.rows() == 640);
}

TEST_CASE("clip_pair rejects out-of-range and off-grid crops") {
  const AvFormat fmt = desk_format();
  Rng rng(12);
  const AVSample s = generate_sample(8, 10.0, rng);
  CHECK_THROWS_AS(clip_pair(s, 8.0, 4.0, Stage::pretrain, fmt), ConfigError);
  CHECK_THROWS_AS(clip_pair(s, 0.1, 4.0, Stage::pretrain, fmt), ConfigError);
}

TEST_CASE("interior mel rows of a crop match the rows of a longer crop") {
  const AvFormat fmt = desk_format();
  Rng rng(15);
  const AVSample s = generate_sample(8, 10.0, rng);
  const auto full = mel_for_frames(s, 0, 40, Stage::ldm, fmt);
  const auto part = mel_for_frames(s, 8, 16, Stage::ldm, fmt);
  const int spf = frames_per_video_frame(fmt, Stage::ldm);
  for (Eigen::Index r = 0; r < part.values.rows(); ++r)
    CHECK((part.values.row(r) - full.values.row(8 * spf + r)).cwiseAbs().maxCoeff() == 0.0);
}
