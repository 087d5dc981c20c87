#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "foley/blob.hpp"
#include "foley/dsp.hpp"
#include "foley/rng.hpp"
#include "foley/wav.hpp"

using namespace foley;
namespace fs = std::filesystem;

namespace {
fs::path tmp_dir() {
  const fs::path p = fs::temp_directory_path() / "foley_test_core";
  fs::create_directories(p);
  return p;
}
}  // namespace

TEST_CASE("tensor blob round trip is bit exact") {
  Rng rng(11);
  Tensor t = rng.normal_tensor({3, 5, 2});
  const fs::path p = tmp_dir() / "t.blob";
  write_blob(p, t, BlobDtype::f64);
  const Tensor back = read_blob(p);
  CHECK(bit_equal(t, back));
}

TEST_CASE("f32 blobs round trip at f32 precision") {
  Tensor t({4});
  t.flat(0) = 1.0;
  t.flat(1) = -0.5;
  t.flat(2) = 3.25;
  t.flat(3) = 1e-6;
  const fs::path p = tmp_dir() / "t32.blob";
  write_blob(p, t, BlobDtype::f32);
  const Tensor back = read_blob(p);
  for (int i = 0; i < 4; ++i) CHECK(back.flat(i) == doctest::Approx(t.flat(i)).epsilon(1e-7));
  // write-read-write is stable
  write_blob(p, back, BlobDtype::f32);
  CHECK(bit_equal(back, read_blob(p)));
}

TEST_CASE("corrupt magic is rejected with the byte offset") {
  const fs::path p = tmp_dir() / "bad.blob";
  std::ofstream f(p, std::ios::binary);
  f << "JUNKJUNKJUNK";
  f.close();
  CHECK_THROWS_WITH_AS(read_blob(p), doctest::Contains("offset 0"), RuntimeError);
}

TEST_CASE("short payload is rejected with a parse error") {
  Rng rng(7);
  Tensor t = rng.normal_tensor({4, 4});
  const fs::path p = tmp_dir() / "short.blob";
  write_blob(p, t, BlobDtype::f64);
  const auto full = fs::file_size(p);
  fs::resize_file(p, full - 16);
  CHECK_THROWS_AS(read_blob(p), RuntimeError);
}

TEST_CASE("rng streams are deterministic and independent") {
  Rng a = Rng::stream(42, "stage/a");
  Rng a2 = Rng::stream(42, "stage/a");
  Rng b = Rng::stream(42, "stage/b");
  bool all_equal = true, any_equal_cross = false;
  for (int i = 0; i < 64; ++i) {
    const auto x = a.next_u64(), y = a2.next_u64(), z = b.next_u64();
    all_equal = all_equal && (x == y);
    any_equal_cross = any_equal_cross || (x == z);
  }
  CHECK(all_equal);
  CHECK_FALSE(any_equal_cross);
}

TEST_CASE("rng normal moments are sane") {
  Rng rng(123);
  double sum = 0, sq = 0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sq += x * x;
  }
  CHECK(std::abs(sum / n) < 0.03);
  CHECK(sq / n == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("wav files round trip at 16-bit precision") {
  Waveform w;
  w.sample_rate = 8000;
  Rng rng(5);
  for (int i = 0; i < 4000; ++i) w.samples.push_back(0.7 * std::sin(i * 0.01) + 0.01 * rng.normal());
  dsp::peak_normalize(w);
  const fs::path p = tmp_dir() / "w.wav";
  write_wav(p, w);
  const Waveform back = read_wav(p);
  REQUIRE(back.sample_rate == w.sample_rate);
  REQUIRE(back.samples.size() == w.samples.size());
  double worst = 0;
  for (size_t i = 0; i < w.samples.size(); ++i) worst = std::max(worst, std::abs(back.samples[i] - w.samples[i]));
  CHECK(worst < 1.0 / 32000.0);
  // a second write of the quantized signal is byte-stable
  const fs::path p2 = tmp_dir() / "w2.wav";
  write_wav(p2, back);
  CHECK(read_wav(p2).samples == back.samples);
}

TEST_CASE("tensor reshape keeps data, rejects bad shapes") {
  Tensor t({2, 6});
  for (int i = 0; i < 12; ++i) t.flat(i) = i;
  const Tensor r = t.reshaped({3, 4});
  CHECK(r.at(2, 3) == 11.0);
  CHECK_THROWS_AS(t.reshaped({5, 2}), ConfigError);
}
