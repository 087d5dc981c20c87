#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "foley/common.hpp"

namespace foley {

template <typename S>
struct WaveformT {
  std::vector<S> samples;  // amplitudes, nominally in [-1, 1]
  int sample_rate = 0;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

using Waveform = WaveformT<double>;

// PCM 16-bit little-endian mono.
inline void write_wav(const std::filesystem::path& path, const Waveform& w) {
  check_config(w.sample_rate > 0, "write_wav: sample_rate must be positive");
  std::ofstream f(path, std::ios::binary);
  check_runtime(f.good(), msg("cannot open ", path.string(), " for writing"));

  const std::uint32_t n = static_cast<std::uint32_t>(w.samples.size());
  const std::uint32_t data_bytes = n * 2;
  const std::uint32_t sr = static_cast<std::uint32_t>(w.sample_rate);
  auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
  auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };

  f.write("RIFF", 4);
  u32(36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  u32(16);
  u16(1);       // PCM
  u16(1);       // mono
  u32(sr);
  u32(sr * 2);  // byte rate
  u16(2);       // block align
  u16(16);      // bits per sample
  f.write("data", 4);
  u32(data_bytes);
  for (double s : w.samples) {
    const double clamped = std::clamp(s, -1.0, 1.0);
    const auto q = static_cast<std::int16_t>(std::lrint(clamped * 32767.0));
    f.write(reinterpret_cast<const char*>(&q), 2);
  }
  check_runtime(f.good(), msg("short write to ", path.string()));
}

inline Waveform read_wav(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check_runtime(f.good(), msg("cannot open wav file ", path.string()));
  char tag[4];
  std::uint32_t riff_size = 0;
  check_runtime(bool(f.read(tag, 4)) && std::memcmp(tag, "RIFF", 4) == 0, path.string() + ": not a RIFF file");
  f.read(reinterpret_cast<char*>(&riff_size), 4);
  check_runtime(bool(f.read(tag, 4)) && std::memcmp(tag, "WAVE", 4) == 0, path.string() + ": not a WAVE file");

  Waveform w;
  bool got_fmt = false, got_data = false;
  while (f.read(tag, 4)) {
    std::uint32_t chunk = 0;
    if (!f.read(reinterpret_cast<char*>(&chunk), 4)) break;
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      std::uint16_t fmt = 0, channels = 0, block = 0, bits = 0;
      std::uint32_t sr = 0, byterate = 0;
      f.read(reinterpret_cast<char*>(&fmt), 2);
      f.read(reinterpret_cast<char*>(&channels), 2);
      f.read(reinterpret_cast<char*>(&sr), 4);
      f.read(reinterpret_cast<char*>(&byterate), 4);
      f.read(reinterpret_cast<char*>(&block), 2);
      f.read(reinterpret_cast<char*>(&bits), 2);
      check_runtime(fmt == 1 && channels == 1 && bits == 16,
                    path.string() + ": only 16-bit PCM mono supported");
      w.sample_rate = static_cast<int>(sr);
      if (chunk > 16) f.seekg(chunk - 16, std::ios::cur);
      got_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      check_runtime(got_fmt, path.string() + ": data chunk before fmt chunk");
      std::vector<std::int16_t> raw(chunk / 2);
      check_runtime(bool(f.read(reinterpret_cast<char*>(raw.data()), chunk)), path.string() + ": truncated data chunk");
      w.samples.resize(raw.size());
      for (size_t i = 0; i < raw.size(); ++i) w.samples[i] = static_cast<double>(raw[i]) / 32767.0;
      got_data = true;
      break;
    } else {
      f.seekg(chunk + (chunk & 1), std::ios::cur);  // skip unknown chunk (word aligned)
    }
  }
  check_runtime(got_data, path.string() + ": no data chunk found");
  return w;
}

}  // namespace foley
