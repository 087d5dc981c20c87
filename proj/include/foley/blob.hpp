#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "foley/tensor.hpp"

namespace foley {

// Tensor blob wire format (little-endian):
//   magic "FOLY" | u32 version=1 | u8 dtype (1=f32, 2=f64) | u8 ndim
//   | ndim x u64 shape | payload, row-major IEEE-754
enum class BlobDtype : std::uint8_t { f32 = 1, f64 = 2 };

namespace detail {

inline void blob_error(const std::filesystem::path& p, std::int64_t offset, const std::string& what) {
  throw RuntimeError(msg("tensor blob parse error in ", p.string(), " at byte offset ", offset, ": ", what));
}

}  // namespace detail

inline void write_blob(const std::filesystem::path& path, const Tensor& t, BlobDtype dtype = BlobDtype::f64) {
  std::ofstream f(path, std::ios::binary);
  check_runtime(f.good(), msg("cannot open ", path.string(), " for writing"));
  f.write("FOLY", 4);
  const std::uint32_t version = 1;
  f.write(reinterpret_cast<const char*>(&version), 4);
  const auto dt = static_cast<std::uint8_t>(dtype);
  f.write(reinterpret_cast<const char*>(&dt), 1);
  const auto ndim = static_cast<std::uint8_t>(t.ndim());
  f.write(reinterpret_cast<const char*>(&ndim), 1);
  for (int i = 0; i < t.ndim(); ++i) {
    const auto d = static_cast<std::uint64_t>(t.dim(i));
    f.write(reinterpret_cast<const char*>(&d), 8);
  }
  if (dtype == BlobDtype::f32) {
    std::vector<float> buf(static_cast<size_t>(t.size()));
    for (std::int64_t i = 0; i < t.size(); ++i) buf[static_cast<size_t>(i)] = static_cast<float>(t.flat(i));
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
  } else {
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * 8));
  }
  check_runtime(f.good(), msg("short write to ", path.string()));
}

inline Tensor read_blob(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  check_runtime(f.good(), msg("cannot open tensor blob ", path.string()));
  char magic[4];
  if (!f.read(magic, 4)) detail::blob_error(path, 0, "truncated magic");
  if (std::memcmp(magic, "FOLY", 4) != 0) detail::blob_error(path, 0, "bad magic, expected FOLY");
  std::uint32_t version = 0;
  if (!f.read(reinterpret_cast<char*>(&version), 4)) detail::blob_error(path, 4, "truncated version");
  if (version != 1) detail::blob_error(path, 4, msg("unsupported format version ", version));
  std::uint8_t dtype = 0, ndim = 0;
  if (!f.read(reinterpret_cast<char*>(&dtype), 1)) detail::blob_error(path, 8, "truncated dtype");
  if (dtype != 1 && dtype != 2) detail::blob_error(path, 8, msg("unknown dtype code ", int(dtype)));
  if (!f.read(reinterpret_cast<char*>(&ndim), 1)) detail::blob_error(path, 9, "truncated ndim");
  Shape shape(ndim);
  for (int i = 0; i < ndim; ++i) {
    std::uint64_t d = 0;
    if (!f.read(reinterpret_cast<char*>(&d), 8)) detail::blob_error(path, 10 + 8 * i, "truncated shape");
    shape[static_cast<size_t>(i)] = static_cast<std::int64_t>(d);
  }
  const std::int64_t payload_off = 10 + 8 * ndim;
  Tensor t(shape);
  if (dtype == 1) {
    std::vector<float> buf(static_cast<size_t>(t.size()));
    if (!f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4)))
      detail::blob_error(path, payload_off + f.gcount(), "payload shorter than shape implies");
    for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = static_cast<double>(buf[static_cast<size_t>(i)]);
  } else {
    if (!f.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * 8)))
      detail::blob_error(path, payload_off + f.gcount(), "payload shorter than shape implies");
  }
  return t;
}

}  // namespace foley
