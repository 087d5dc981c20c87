#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "foley/nn.hpp"
#include "foley/synthav.hpp"

namespace foley::codec {

/// Latent tensors are (C', T'/r, M/r).
using Latent = Tensor;

enum class Mode { identity, learned };

struct CodecArch {
  Mode mode = Mode::learned;
  int compress = 4;         // r
  int latent_channels = 4;  // C'; identity mode requires C' == r*r
  int base_channels = 16;

  void validate() const;
};

/// Mel-spectrogram <-> latent codec. Identity mode is a pure space-to-channel
/// reshape (bit-exact inverse pair); learned mode is a small strided conv
/// autoencoder over normalized log-mels with a post-training latent scale.
struct Codec {
  CodecArch arch;
  synthav::AvFormat fmt;
  double latent_scale = 1.0;
  nn::ParamStore params;

  nn::Conv2d e1, e2, e3, e4;
  nn::GroupNorm en1, en2, en3;
  nn::Conv2d d1, d2, d3, d4;
  nn::GroupNorm dn1, dn2, dn3;

  static Codec identity(const synthav::AvFormat& fmt, int compress = 2);
  static Codec init_learned(const CodecArch& arch, const synthav::AvFormat& fmt, std::uint64_t seed);
  static Codec from_checkpoint(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  ad::Var encode_var(nn::Ctx& ctx, ad::Var x) const;  // (1,T,M) normalized -> latent
  ad::Var decode_var(nn::Ctx& ctx, ad::Var z) const;
};

Latent encode(const dsp::MelSpec& mel, const Codec& codec);
dsp::MelSpec decode(const Latent& z, const Codec& codec);

struct CodecTrainConfig {
  CodecArch arch;
  int steps = 600;
  int batch = 3;
  int crop_frames = 16;  // training crops, in video frames
  double lr = 2e-3;
  int warmup = 50;
  double weight_decay = 1e-5;
  std::uint64_t seed = 0;
};

struct CodecTrainResult {
  Codec codec;
  std::vector<double> losses;  // per-step reconstruction MSE (normalized domain)
};

CodecTrainResult train_codec(const synthav::DatasetManifest& manifest, const CodecTrainConfig& config);

/// Mean squared reconstruction error over held-out full-length LDM-stage mels,
/// in raw log-mel units.
double heldout_reconstruction_mse(const Codec& codec, const synthav::DatasetManifest& manifest,
                                  const std::string& split, int max_samples);

}  // namespace foley::codec
