#pragma once

#include <filesystem>
#include <vector>

#include "json.hpp"

#include "foley/nn.hpp"
#include "foley/synthav.hpp"

namespace foley::cavp {

enum class Modality { audio, video };

/// Frame-rate feature sequence E (T x C); both encoders land on the same T.
struct EmbeddingSeq {
  MatrixXd values;
  Modality modality = Modality::audio;
};

using PooledEmbedding = VectorXd;

struct CavpArch {
  int embed_dim = 64;       // C
  int audio_channels = 16;  // first conv width of the spectrogram encoder
  int video_channels = 12;  // first conv width of the video encoder

  void validate() const;
};

struct ContrastConfig {
  double tau = 0.07;
  double lambda_temporal = 1.0;  // weight of the temporal objective
  int batch_videos = 6;          // N_S
  int clips_per_video = 3;       // N_T
  double min_gap_s = 2.0;
  double clip_s = 4.0;
};

/// Two-tower model. The audio tower is a strided 2-d conv stack over the
/// spectrogram (time reduced 16x to the video frame rate); the video tower is
/// a 3-d conv stack that preserves the frame axis. Both towers see a relative
/// time-position channel next to the signal.
struct CavpModel {
  CavpArch arch;
  synthav::AvFormat fmt;
  nn::ParamStore params;

  nn::Conv2d a1, a2, a3, a4;
  nn::GroupNorm an1, an2, an3, an4;
  nn::Linear a_proj;
  nn::Conv3d v1, v2, v3;
  nn::GroupNorm vn1, vn2, vn3;
  nn::Linear v_proj;

  static CavpModel init(const CavpArch& arch, const synthav::AvFormat& fmt, std::uint64_t seed);
  static CavpModel from_checkpoint(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  /// Training-path forward producing a pooled (C) embedding variable.
  ad::Var audio_tower(nn::Ctx& ctx, const dsp::MelSpec& mel) const;
  ad::Var video_tower(nn::Ctx& ctx, const synthav::VideoClip& clip) const;
  /// Sequence-valued forward, (T, C).
  ad::Var audio_tower_seq(nn::Ctx& ctx, const dsp::MelSpec& mel) const;
  ad::Var video_tower_seq(nn::Ctx& ctx, const synthav::VideoClip& clip) const;
};

EmbeddingSeq encode_audio(const dsp::MelSpec& mel, const CavpModel& model);
EmbeddingSeq encode_video(const synthav::VideoClip& clip, const CavpModel& model);

/// Coordinate-wise max over the time axis.
PooledEmbedding temporal_pool(const EmbeddingSeq& e);

/// Symmetric two-direction InfoNCE over cosine similarities with diagonal
/// positives, averaged over the batch. Both contrast objectives share this
/// functional form; they differ only in where the pairs come from.
double semantic_contrast_loss(const std::vector<PooledEmbedding>& audio,
                              const std::vector<PooledEmbedding>& video, double tau);
double temporal_contrast_loss(const std::vector<PooledEmbedding>& audio,
                              const std::vector<PooledEmbedding>& video, double tau);

struct CavpBatch {
  std::vector<PooledEmbedding> semantic_audio, semantic_video;  // one pair per distinct video
  std::vector<std::vector<PooledEmbedding>> temporal_audio, temporal_video;  // per video, per segment
  double tau = 0.07;
  double lambda_temporal = 1.0;
};

double cavp_total_loss(const CavpBatch& batch);

struct CavpTrainConfig {
  CavpArch arch;
  ContrastConfig contrast;
  int steps = 1500;
  double lr = 8e-4;
  int warmup = 200;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct TrainLogEntry {
  int step = 0;
  double loss = 0;
  double lr = 0;
};

struct CavpTrainResult {
  CavpModel model;
  std::vector<TrainLogEntry> log;
};

CavpTrainResult train_cavp(const synthav::DatasetManifest& manifest, const CavpTrainConfig& config);

/// Audio->video top-1 retrieval over a batch of held-out samples; each sample
/// contributes its most eventful pretraining window.
double retrieval_top1(const CavpModel& model, const synthav::DatasetManifest& manifest,
                      const std::string& split, int batch);

/// Most eventful clip_s window of a sample (ties break toward the start).
std::int64_t most_eventful_start_frame(const synthav::AVSample& sample, double clip_s);

}  // namespace foley::cavp
