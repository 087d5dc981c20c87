#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "foley/cavp.hpp"
#include "foley/latentcodec.hpp"
#include "foley/nn.hpp"

namespace foley::diffusion {

using codec::Latent;

/// Variance-preserving noise schedule: alpha_t, cumulative alpha_bar_t
/// (alpha_bar[0] == 1), and the posterior variances
/// sigma_t^2 = (1 - alpha_bar_{t-1}) (1 - alpha_t) / (1 - alpha_bar_t).
struct NoiseSchedule {
  int timesteps = 0;
  double beta_start = 0;  // generating endpoints, kept so checkpoints rebuild
  double beta_end = 0;    // the exact same tables
  std::vector<double> alpha;          // [0..T], alpha[0] unused (= 1)
  std::vector<double> alpha_bar;      // [0..T]
  std::vector<double> posterior_var;  // [0..T], entry 0 unused (= 0)

  double sqrt_ab(int t) const { return std::sqrt(alpha_bar[static_cast<size_t>(t)]); }
  double sqrt_1m_ab(int t) const { return std::sqrt(1.0 - alpha_bar[static_cast<size_t>(t)]); }
  void validate() const;
};

enum class ScheduleKind { linear_beta };

NoiseSchedule make_schedule(ScheduleKind kind, int timesteps, double beta_start, double beta_end);

/// q(z_t | z_0) realized with the provided noise: sqrt(ab_t) z0 + sqrt(1-ab_t) eps.
Latent forward_sample(const Latent& z0, int t, const Latent& noise, const NoiseSchedule& sched);

struct UnetArch {
  int latent_channels = 4;
  int base_channels = 32;  // levels run [c, 2c, 2c]
  int cond_input = 64;     // CAVP feature width C
  int cond_width = 64;     // projected condition width C''
  int temb_dim = 128;

  void validate() const;
};

/// epsilon-prediction U-Net with cross-attention on the two finest levels plus
/// the condition projector (positional encoding + MLP) and a learned null
/// condition row for classifier-free training.
struct DenoiserModel {
  UnetArch arch;
  NoiseSchedule schedule;
  nn::ParamStore params;

  nn::Linear temb1, temb2;
  nn::Linear cond_mlp1, cond_mlp2;
  nn::Conv2d conv_in;
  nn::ResBlock2d enc1, enc2, enc3, mid1, mid2, dec3, dec2, dec1;
  nn::CrossAttention attn_enc1, attn_enc2, attn_dec1, attn_dec2;
  nn::Conv2d down1, down2, up2, up1;
  nn::GroupNorm out_norm;
  nn::Conv2d conv_out;

  static DenoiserModel init(const UnetArch& arch, const NoiseSchedule& sched, std::uint64_t seed);
  static DenoiserModel from_checkpoint(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  /// Projected condition sequence tau(E_v); pass invalid cond for the learned
  /// null embedding broadcast over cond_frames rows.
  ad::Var project_condition(nn::Ctx& ctx, ad::Var cond_raw, std::int64_t cond_frames) const;
  ad::Var eps_var(nn::Ctx& ctx, ad::Var z_t, int t, ad::Var cond_proj) const;

  /// Inference-path prediction; cond == nullptr selects the null condition
  /// (cond_frames rows). Output shape equals the input latent shape.
  Tensor predict_eps(const Latent& z_t, int t, const MatrixXd* cond, std::int64_t cond_frames = 1) const;
};

struct LdmTrainConfig {
  UnetArch arch;
  ScheduleKind schedule_kind = ScheduleKind::linear_beta;
  int timesteps = 200;
  double beta_start = 1e-4;
  double beta_end = 3.5e-2;
  int steps = 1200;
  int batch = 4;
  double lr = 1.5e-3;
  int warmup = 100;
  double weight_decay = 1e-5;
  double cond_drop_prob = 0.2;
  bool augment = true;
  double aug_prob = 0.5;
  double clip_s = 8.0;
  std::uint64_t seed = 0;
};

/// Single-example training objective || eps - eps_theta(z_t, t, E_v) ||^2 / dim
/// with t uniform in [1, T]; the condition is replaced by the null embedding
/// with probability cond_drop_prob. Pure given the rng state.
double denoise_loss(const Latent& z0, const MatrixXd& cond, const DenoiserModel& model,
                    double cond_drop_prob, Rng& rng);

/// Temporal split & merge: latent of the time-concatenated spectrograms paired
/// with the time-concatenated features. Spectrograms are concatenated *before*
/// encoding. cut is segment A's duration and must sit on the video frame grid.
std::pair<Latent, cavp::EmbeddingSeq> split_merge_augment(
    const std::pair<dsp::MelSpec, cavp::EmbeddingSeq>& pair_a,
    const std::pair<dsp::MelSpec, cavp::EmbeddingSeq>& pair_b, double cut, const codec::Codec& codec);

struct LdmTrainResult {
  DenoiserModel model;
  std::vector<cavp::TrainLogEntry> log;
};

/// Train the denoiser against frozen CAVP and codec checkpoints; optionally
/// resume from existing parameters (downstream finetuning path).
LdmTrainResult train_ldm(const synthav::DatasetManifest& manifest, const cavp::CavpModel& cavp_model,
                         const codec::Codec& codec, const LdmTrainConfig& config,
                         const DenoiserModel* resume_from = nullptr);

/// Write a training log as newline-delimited JSON records (step, loss, lr).
void write_train_log(const std::filesystem::path& path, const std::vector<cavp::TrainLogEntry>& log);

}  // namespace foley::diffusion
