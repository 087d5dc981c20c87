#pragma once

#include <filesystem>
#include <vector>

#include "foley/diffusion.hpp"

namespace foley::guidance {

using codec::Latent;

enum class GuidanceMode { none, cfg, cg, double_guidance };

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::none;
  double omega = 4.5;  // CFG scale; ignored unless mode is cfg/double
  double gamma = 50.0; // CG scale; ignored unless mode is cg/double
};

GuidanceMode parse_guidance_mode(const std::string& name);
std::string guidance_mode_name(GuidanceMode mode);

/// omega * eps_cond + (1 - omega) * eps_uncond.
Latent cfg_noise(const Latent& eps_cond, const Latent& eps_uncond, double omega);

/// omega * eps_cond + (1 - omega) * eps_uncond - gamma * sqrt(1 - alpha_bar_t) * grad.
Latent double_guidance_noise(const Latent& eps_cond, const Latent& eps_uncond, const Latent& grad,
                             double omega, double gamma, double alpha_bar_t);

struct ClassifierArch {
  int latent_channels = 4;
  int base_channels = 24;  // levels [c, 2c]
  int cond_input = 64;
  int cond_width = 64;
  int temb_dim = 64;
};

/// Alignment classifier P(y=1 | z, t, E_v): a U-Net-encoder-style conv stack
/// whose down-sampled tokens cross-attend into the condition; the head scores
/// token/attended-feature agreement (including their product) before pooling.
/// The clean (non-noisy) variant is the same network queried at t = 0.
struct AlignClassifier {
  ClassifierArch arch;
  bool noisy = false;
  double test_accuracy = -1;  // held-out accuracy recorded after training
  nn::ParamStore params;

  nn::Linear temb1, temb2;
  nn::Linear cond_mlp1, cond_mlp2;
  nn::Conv2d conv_in;
  nn::ResBlock2d block1, block2;
  nn::Conv2d down1;
  nn::LayerNorm attn_ln;
  nn::Linear wq, wk, wv;
  nn::Linear fuse;
  nn::Linear head;

  static AlignClassifier init(const ClassifierArch& arch, bool noisy, std::uint64_t seed);
  static AlignClassifier from_checkpoint(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  ad::Var logit_var(nn::Ctx& ctx, ad::Var z, int t, ad::Var cond_raw) const;

  /// Alignment probability, strictly inside (0, 1).
  double prob(const Latent& z, int t, const MatrixXd& cond) const;
};

/// Exact gradient of log P(y=1 | z_t, t, E_v) with respect to z_t (classifier
/// parameters frozen), computed by backprop through the classifier.
Latent align_grad(const Latent& z_t, int t, const MatrixXd& cond, const AlignClassifier& classifier);

enum class PairKind { true_pair, temporal_shift, wrong_video };

/// 50% true pairs, 25% temporally shifted, 25% wrong-video pairs.
PairKind sample_pair_kind(Rng& rng);

struct AlignPair {
  Latent z0;
  MatrixXd cond;
  PairKind kind = PairKind::true_pair;
  int label = 1;
};

/// Construct one training pair from the split. Shift negatives circularly
/// rotate the mel rows by 25-75% of the clip (snapped to the latent grid).
AlignPair make_align_pair(const std::vector<synthav::AVSample>& samples, const synthav::AvFormat& fmt,
                          const cavp::CavpModel& cavp_model, const codec::Codec& codec, double clip_s,
                          Rng& rng);

struct AlignTrainConfig {
  ClassifierArch arch;
  bool noisy = false;
  int steps = 700;
  int batch = 6;
  double lr = 1.2e-3;
  int warmup = 50;
  double weight_decay = 1e-5;
  double clip_s = 8.0;
  int eval_pairs = 96;
  std::uint64_t seed = 0;
};

struct AlignTrainResult {
  AlignClassifier classifier;
  std::vector<double> losses;
  double test_accuracy = 0;
};

AlignTrainResult train_align_classifier(const synthav::DatasetManifest& manifest,
                                        const cavp::CavpModel& cavp_model, const codec::Codec& codec,
                                        const diffusion::NoiseSchedule& sched, bool noisy,
                                        const AlignTrainConfig& config);

}  // namespace foley::guidance
