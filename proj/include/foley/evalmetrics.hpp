#pragma once

#include <filesystem>
#include <vector>

#include "foley/guidance.hpp"

namespace foley::metrics {

struct ProxyArch {
  int classes = 8;
  int base_channels = 8;
  int feature_dim = 16;  // pooled embedding used by FID
};

/// Small mel classifier over the K synthetic event classes; its class
/// posteriors drive IS/MKL and its pooled features drive FID.
struct ProxyClassifier {
  ProxyArch arch;
  double test_accuracy = -1;
  nn::ParamStore params;

  nn::Conv2d c1, c2, c3;
  nn::GroupNorm n1, n2, n3;
  nn::Linear head;

  static ProxyClassifier init(const ProxyArch& arch, std::uint64_t seed);
  static ProxyClassifier from_checkpoint(const std::filesystem::path& dir);
  void save(const std::filesystem::path& dir, const nlohmann::json& extra = {}) const;

  ad::Var features_var(nn::Ctx& ctx, ad::Var x) const;  // (feature_dim)
  VectorXd features(const dsp::MelSpec& mel) const;
  VectorXd probs(const dsp::MelSpec& mel) const;  // sums to 1
};

struct ProxyTrainConfig {
  ProxyArch arch;
  int steps = 400;
  int batch = 8;
  double lr = 2e-3;
  int warmup = 30;
  double weight_decay = 1e-5;
  double clip_s = 8.0;
  std::uint64_t seed = 0;
};

struct ProxyTrainResult {
  ProxyClassifier proxy;
  std::vector<double> losses;
  double test_accuracy = 0;
};

ProxyTrainResult train_proxy(const synthav::DatasetManifest& manifest, const ProxyTrainConfig& config);

/// Fraction of generated (mel, video) pairs the clean alignment classifier
/// accepts at threshold 0.5.
double align_accuracy(const std::vector<std::pair<dsp::MelSpec, synthav::VideoClip>>& generated,
                      const guidance::AlignClassifier& clean_classifier, const codec::Codec& codec,
                      const cavp::CavpModel& cavp_model);

/// exp(E_x KL(p(y|x) || p(y))) over the proxy's posteriors.
double inception_score(const std::vector<dsp::MelSpec>& specs, const ProxyClassifier& proxy);

/// Frechet distance between Gaussian fits of proxy embeddings (unbiased
/// covariance, eigendecomposition square root, negative eigenvalues clipped).
double fid_score(const std::vector<dsp::MelSpec>& real_set, const std::vector<dsp::MelSpec>& gen_set,
                 const ProxyClassifier& proxy);

/// Mean per-pair KL(p(y|real_i) || p(y|gen_i)).
double mkl_score(const std::vector<dsp::MelSpec>& real_set, const std::vector<dsp::MelSpec>& gen_set,
                 const ProxyClassifier& proxy);

struct CodecReport {
  double fid = 0;
  double kl = 0;
  double mse = 0;
};

/// Reconstruction quality of the codec through the proxy's eyes (FID/KL) plus
/// raw mel MSE, over held-out spectrograms.
CodecReport codec_reconstruction_report(const codec::Codec& codec, const std::vector<dsp::MelSpec>& test_specs,
                                        const ProxyClassifier& proxy);

struct MetricReport {
  double align_acc = 0;
  double is_score = 1;
  double fid = 0;
  double mkl = 0;
  nlohmann::json provenance;
};

void write_metric_report(const std::filesystem::path& path, const MetricReport& report);
std::string format_metric_table(const std::vector<std::pair<std::string, MetricReport>>& rows);

}  // namespace foley::metrics
