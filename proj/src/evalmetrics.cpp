#include "foley/evalmetrics.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <fstream>
#include <iostream>

#include "foley/checkpoint.hpp"

namespace foley::metrics {

using nlohmann::json;

namespace {

void build_layers(ProxyClassifier& m, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "proxy/init");
  auto& s = m.params;
  const int c = m.arch.base_channels;
  m.c1 = nn::Conv2d(s, rng, "proxy.c1", 1, c, 3, 2, 2, 1);
  m.n1 = nn::GroupNorm(s, "proxy.n1", c, 4);
  m.c2 = nn::Conv2d(s, rng, "proxy.c2", c, 2 * c, 3, 2, 2, 1);
  m.n2 = nn::GroupNorm(s, "proxy.n2", 2 * c, 4);
  m.c3 = nn::Conv2d(s, rng, "proxy.c3", 2 * c, m.arch.feature_dim, 3, 2, 2, 1);
  m.n3 = nn::GroupNorm(s, "proxy.n3", m.arch.feature_dim, 4);
  m.head = nn::Linear(s, rng, "proxy.head", m.arch.feature_dim, m.arch.classes);
}

Tensor mel_input(const dsp::MelSpec& mel) {
  Tensor x({1, mel.values.rows(), mel.values.cols()});
  x.mat(mel.values.rows(), mel.values.cols()) = dsp::normalized_mel(mel);
  return x;
}

}  // namespace

ProxyClassifier ProxyClassifier::init(const ProxyArch& arch, std::uint64_t seed) {
  check_config(arch.classes >= 2, "ProxyArch: need at least 2 classes");
  ProxyClassifier m;
  m.arch = arch;
  build_layers(m, seed);
  return m;
}

ProxyClassifier ProxyClassifier::from_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  check_runtime(ckpt.meta.value("model", "") == "proxy",
                msg("checkpoint at ", dir.string(), " is not a proxy-classifier checkpoint"));
  ProxyClassifier m;
  m.arch.classes = ckpt.meta.at("arch").at("classes").get<int>();
  m.arch.base_channels = ckpt.meta.at("arch").at("base_channels").get<int>();
  m.arch.feature_dim = ckpt.meta.at("arch").at("feature_dim").get<int>();
  m.test_accuracy = ckpt.meta.value("test_accuracy", -1.0);
  m.params = std::move(ckpt.params);
  const size_t loaded = m.params.items.size();
  build_layers(m, 0);
  check_params_match(m.params, loaded, dir);
  return m;
}

void ProxyClassifier::save(const std::filesystem::path& dir, const json& extra) const {
  json meta = extra;
  meta["model"] = "proxy";
  meta["test_accuracy"] = test_accuracy;
  meta["arch"] = {{"classes", arch.classes},
                  {"base_channels", arch.base_channels},
                  {"feature_dim", arch.feature_dim}};
  save_checkpoint(dir, params, meta);
}

ad::Var ProxyClassifier::features_var(nn::Ctx& ctx, ad::Var x) const {
  x = ad::silu(n1(ctx, c1(ctx, x)));
  x = ad::silu(n2(ctx, c2(ctx, x)));
  x = ad::silu(n3(ctx, c3(ctx, x)));
  const Shape s = x.value().shape();
  return ad::mean_over_last(ad::reshape(x, {s[0], s[1] * s[2]}));
}

VectorXd ProxyClassifier::features(const dsp::MelSpec& mel) const {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(params), /*trainable=*/false};
  return features_var(ctx, tape.input(mel_input(mel))).value().vec();
}

VectorXd ProxyClassifier::probs(const dsp::MelSpec& mel) const {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(params), /*trainable=*/false};
  ad::Var f = features_var(ctx, tape.input(mel_input(mel)));
  ad::Var logits = head(ctx, ad::reshape(f, {1, arch.feature_dim}));
  const Tensor p = ad::softmax_rows(logits).value();
  VectorXd out = p.vec();
  const double sum = out.sum();
  check_runtime(std::abs(sum - 1.0) < 1e-6, "proxy probs: posterior does not sum to 1");
  return out / sum;
}

ProxyTrainResult train_proxy(const synthav::DatasetManifest& manifest, const ProxyTrainConfig& config) {
  const auto& fmt = manifest.config.format;
  check_config(config.arch.classes == fmt.classes,
               msg("train_proxy: arch has ", config.arch.classes, " classes, dataset has ", fmt.classes));
  std::vector<synthav::AVSample> train, test;
  std::vector<int> train_labels, test_labels;
  for (const auto* r : manifest.split_records("train")) {
    train.push_back(synthav::load_sample(manifest, *r));
    train_labels.push_back(r->class_id);
  }
  for (const auto* r : manifest.split_records("test")) {
    test.push_back(synthav::load_sample(manifest, *r));
    test_labels.push_back(r->class_id);
  }
  check_config(!train.empty(), "train_proxy: empty training split");

  ProxyTrainResult result{ProxyClassifier::init(config.arch, config.seed), {}, 0.0};
  ProxyClassifier& model = result.proxy;

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.warmup = config.warmup;
  opt.weight_decay = config.weight_decay;

  Rng rng = Rng::stream(config.seed, "proxy/train");
  const auto clip_frames = static_cast<std::int64_t>(std::llround(config.clip_s * fmt.fps));
  const std::int64_t total = train.front().video.frame_count();
  const std::int64_t max_f0 = std::max<std::int64_t>(0, std::min<std::int64_t>(total - clip_frames, 8));

  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    nn::Ctx ctx{tape, model.params};
    ad::Var loss;
    for (int b = 0; b < config.batch; ++b) {
      const auto i = static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(train.size()) - 1));
      const std::int64_t f0 = max_f0 > 0 ? rng.uniform_int(0, max_f0) : 0;
      const dsp::MelSpec mel = synthav::mel_for_frames(train[i], f0, clip_frames, synthav::Stage::ldm, fmt);
      ad::Var f = model.features_var(ctx, tape.input(mel_input(mel)));
      ad::Var logits = model.head(ctx, ad::reshape(f, {1, model.arch.feature_dim}));
      ad::Var lse = ad::logsumexp_rows(logits);
      ad::Var picked = ad::select(logits, train_labels[i]);
      ad::Var l = ad::sub(ad::sum(lse), picked);
      loss = loss.valid() ? ad::add(loss, l) : l;
    }
    loss = ad::scale(loss, 1.0 / config.batch);
    const double loss_val = loss.value().flat(0);
    check_runtime(std::isfinite(loss_val), msg("train_proxy: non-finite loss at step ", step));
    tape.backward(loss);
    auto grads = nn::collect_grads(ctx);
    opt.step(model.params, grads);
    result.losses.push_back(loss_val);
  }

  const auto& eval = test.empty() ? train : test;
  const auto& eval_labels = test.empty() ? train_labels : test_labels;
  int correct = 0;
  for (size_t i = 0; i < eval.size(); ++i) {
    const dsp::MelSpec mel = synthav::mel_for_frames(eval[i], 0, clip_frames, synthav::Stage::ldm, fmt);
    Eigen::Index arg = 0;
    model.probs(mel).maxCoeff(&arg);
    if (static_cast<int>(arg) == eval_labels[i]) ++correct;
  }
  result.test_accuracy = static_cast<double>(correct) / static_cast<double>(eval.size());
  model.test_accuracy = result.test_accuracy;
  return result;
}

double align_accuracy(const std::vector<std::pair<dsp::MelSpec, synthav::VideoClip>>& generated,
                      const guidance::AlignClassifier& clean_classifier, const codec::Codec& codec,
                      const cavp::CavpModel& cavp_model) {
  check_config(!generated.empty(), "align_accuracy: empty input list");
  check_config(clean_classifier.test_accuracy >= 0,
               "align_accuracy: classifier carries no training record; refusing to score with an untrained model");
  int aligned = 0;
  for (const auto& [mel, video] : generated) {
    const codec::Latent z0 = codec::encode(mel, codec);
    const MatrixXd cond = cavp::encode_video(video, cavp_model).values;
    if (clean_classifier.prob(z0, 0, cond) >= 0.5) ++aligned;
  }
  return static_cast<double>(aligned) / static_cast<double>(generated.size());
}

namespace {

double kl_divergence(const VectorXd& p, const VectorXd& q) {
  double kl = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    const double pi = std::max(p(i), 1e-12);
    const double qi = std::max(q(i), 1e-12);
    kl += pi * std::log(pi / qi);
  }
  return std::max(0.0, kl);
}

// Symmetric PSD square root with negative eigenvalues clipped at 0.
MatrixXd psd_sqrt(const MatrixXd& m, bool* clipped) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
  Eigen::VectorXd ev = es.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    if (ev(i) < 0) {
      if (clipped != nullptr && ev(i) < -1e-9) *clipped = true;
      ev(i) = 0;
    }
  }
  const Eigen::MatrixXd r = es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
  return r;
}

struct GaussianFit {
  VectorXd mean;
  MatrixXd cov;
};

GaussianFit fit_gaussian(const std::vector<VectorXd>& xs) {
  const auto n = static_cast<Eigen::Index>(xs.size());
  const Eigen::Index d = xs.front().size();
  GaussianFit fit;
  fit.mean = VectorXd::Zero(d);
  for (const auto& x : xs) fit.mean += x;
  fit.mean /= static_cast<double>(n);
  fit.cov = MatrixXd::Zero(d, d);
  if (n > 1) {
    for (const auto& x : xs) {
      const VectorXd c = x - fit.mean;
      fit.cov += (c * c.transpose()).eval();
    }
    fit.cov /= static_cast<double>(n - 1);  // unbiased
  }
  // Ridge-regularize (and log) if the fit is singular.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(fit.cov);
  const double max_ev = es.eigenvalues().cwiseAbs().maxCoeff();
  const double min_ev = es.eigenvalues().minCoeff();
  if (n <= d || min_ev < -1e-12 || (max_ev > 0 && min_ev / max_ev < 1e-14)) {
    const double ridge = std::max(1e-10, 1e-10 * max_ev);
    fit.cov.diagonal().array() += ridge;
    std::cerr << "[metrics] singular covariance: ridge-regularized with eps=" << ridge << "\n";
  }
  return fit;
}

std::vector<VectorXd> embed_all(const std::vector<dsp::MelSpec>& specs, const ProxyClassifier& proxy) {
  std::vector<VectorXd> out;
  out.reserve(specs.size());
  for (const auto& m : specs) out.push_back(proxy.features(m));
  return out;
}

}  // namespace

double inception_score(const std::vector<dsp::MelSpec>& specs, const ProxyClassifier& proxy) {
  check_config(!specs.empty(), "inception_score: empty input list");
  std::vector<VectorXd> posteriors;
  posteriors.reserve(specs.size());
  VectorXd marginal = VectorXd::Zero(proxy.arch.classes);
  for (const auto& m : specs) {
    posteriors.push_back(proxy.probs(m));
    marginal += posteriors.back();
  }
  marginal /= static_cast<double>(specs.size());
  double mean_kl = 0;
  for (const auto& p : posteriors) mean_kl += kl_divergence(p, marginal);
  mean_kl /= static_cast<double>(specs.size());
  return std::exp(mean_kl);
}

double fid_score(const std::vector<dsp::MelSpec>& real_set, const std::vector<dsp::MelSpec>& gen_set,
                 const ProxyClassifier& proxy) {
  check_config(!real_set.empty() && !gen_set.empty(), "fid_score: empty input set");
  const GaussianFit a = fit_gaussian(embed_all(real_set, proxy));
  const GaussianFit b = fit_gaussian(embed_all(gen_set, proxy));
  bool clipped = false;
  const MatrixXd sa = psd_sqrt(a.cov, &clipped);
  const MatrixXd inner = sa * b.cov * sa;
  const MatrixXd sqrt_inner = psd_sqrt(inner, &clipped);
  if (clipped) std::cerr << "[metrics] fid: negative eigenvalues clipped to 0 in matrix sqrt\n";
  const double d2 = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * sqrt_inner.trace();
  return std::max(0.0, d2);
}

double mkl_score(const std::vector<dsp::MelSpec>& real_set, const std::vector<dsp::MelSpec>& gen_set,
                 const ProxyClassifier& proxy) {
  check_config(!real_set.empty() && real_set.size() == gen_set.size(),
               "mkl_score: needs paired, non-empty real/generated sets");
  double total = 0;
  for (size_t i = 0; i < real_set.size(); ++i)
    total += kl_divergence(proxy.probs(real_set[i]), proxy.probs(gen_set[i]));
  return total / static_cast<double>(real_set.size());
}

CodecReport codec_reconstruction_report(const codec::Codec& codec, const std::vector<dsp::MelSpec>& test_specs,
                                        const ProxyClassifier& proxy) {
  check_config(!test_specs.empty(), "codec_reconstruction_report: empty test set");
  std::vector<dsp::MelSpec> recon;
  recon.reserve(test_specs.size());
  double mse = 0;
  std::int64_t count = 0;
  for (const auto& m : test_specs) {
    recon.push_back(codec::decode(codec::encode(m, codec), codec));
    mse += (recon.back().values - m.values).squaredNorm();
    count += m.values.size();
  }
  CodecReport report;
  report.mse = mse / static_cast<double>(count);
  report.fid = fid_score(test_specs, recon, proxy);
  report.kl = mkl_score(test_specs, recon, proxy);
  return report;
}

void write_metric_report(const std::filesystem::path& path, const MetricReport& report) {
  json doc = {{"align_acc", report.align_acc},
              {"is", report.is_score},
              {"fid", report.fid},
              {"mkl", report.mkl},
              {"provenance", report.provenance}};
  std::ofstream f(path);
  check_runtime(f.good(), msg("cannot write metric report ", path.string()));
  f << doc.dump(2) << "\n";
}

std::string format_metric_table(const std::vector<std::pair<std::string, MetricReport>>& rows) {
  std::ostringstream os;
  os << "config          align_acc         is        fid        mkl\n";
  char buf[160];
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof(buf), "%-14s %10.4f %10.4f %10.4f %10.4f\n", name.c_str(), r.align_acc,
                  r.is_score, r.fid, r.mkl);
    os << buf;
  }
  return os.str();
}

}  // namespace foley::metrics
