#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "foley/evalmetrics.hpp"

using namespace foley;
using namespace foley::metrics;

namespace {

dsp::MelSpec random_mel(std::uint64_t seed, double bias = 0.0) {
  Rng rng(seed);
  dsp::MelSpec m;
  m.values.resize(64, 32);
  for (Eigen::Index r = 0; r < 64; ++r)
    for (Eigen::Index c = 0; c < 32; ++c) m.values(r, c) = -6.0 + bias + rng.normal();
  m.mel_basis = 32;
  m.fft_size = 256;
  m.hop_size = 128;
  m.sample_rate = 8000;
  m.floor = 1e-5;
  return m;
}

ProxyClassifier tiny_proxy(std::uint64_t seed) {
  ProxyArch arch;
  arch.classes = 8;
  return ProxyClassifier::init(arch, seed);
}

}  // namespace

TEST_CASE("proxy posteriors sum to one") {
  const ProxyClassifier proxy = tiny_proxy(3);
  const VectorXd p = proxy.probs(random_mel(5));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(p.minCoeff() >= 0.0);
  CHECK(p.size() == 8);
}

TEST_CASE("identical distributions have FID 0 and MKL 0") {
  const ProxyClassifier proxy = tiny_proxy(7);
  std::vector<dsp::MelSpec> set;
  for (int i = 0; i < 12; ++i) set.push_back(random_mel(100 + static_cast<std::uint64_t>(i)));
  CHECK(fid_score(set, set, proxy) <= 1e-6);
  CHECK(mkl_score(set, set, proxy) <= 1e-12);
}

TEST_CASE("FID is symmetric, non-negative, and separates shifted sets") {
  const ProxyClassifier proxy = tiny_proxy(9);
  std::vector<dsp::MelSpec> a, b;
  for (int i = 0; i < 12; ++i) {
    a.push_back(random_mel(200 + static_cast<std::uint64_t>(i)));
    b.push_back(random_mel(300 + static_cast<std::uint64_t>(i), 1.5));
  }
  const double ab = fid_score(a, b, proxy);
  const double ba = fid_score(b, a, proxy);
  CHECK(std::abs(ab - ba) <= 1e-9);
  CHECK(ab >= 0.0);
  CHECK(ab > 1e-6);  // distinguishable distributions
}

TEST_CASE("uniform-confidence posteriors force IS to 1") {
  ProxyClassifier proxy = tiny_proxy(11);
  proxy.params.get("proxy.head.w").vec().setZero();
  proxy.params.get("proxy.head.b").vec().setZero();
  std::vector<dsp::MelSpec> set;
  for (int i = 0; i < 10; ++i) set.push_back(random_mel(400 + static_cast<std::uint64_t>(i)));
  CHECK(inception_score(set, proxy) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("single-spectrogram set has IS 1 (posterior equals marginal)") {
  const ProxyClassifier proxy = tiny_proxy(13);
  const std::vector<dsp::MelSpec> one{random_mel(55)};
  CHECK(inception_score(one, proxy) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("IS stays within [1, K]") {
  const ProxyClassifier proxy = tiny_proxy(17);
  std::vector<dsp::MelSpec> set;
  for (int i = 0; i < 16; ++i) set.push_back(random_mel(600 + static_cast<std::uint64_t>(i), 0.2 * (i % 4)));
  const double is = inception_score(set, proxy);
  CHECK(is >= 1.0 - 1e-9);
  CHECK(is <= 8.0 + 1e-9);
}

TEST_CASE("identity codec reconstruction report is (0, 0, 0)") {
  const synthav::AvFormat fmt;
  const codec::Codec id = codec::Codec::identity(fmt, 2);
  const ProxyClassifier proxy = tiny_proxy(19);
  std::vector<dsp::MelSpec> set;
  for (int i = 0; i < 8; ++i) set.push_back(random_mel(700 + static_cast<std::uint64_t>(i)));
  const CodecReport report = codec_reconstruction_report(id, set, proxy);
  CHECK(report.fid <= 1e-6);
  CHECK(report.kl <= 1e-12);
  CHECK(report.mse == 0.0);
}

TEST_CASE("align accuracy refuses empty input and untrained classifiers") {
  const synthav::AvFormat fmt;
  const codec::Codec id = codec::Codec::identity(fmt, 2);
  const cavp::CavpModel cavp_model = cavp::CavpModel::init(cavp::CavpArch{}, fmt, 2);
  guidance::ClassifierArch arch;
  arch.base_channels = 8;
  arch.cond_input = 64;
  arch.cond_width = 16;
  arch.temb_dim = 16;
  guidance::AlignClassifier clf = guidance::AlignClassifier::init(arch, false, 4);

  CHECK_THROWS_WITH_AS(align_accuracy({}, clf, id, cavp_model), doctest::Contains("empty"), ConfigError);

  Rng rng(5);
  const synthav::AVSample s = synthav::generate_sample(8, 10.0, rng);
  const auto [mel, clip] = synthav::clip_pair(s, 0.0, 8.0, synthav::Stage::ldm, fmt);
  CHECK_THROWS_WITH_AS(align_accuracy({{mel, clip}}, clf, id, cavp_model), doctest::Contains("untrained"),
                       ConfigError);

  clf.test_accuracy = 0.9;  // marked trained: scoring now proceeds
  const double acc = align_accuracy({{mel, clip}}, clf, id, cavp_model);
  CHECK(acc >= 0.0);
  CHECK(acc <= 1.0);
}

TEST_CASE("mkl demands paired sets") {
  const ProxyClassifier proxy = tiny_proxy(23);
  std::vector<dsp::MelSpec> a{random_mel(1)}, b{random_mel(2), random_mel(3)};
  CHECK_THROWS_AS(mkl_score(a, b, proxy), ConfigError);
}

TEST_CASE("proxy training is deterministic and learns the tiny dataset") {
  synthav::GenConfig gen;
  gen.root = std::filesystem::temp_directory_path() / "foley_test_metrics_ds";
  gen.train_samples = 16;
  gen.test_samples = 8;
  gen.seed = 21;
  std::filesystem::remove_all(gen.root);
  synthav::build_dataset(gen);
  const auto manifest = synthav::load_manifest(gen.root / "manifest.json");

  ProxyTrainConfig cfg;
  cfg.steps = 3;
  cfg.batch = 2;
  cfg.seed = 5;
  const auto r1 = train_proxy(manifest, cfg);
  const auto r2 = train_proxy(manifest, cfg);
  for (size_t i = 0; i < r1.proxy.params.items.size(); ++i)
    CHECK(bit_equal(r1.proxy.params.items[i].second, r2.proxy.params.items[i].second));
}

TEST_CASE("proxy checkpoints round trip") {
  ProxyClassifier proxy = tiny_proxy(29);
  proxy.test_accuracy = 0.97;
  const auto dir = std::filesystem::temp_directory_path() / "foley_test_proxy_ckpt";
  std::filesystem::remove_all(dir);
  proxy.save(dir);
  const ProxyClassifier back = ProxyClassifier::from_checkpoint(dir);
  CHECK(back.test_accuracy == 0.97);
  for (size_t i = 0; i < proxy.params.items.size(); ++i)
    CHECK(bit_equal(back.params.items[i].second, proxy.params.items[i].second));
}
