#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "foley/guidance.hpp"

using namespace foley;
using namespace foley::guidance;

namespace {

ClassifierArch tiny_arch() {
  ClassifierArch a;
  a.base_channels = 8;
  a.cond_input = 16;
  a.cond_width = 16;
  a.temb_dim = 16;
  return a;
}

MatrixXd random_cond(std::int64_t rows, std::int64_t cols, std::uint64_t seed) {
  Rng rng(seed);
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("cfg identities: omega 1 and 0 return the inputs bit-exactly") {
  Rng rng(2);
  const Tensor c = rng.normal_tensor({4, 8, 8});
  const Tensor u = rng.normal_tensor({4, 8, 8});
  CHECK(bit_equal(cfg_noise(c, u, 1.0), c));
  CHECK(bit_equal(cfg_noise(c, u, 0.0), u));
}

TEST_CASE("cfg arithmetic at the reference scale omega=4.5") {
  Tensor c = Tensor::full({1}, 2.0);
  Tensor u = Tensor::full({1}, 1.0);
  CHECK(cfg_noise(c, u, 4.5).flat(0) == doctest::Approx(5.5).epsilon(1e-15));
}

TEST_CASE("cfg rejects shape mismatches") {
  Rng rng(3);
  CHECK_THROWS_AS(cfg_noise(rng.normal_tensor({2, 2}), rng.normal_tensor({2, 3}), 2.0), ConfigError);
}

TEST_CASE("double guidance reduces to cfg bit-exactly when gamma=0 or the gradient vanishes") {
  Rng rng(4);
  const Tensor c = rng.normal_tensor({4, 8, 8});
  const Tensor u = rng.normal_tensor({4, 8, 8});
  const Tensor g = rng.normal_tensor({4, 8, 8});
  const Tensor zero = Tensor::zeros({4, 8, 8});
  const double ab = 0.37;
  for (double omega : {0.0, 1.0, 4.5}) {
    CHECK(bit_equal(double_guidance_noise(c, u, g, omega, 0.0, ab), cfg_noise(c, u, omega)));
    for (double gamma : {1.0, 50.0})
      CHECK(bit_equal(double_guidance_noise(c, u, zero, omega, gamma, ab), cfg_noise(c, u, omega)));
  }
  // omega=1, gamma=0 is the pure conditional estimate
  CHECK(bit_equal(double_guidance_noise(c, u, zero, 1.0, 0.0, ab), c));
}

TEST_CASE("double guidance is affine with the printed coefficients") {
  Rng rng(5);
  const Tensor c = rng.normal_tensor({8});
  const Tensor u = rng.normal_tensor({8});
  const Tensor g = rng.normal_tensor({8});
  const double omega = 4.5, gamma = 50.0, ab = 0.6;
  const Tensor out = double_guidance_noise(c, u, g, omega, gamma, ab);
  for (int i = 0; i < 8; ++i) {
    const double expect = omega * c.flat(i) + (1.0 - omega) * u.flat(i) -
                          gamma * std::sqrt(1.0 - ab) * g.flat(i);
    CHECK(out.flat(i) == doctest::Approx(expect).epsilon(1e-14));
  }
}

TEST_CASE("alignment probability lies strictly inside (0,1)") {
  const AlignClassifier m = AlignClassifier::init(tiny_arch(), true, 3);
  Rng rng(6);
  const Tensor z = rng.normal_tensor({4, 16, 8});
  const double p = m.prob(z, 3, random_cond(8, 16, 7));
  CHECK(p > 0.0);
  CHECK(p < 1.0);
}

TEST_CASE("align_grad matches central finite differences within 1e-3") {
  const AlignClassifier m = AlignClassifier::init(tiny_arch(), true, 11);
  Rng rng(12);
  const Tensor z = rng.normal_tensor({4, 8, 4});
  const MatrixXd cond = random_cond(4, 16, 13);
  const int t = 2;
  const Tensor g = align_grad(z, t, cond, m);

  const double h = 1e-5;
  Rng pick(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto i = pick.uniform_int(0, z.size() - 1);
    Tensor zp = z, zm = z;
    zp.flat(i) += h;
    zm.flat(i) -= h;
    const double fp = std::log(m.prob(zp, t, cond));
    const double fm = std::log(m.prob(zm, t, cond));
    const double fd = (fp - fm) / (2 * h);
    CHECK(std::abs(fd - g.flat(i)) / std::max(1e-6, std::abs(fd)) <= 1e-3);
  }
}

TEST_CASE("zeroed head gives a constant classifier with zero input gradient") {
  AlignClassifier m = AlignClassifier::init(tiny_arch(), true, 21);
  m.params.get("clf.head.w").vec().setZero();
  m.params.get("clf.head.b").vec().setZero();
  Rng rng(22);
  const Tensor z = rng.normal_tensor({4, 8, 4});
  const MatrixXd cond = random_cond(4, 16, 23);
  CHECK(m.prob(z, 1, cond) == doctest::Approx(0.5));
  const Tensor g = align_grad(z, 1, cond, m);
  CHECK(g.vec().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("adding a constant to the log-probability leaves the gradient unchanged") {
  const AlignClassifier m = AlignClassifier::init(tiny_arch(), true, 31);
  Rng rng(32);
  const Tensor z = rng.normal_tensor({4, 8, 4});
  const MatrixXd cond = random_cond(4, 16, 33);

  // gradient of logp and of (logp + const) through the same tape
  auto grad_of = [&](double offset) {
    ad::Tape tape;
    nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(m.params), false};
    ad::Var zv = tape.input(z, true);
    Tensor c({cond.rows(), cond.cols()});
    c.mat() = cond;
    ad::Var logit = m.logit_var(ctx, zv, 1, tape.input(std::move(c)));
    ad::Var logp = ad::scale(ad::softplus(ad::scale(logit, -1.0)), -1.0);
    tape.backward(ad::sum(ad::add_scalar(logp, offset)));
    return zv.grad();
  };
  CHECK(bit_equal(grad_of(0.0), grad_of(5.0)));
}

TEST_CASE("pair kinds are drawn 50/25/25 within 3 points over 1000 draws") {
  Rng rng(77);
  int counts[3] = {0, 0, 0};
  const int n = 1000;
  for (int i = 0; i < n; ++i) counts[static_cast<int>(sample_pair_kind(rng))]++;
  CHECK(std::abs(counts[0] / double(n) - 0.50) <= 0.03);
  CHECK(std::abs(counts[1] / double(n) - 0.25) <= 0.03);
  CHECK(std::abs(counts[2] / double(n) - 0.25) <= 0.03);
}

TEST_CASE("constructed pairs label true pairs 1 and shifted copies 0") {
  synthav::GenConfig gen;
  gen.root = std::filesystem::temp_directory_path() / "foley_test_guidance_ds";
  gen.train_samples = 4;
  gen.test_samples = 0;
  gen.seed = 31;
  std::filesystem::remove_all(gen.root);
  synthav::build_dataset(gen);
  const auto manifest = synthav::load_manifest(gen.root / "manifest.json");
  std::vector<synthav::AVSample> samples;
  for (const auto* r : manifest.split_records("train"))
    samples.push_back(synthav::load_sample(manifest, *r));

  const auto& fmt = manifest.config.format;
  cavp::CavpModel cavp_model = cavp::CavpModel::init(cavp::CavpArch{}, fmt, 5);
  const codec::Codec id = codec::Codec::identity(fmt, 2);

  Rng rng(8);
  int seen_true = 0, seen_shift = 0;
  for (int i = 0; i < 40 && (seen_true < 2 || seen_shift < 2); ++i) {
    const AlignPair p = make_align_pair(samples, fmt, cavp_model, id, 8.0, rng);
    if (p.kind == PairKind::true_pair) {
      CHECK(p.label == 1);
      ++seen_true;
    } else {
      CHECK(p.label == 0);
      if (p.kind == PairKind::temporal_shift) ++seen_shift;
    }
  }
  CHECK(seen_true >= 2);
  CHECK(seen_shift >= 2);
}

TEST_CASE("classifier training is deterministic") {
  synthav::GenConfig gen;
  gen.root = std::filesystem::temp_directory_path() / "foley_test_guidance_ds2";
  gen.train_samples = 4;
  gen.test_samples = 2;
  gen.seed = 17;
  std::filesystem::remove_all(gen.root);
  synthav::build_dataset(gen);
  const auto manifest = synthav::load_manifest(gen.root / "manifest.json");
  const auto& fmt = manifest.config.format;
  const cavp::CavpModel cavp_model = cavp::CavpModel::init(cavp::CavpArch{}, fmt, 5);
  const codec::Codec id = codec::Codec::identity(fmt, 2);
  const auto sched = diffusion::make_schedule(diffusion::ScheduleKind::linear_beta, 20, 1e-3, 2e-2);

  AlignTrainConfig cfg;
  cfg.arch = tiny_arch();
  cfg.arch.cond_input = 64;
  cfg.arch.latent_channels = 4;
  cfg.steps = 3;
  cfg.batch = 2;
  cfg.eval_pairs = 8;
  cfg.seed = 9;
  const auto r1 = train_align_classifier(manifest, cavp_model, id, sched, true, cfg);
  const auto r2 = train_align_classifier(manifest, cavp_model, id, sched, true, cfg);
  for (size_t i = 0; i < r1.classifier.params.items.size(); ++i)
    CHECK(bit_equal(r1.classifier.params.items[i].second, r2.classifier.params.items[i].second));
  CHECK(r1.test_accuracy == r2.test_accuracy);
}

TEST_CASE("classifier checkpoints round trip") {
  AlignClassifier m = AlignClassifier::init(tiny_arch(), false, 41);
  m.test_accuracy = 0.93;
  const auto dir = std::filesystem::temp_directory_path() / "foley_test_align_ckpt";
  std::filesystem::remove_all(dir);
  m.save(dir);
  const AlignClassifier back = AlignClassifier::from_checkpoint(dir);
  CHECK(back.noisy == false);
  CHECK(back.test_accuracy == 0.93);
  for (size_t i = 0; i < m.params.items.size(); ++i)
    CHECK(bit_equal(back.params.items[i].second, m.params.items[i].second));
}

TEST_CASE("guidance mode names parse and reject unknowns") {
  CHECK(parse_guidance_mode("none") == GuidanceMode::none);
  CHECK(parse_guidance_mode("cfg") == GuidanceMode::cfg);
  CHECK(parse_guidance_mode("cg") == GuidanceMode::cg);
  CHECK(parse_guidance_mode("double") == GuidanceMode::double_guidance);
  CHECK_THROWS_AS(parse_guidance_mode("triple"), ConfigError);
}
