#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "foley/cavp.hpp"

using namespace foley;
using namespace foley::cavp;

namespace {

std::vector<PooledEmbedding> random_embeddings(int n, int dim, Rng& rng) {
  std::vector<PooledEmbedding> out;
  for (int i = 0; i < n; ++i) {
    VectorXd v(dim);
    for (int d = 0; d < dim; ++d) v(d) = rng.normal();
    out.push_back(v);
  }
  return out;
}

// Brute-force transcription of the printed two-direction objective, kept free
// of any shared code with the implementation.
double brute_force_loss(const std::vector<PooledEmbedding>& a, const std::vector<PooledEmbedding>& v,
                        double tau) {
  const int n = static_cast<int>(a.size());
  auto cos_sim = [](const VectorXd& x, const VectorXd& y) { return x.dot(y) / (x.norm() * y.norm()); };
  double total = 0;
  for (int i = 0; i < n; ++i) {
    double denom_row = 0, denom_col = 0;
    for (int k = 0; k < n; ++k) {
      denom_row += std::exp(cos_sim(a[static_cast<size_t>(i)], v[static_cast<size_t>(k)]) / tau);
      denom_col += std::exp(cos_sim(a[static_cast<size_t>(k)], v[static_cast<size_t>(i)]) / tau);
    }
    const double pos = std::exp(cos_sim(a[static_cast<size_t>(i)], v[static_cast<size_t>(i)]) / tau);
    total += -0.5 * std::log(pos / denom_row) - 0.5 * std::log(pos / denom_col);
  }
  return total / n;
}

synthav::AVSample make_sample(std::uint64_t seed) {
  Rng rng(seed);
  return synthav::generate_sample(8, 10.0, rng);
}

}  // namespace

TEST_CASE("contrast loss matches the brute-force objective within 1e-10 relative") {
  Rng rng(31);
  for (int n : {2, 3, 5, 8}) {
    for (double tau : {1.0, 0.3, 0.07}) {
      const auto a = random_embeddings(n, 16, rng);
      const auto v = random_embeddings(n, 16, rng);
      const double impl = semantic_contrast_loss(a, v, tau);
      const double oracle = brute_force_loss(a, v, tau);
      CHECK(std::abs(impl - oracle) <= 1e-10 * std::max(1.0, std::abs(oracle)));
    }
  }
}

TEST_CASE("single-pair batch has zero loss") {
  Rng rng(5);
  const auto a = random_embeddings(1, 8, rng);
  const auto v = random_embeddings(1, 8, rng);
  CHECK(semantic_contrast_loss(a, v, 0.07) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("orthogonal unit pairs at tau=1 give log(1+exp(-1))") {
  VectorXd u = VectorXd::Zero(4), w = VectorXd::Zero(4);
  u(0) = 1.0;
  w(1) = 1.0;
  const std::vector<PooledEmbedding> a{u, w}, v{u, w};
  const double expect = std::log(1.0 + std::exp(-1.0));  // 0.31326168751822286
  CHECK(semantic_contrast_loss(a, v, 1.0) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("loss decreases toward zero as tau shrinks when positives dominate") {
  VectorXd u = VectorXd::Zero(4), w = VectorXd::Zero(4);
  u(0) = 1.0;
  w(1) = 1.0;
  const std::vector<PooledEmbedding> a{u, w}, v{u, w};
  const double l1 = semantic_contrast_loss(a, v, 1.0);
  const double l2 = semantic_contrast_loss(a, v, 0.5);
  const double l3 = semantic_contrast_loss(a, v, 0.1);
  CHECK(l2 < l1);
  CHECK(l3 < l2);
  CHECK(l3 < 1e-4);
}

TEST_CASE("semantic and temporal objectives share one formula") {
  Rng rng(9);
  const auto a = random_embeddings(4, 12, rng);
  const auto v = random_embeddings(4, 12, rng);
  CHECK(semantic_contrast_loss(a, v, 0.07) == temporal_contrast_loss(a, v, 0.07));
}

TEST_CASE("total loss composes semantic + lambda * temporal") {
  Rng rng(13);
  CavpBatch batch;
  batch.semantic_audio = random_embeddings(4, 8, rng);
  batch.semantic_video = random_embeddings(4, 8, rng);
  batch.temporal_audio = {random_embeddings(3, 8, rng), random_embeddings(3, 8, rng)};
  batch.temporal_video = {random_embeddings(3, 8, rng), random_embeddings(3, 8, rng)};
  batch.tau = 0.2;

  batch.lambda_temporal = 0.0;
  CHECK(cavp_total_loss(batch) ==
        doctest::Approx(semantic_contrast_loss(batch.semantic_audio, batch.semantic_video, 0.2)));

  batch.lambda_temporal = 2.0;
  const double ls = semantic_contrast_loss(batch.semantic_audio, batch.semantic_video, 0.2);
  const double lt0 = temporal_contrast_loss(batch.temporal_audio[0], batch.temporal_video[0], 0.2);
  const double lt1 = temporal_contrast_loss(batch.temporal_audio[1], batch.temporal_video[1], 0.2);
  CHECK(cavp_total_loss(batch) == doctest::Approx(ls + 2.0 * 0.5 * (lt0 + lt1)).epsilon(1e-12));
}

TEST_CASE("modality symmetry holds exactly") {
  Rng rng(17);
  const auto a = random_embeddings(6, 10, rng);
  const auto v = random_embeddings(6, 10, rng);
  CHECK(semantic_contrast_loss(a, v, 0.07) == semantic_contrast_loss(v, a, 0.07));
}

TEST_CASE("joint permutation invariance holds exactly") {
  Rng rng(19);
  const auto a = random_embeddings(7, 10, rng);
  const auto v = random_embeddings(7, 10, rng);
  std::vector<size_t> perm{3, 0, 6, 2, 5, 1, 4};
  std::vector<PooledEmbedding> pa, pv;
  for (size_t i : perm) {
    pa.push_back(a[i]);
    pv.push_back(v[i]);
  }
  CHECK(semantic_contrast_loss(a, v, 0.07) == semantic_contrast_loss(pa, pv, 0.07));
}

TEST_CASE("positive rescaling of embeddings leaves the loss unchanged") {
  Rng rng(23);
  auto a = random_embeddings(5, 10, rng);
  const auto v = random_embeddings(5, 10, rng);
  const double before = semantic_contrast_loss(a, v, 0.07);
  a[2] *= 37.5;
  CHECK(semantic_contrast_loss(a, v, 0.07) == doctest::Approx(before).epsilon(1e-12));
}

TEST_CASE("loss is non-negative") {
  Rng rng(29);
  for (int trial = 0; trial < 10; ++trial) {
    const auto a = random_embeddings(4, 6, rng);
    const auto v = random_embeddings(4, 6, rng);
    CHECK(semantic_contrast_loss(a, v, 0.07) >= 0.0);
  }
}

TEST_CASE("zero-norm embeddings trip the numeric guard") {
  Rng rng(33);
  auto a = random_embeddings(3, 6, rng);
  const auto v = random_embeddings(3, 6, rng);
  a[1].setZero();
  CHECK_THROWS_WITH_AS(semantic_contrast_loss(a, v, 0.07), doctest::Contains("zero norm"), ConfigError);
}

TEST_CASE("loss gradient matches central finite differences within 1e-4") {
  Rng rng(41);
  const int n = 3, dim = 5;
  Tensor a0 = nn::normal_init({n, dim}, 1.0, rng);
  Tensor v0 = nn::normal_init({n, dim}, 1.0, rng);
  const double tau = 0.3;

  auto loss_var = [&](ad::Tape& tape, const Tensor& at, const Tensor& vt, bool grad) {
    ad::Var a = tape.input(at, grad);
    ad::Var v = tape.input(vt, false);
    ad::Var an = ad::normalize_rows(a), vn = ad::normalize_rows(v);
    ad::Var sim = ad::scale(ad::matmul(an, ad::transpose(vn)), 1.0 / tau);
    ad::Var per = ad::sub(
        ad::scale(ad::add(ad::logsumexp_rows(sim), ad::logsumexp_rows(ad::transpose(sim))), 0.5),
        ad::diag(sim));
    return std::pair{a, ad::mean(per)};
  };

  ad::Tape tape;
  auto [av, loss] = loss_var(tape, a0, v0, true);
  tape.backward(loss);
  const Tensor g = av.grad();

  std::vector<PooledEmbedding> alist, vlist;
  for (int i = 0; i < n; ++i) {
    alist.push_back(a0.mat().row(i).transpose());
    vlist.push_back(v0.mat().row(i).transpose());
  }
  CHECK(loss.value().flat(0) == doctest::Approx(semantic_contrast_loss(alist, vlist, tau)).epsilon(1e-12));

  const double h = 1e-6;
  for (std::int64_t i = 0; i < a0.size(); ++i) {
    Tensor ap = a0, am = a0;
    ap.flat(i) += h;
    am.flat(i) -= h;
    ad::Tape tp, tm;
    const double fp = loss_var(tp, ap, v0, false).second.value().flat(0);
    const double fm = loss_var(tm, am, v0, false).second.value().flat(0);
    const double fd = (fp - fm) / (2 * h);
    const double denom = std::max(1e-6, std::abs(fd));
    CHECK(std::abs(fd - g.flat(i)) / denom <= 1e-4);
  }
}

TEST_CASE("temporal max-pooling behaves like a coordinate-wise max") {
  EmbeddingSeq e;
  e.values.resize(3, 4);
  e.values << 1, 5, 2, 0, 4, 1, 2, 9, 2, 2, 2, 1;
  const PooledEmbedding p = temporal_pool(e);
  CHECK(p(0) == 4.0);
  CHECK(p(1) == 5.0);
  CHECK(p(2) == 2.0);
  CHECK(p(3) == 9.0);
  for (Eigen::Index r = 0; r < e.values.rows(); ++r)
    for (Eigen::Index c = 0; c < e.values.cols(); ++c) CHECK(p(c) >= e.values(r, c));

  EmbeddingSeq cst;
  cst.values = MatrixXd::Constant(5, 4, 0.7);
  CHECK((temporal_pool(cst).array() == 0.7).all());

  EmbeddingSeq perm;
  perm.values.resize(3, 4);
  perm.values << e.values.row(2), e.values.row(0), e.values.row(1);
  CHECK(temporal_pool(perm) == p);
}

TEST_CASE("encoders are deterministic with desk shapes T=16, C=64") {
  const synthav::AvFormat fmt;
  const CavpModel model = CavpModel::init(CavpArch{}, fmt, 123);
  const synthav::AVSample s = make_sample(55);
  const auto [mel, clip] = synthav::clip_pair(s, 1.0, 4.0, synthav::Stage::pretrain, fmt);

  const EmbeddingSeq ea1 = encode_audio(mel, model);
  const EmbeddingSeq ea2 = encode_audio(mel, model);
  CHECK(ea1.values == ea2.values);
  const EmbeddingSeq ev1 = encode_video(clip, model);
  const EmbeddingSeq ev2 = encode_video(clip, model);
  CHECK(ev1.values == ev2.values);

  CHECK(ea1.values.rows() == 16);
  CHECK(ea1.values.cols() == 64);
  CHECK(ev1.values.rows() == 16);
  CHECK(ev1.values.cols() == 64);
}

TEST_CASE("encoder rejects misaligned spectrogram shapes") {
  const synthav::AvFormat fmt;
  const CavpModel model = CavpModel::init(CavpArch{}, fmt, 9);
  dsp::MelSpec mel;
  mel.values = MatrixXd::Zero(250, 32);  // not a multiple of the stride 16
  mel.mel_basis = 32;
  mel.fft_size = 256;
  mel.hop_size = 125;
  mel.sample_rate = 8000;
  CHECK_THROWS_WITH_AS(encode_audio(mel, model), doctest::Contains("multiple of the encoder stride"),
                       ConfigError);
}

TEST_CASE("training is deterministic and zero steps keep the initialization") {
  synthav::GenConfig gen;
  gen.root = std::filesystem::temp_directory_path() / "foley_test_cavp_ds";
  gen.train_samples = 6;
  gen.test_samples = 2;
  gen.seed = 3;
  std::filesystem::remove_all(gen.root);
  synthav::build_dataset(gen);
  const auto manifest = synthav::load_manifest(gen.root / "manifest.json");

  CavpTrainConfig cfg;
  cfg.steps = 0;
  cfg.seed = 77;
  const auto init_only = train_cavp(manifest, cfg);
  const CavpModel fresh = CavpModel::init(cfg.arch, manifest.config.format, cfg.seed);
  REQUIRE(init_only.model.params.items.size() == fresh.params.items.size());
  for (size_t i = 0; i < fresh.params.items.size(); ++i)
    CHECK(bit_equal(init_only.model.params.items[i].second, fresh.params.items[i].second));

  cfg.steps = 4;
  cfg.contrast.batch_videos = 3;
  const auto run1 = train_cavp(manifest, cfg);
  const auto run2 = train_cavp(manifest, cfg);
  for (size_t i = 0; i < run1.model.params.items.size(); ++i)
    CHECK(bit_equal(run1.model.params.items[i].second, run2.model.params.items[i].second));
  CHECK(run1.log.size() == 4);
}

TEST_CASE("checkpoints round trip through disk") {
  const synthav::AvFormat fmt;
  const CavpModel model = CavpModel::init(CavpArch{}, fmt, 21);
  const auto dir = std::filesystem::temp_directory_path() / "foley_test_cavp_ckpt";
  std::filesystem::remove_all(dir);
  model.save(dir, {{"step", 0}});
  const CavpModel back = CavpModel::from_checkpoint(dir);
  REQUIRE(back.params.items.size() == model.params.items.size());
  for (size_t i = 0; i < model.params.items.size(); ++i)
    CHECK(bit_equal(back.params.items[i].second, model.params.items[i].second));
  CHECK(back.arch.embed_dim == model.arch.embed_dim);
}
