#include "foley/guidance.hpp"

#include <cmath>

#include "foley/checkpoint.hpp"

namespace foley::guidance {

using nlohmann::json;

GuidanceMode parse_guidance_mode(const std::string& name) {
  if (name == "none") return GuidanceMode::none;
  if (name == "cfg") return GuidanceMode::cfg;
  if (name == "cg") return GuidanceMode::cg;
  if (name == "double") return GuidanceMode::double_guidance;
  throw ConfigError(msg("unknown guidance mode '", name, "' (expected none|cfg|cg|double)"));
}

std::string guidance_mode_name(GuidanceMode mode) {
  switch (mode) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::cfg: return "cfg";
    case GuidanceMode::cg: return "cg";
    case GuidanceMode::double_guidance: return "double";
  }
  return "?";
}

Latent cfg_noise(const Latent& eps_cond, const Latent& eps_uncond, double omega) {
  check_same_shape(eps_cond, eps_uncond, "cfg_noise");
  if (omega == 1.0) return eps_cond;
  if (omega == 0.0) return eps_uncond;
  return omega * eps_cond + (1.0 - omega) * eps_uncond;
}

Latent double_guidance_noise(const Latent& eps_cond, const Latent& eps_uncond, const Latent& grad,
                             double omega, double gamma, double alpha_bar_t) {
  check_same_shape(eps_cond, grad, "double_guidance_noise");
  check_config(alpha_bar_t > 0 && alpha_bar_t < 1, "double_guidance_noise: alpha_bar_t must be in (0,1)");
  Latent out = cfg_noise(eps_cond, eps_uncond, omega);
  if (gamma == 0.0) return out;
  out.vec() -= gamma * std::sqrt(1.0 - alpha_bar_t) * grad.vec();
  return out;
}

namespace {

void build_layers(AlignClassifier& m, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "align/init");
  auto& s = m.params;
  const int c = m.arch.base_channels;
  m.cond_mlp1 = nn::Linear(s, rng, "cond.mlp1", m.arch.cond_input, m.arch.cond_width);
  m.cond_mlp2 = nn::Linear(s, rng, "cond.mlp2", m.arch.cond_width, m.arch.cond_width);
  m.temb1 = nn::Linear(s, rng, "clf.temb1", m.arch.temb_dim, m.arch.temb_dim);
  m.temb2 = nn::Linear(s, rng, "clf.temb2", m.arch.temb_dim, m.arch.temb_dim);
  m.conv_in = nn::Conv2d(s, rng, "clf.in", m.arch.latent_channels, c, 3, 1, 1, 1);
  m.block1 = nn::ResBlock2d(s, rng, "clf.b1", c, c, m.arch.temb_dim);
  m.down1 = nn::Conv2d(s, rng, "clf.down1", c, 2 * c, 3, 2, 2, 1);
  m.block2 = nn::ResBlock2d(s, rng, "clf.b2", 2 * c, 2 * c, m.arch.temb_dim);
  m.attn_ln = nn::LayerNorm(s, "clf.attn_ln", 2 * c);
  m.wq = nn::Linear(s, rng, "clf.q", 2 * c, 2 * c, false);
  m.wk = nn::Linear(s, rng, "clf.k", m.arch.cond_width, 2 * c, false);
  m.wv = nn::Linear(s, rng, "clf.v", m.arch.cond_width, 2 * c, false);
  m.fuse = nn::Linear(s, rng, "clf.fuse", 6 * c, 2 * c);
  m.head = nn::Linear(s, rng, "clf.head", 2 * c, 1);
}

// Per-token feature concat along the channel axis via a (C, N, 1) detour.
ad::Var concat_features(ad::Var a, ad::Var b) {
  const std::int64_t n = a.value().dim(0), ca = a.value().dim(1), cb = b.value().dim(1);
  ad::Var at = ad::reshape(ad::transpose(a), {ca, n, 1});
  ad::Var bt = ad::reshape(ad::transpose(b), {cb, n, 1});
  ad::Var cat = ad::concat_channels(at, bt);
  return ad::transpose(ad::reshape(cat, {ca + cb, n}));
}

ad::Var project_cond(const AlignClassifier& m, nn::Ctx& ctx, ad::Var cond_raw) {
  ad::Var pe = ctx.tape.input(nn::positional_encoding(cond_raw.value().dim(0), m.arch.cond_input));
  return m.cond_mlp2(ctx, ad::silu(m.cond_mlp1(ctx, ad::add(cond_raw, pe))));
}

}  // namespace

AlignClassifier AlignClassifier::init(const ClassifierArch& arch, bool noisy, std::uint64_t seed) {
  AlignClassifier m;
  m.arch = arch;
  m.noisy = noisy;
  build_layers(m, seed);
  return m;
}

AlignClassifier AlignClassifier::from_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  check_runtime(ckpt.meta.value("model", "") == "align",
                msg("checkpoint at ", dir.string(), " is not an alignment-classifier checkpoint"));
  AlignClassifier m;
  const auto& a = ckpt.meta.at("arch");
  m.arch.latent_channels = a.at("latent_channels").get<int>();
  m.arch.base_channels = a.at("base_channels").get<int>();
  m.arch.cond_input = a.at("cond_input").get<int>();
  m.arch.cond_width = a.at("cond_width").get<int>();
  m.arch.temb_dim = a.at("temb_dim").get<int>();
  m.noisy = ckpt.meta.at("noisy").get<bool>();
  m.test_accuracy = ckpt.meta.value("test_accuracy", -1.0);
  m.params = std::move(ckpt.params);
  const size_t loaded = m.params.items.size();
  build_layers(m, 0);
  check_params_match(m.params, loaded, dir);
  return m;
}

void AlignClassifier::save(const std::filesystem::path& dir, const json& extra) const {
  json meta = extra;
  meta["model"] = "align";
  meta["noisy"] = noisy;
  meta["test_accuracy"] = test_accuracy;
  meta["arch"] = {{"latent_channels", arch.latent_channels},
                  {"base_channels", arch.base_channels},
                  {"cond_input", arch.cond_input},
                  {"cond_width", arch.cond_width},
                  {"temb_dim", arch.temb_dim}};
  save_checkpoint(dir, params, meta);
}

ad::Var AlignClassifier::logit_var(nn::Ctx& ctx, ad::Var z, int t, ad::Var cond_raw) const {
  check_config(z.value().ndim() == 3 && z.value().dim(0) == arch.latent_channels,
               msg("align classifier: latent shape ", shape_str(z.value().shape()),
                   " does not match configured C'=", arch.latent_channels));
  const std::int64_t c2 = 2 * arch.base_channels;
  ad::Var cond = project_cond(*this, ctx, cond_raw);
  ad::Var temb = ctx.tape.input(
      nn::timestep_embedding(static_cast<double>(t), arch.temb_dim).reshaped({1, arch.temb_dim}));
  temb = ad::reshape(temb2(ctx, ad::silu(temb1(ctx, temb))), {arch.temb_dim});

  ad::Var h = block1(ctx, conv_in(ctx, z), temb);
  h = block2(ctx, down1(ctx, h), temb);
  const Shape s = h.value().shape();
  ad::Var tokens = ad::transpose(ad::reshape(h, {s[0], s[1] * s[2]}));  // (N, 2c)

  // Attend into the condition, then score agreement between each token and
  // what the video predicts there; the product term carries the match signal.
  ad::Var q = wq(ctx, ad::add(attn_ln(ctx, tokens),
                              ctx.tape.input(nn::positional_encoding(tokens.value().dim(0), c2))));
  ad::Var k = wk(ctx, cond);
  ad::Var v = wv(ctx, cond);
  ad::Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(c2)));
  scores = ad::add(scores, ctx.tape.input(nn::temporal_locality_bias(s[1], s[2], cond.value().dim(0), 256.0)));
  ad::Var att = ad::matmul(ad::softmax_rows(scores), v);                // (N, 2c)
  ad::Var fused = concat_features(concat_features(tokens, att), ad::mul(tokens, att));
  ad::Var per_token = ad::silu(fuse(ctx, fused));                       // (N, 2c)
  ad::Var pooled = ad::mean_over_rows(per_token);                       // (2c)
  return head(ctx, ad::reshape(pooled, {1, c2}));                       // (1,1) logit
}

double AlignClassifier::prob(const Latent& z, int t, const MatrixXd& cond) const {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(params), /*trainable=*/false};
  Tensor c({cond.rows(), cond.cols()});
  c.mat() = cond;
  const double logit = logit_var(ctx, tape.input(z), t, tape.input(std::move(c))).value().flat(0);
  const double p = 1.0 / (1.0 + std::exp(-logit));
  return std::min(1.0 - 1e-12, std::max(1e-12, p));
}

Latent align_grad(const Latent& z_t, int t, const MatrixXd& cond, const AlignClassifier& classifier) {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(classifier.params), /*trainable=*/false};
  ad::Var z = tape.input(z_t, /*needs_grad=*/true);
  Tensor c({cond.rows(), cond.cols()});
  c.mat() = cond;
  ad::Var logit = classifier.logit_var(ctx, z, t, tape.input(std::move(c)));
  // log P(y=1) = -softplus(-logit)
  ad::Var logp = ad::scale(ad::softplus(ad::scale(logit, -1.0)), -1.0);
  tape.backward(ad::sum(logp));
  Latent g = z.grad();
  check_runtime(g.all_finite(), "align_grad: non-finite gradient");
  return g;
}

PairKind sample_pair_kind(Rng& rng) {
  const double u = rng.uniform();
  if (u < 0.5) return PairKind::true_pair;
  if (u < 0.75) return PairKind::temporal_shift;
  return PairKind::wrong_video;
}

AlignPair make_align_pair(const std::vector<synthav::AVSample>& samples, const synthav::AvFormat& fmt,
                          const cavp::CavpModel& cavp_model, const codec::Codec& codec, double clip_s,
                          Rng& rng) {
  check_config(samples.size() >= 2, "make_align_pair: need at least 2 samples");
  const auto clip_frames = static_cast<std::int64_t>(std::llround(clip_s * fmt.fps));
  const std::int64_t total = samples.front().video.frame_count();
  const std::int64_t spf = synthav::frames_per_video_frame(fmt, synthav::Stage::ldm);

  AlignPair pair;
  pair.kind = sample_pair_kind(rng);
  pair.label = pair.kind == PairKind::true_pair ? 1 : 0;

  const auto pick = [&]() {
    return static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1));
  };
  const size_t ia = pick();
  const std::int64_t max_f0 = std::max<std::int64_t>(
      0, std::min<std::int64_t>(total - clip_frames,
                                (static_cast<std::int64_t>(samples[ia].audio.samples.size()) -
                                 fmt.fft_size + fmt.hop_ldm) / (spf * fmt.hop_ldm) - clip_frames));
  const std::int64_t f0 = max_f0 > 0 ? rng.uniform_int(0, max_f0) : 0;
  dsp::MelSpec mel = synthav::mel_for_frames(samples[ia], f0, clip_frames, synthav::Stage::ldm, fmt);

  switch (pair.kind) {
    case PairKind::true_pair: {
      pair.cond = cavp::encode_video(synthav::video_crop(samples[ia].video, f0, clip_frames), cavp_model).values;
      break;
    }
    case PairKind::temporal_shift: {
      // circular shift of the audio rows by 25-75% of the clip, on the latent grid
      const std::int64_t rows = mel.values.rows();
      std::int64_t shift = static_cast<std::int64_t>(std::llround(rng.uniform(0.25, 0.75) * rows));
      shift -= shift % codec.arch.compress;
      shift = std::clamp<std::int64_t>(shift, codec.arch.compress, rows - codec.arch.compress);
      MatrixXd rolled(rows, mel.values.cols());
      rolled.topRows(rows - shift) = mel.values.bottomRows(rows - shift);
      rolled.bottomRows(shift) = mel.values.topRows(shift);
      mel.values = rolled;
      pair.cond = cavp::encode_video(synthav::video_crop(samples[ia].video, f0, clip_frames), cavp_model).values;
      break;
    }
    case PairKind::wrong_video: {
      size_t ib = pick();
      while (ib == ia) ib = pick();
      pair.cond = cavp::encode_video(synthav::video_crop(samples[ib].video, f0, clip_frames), cavp_model).values;
      break;
    }
  }
  pair.z0 = codec::encode(mel, codec);
  return pair;
}

AlignTrainResult train_align_classifier(const synthav::DatasetManifest& manifest,
                                        const cavp::CavpModel& cavp_model, const codec::Codec& codec,
                                        const diffusion::NoiseSchedule& sched, bool noisy,
                                        const AlignTrainConfig& config) {
  const auto& fmt = manifest.config.format;
  std::vector<synthav::AVSample> train, test;
  for (const auto* r : manifest.split_records("train")) train.push_back(synthav::load_sample(manifest, *r));
  for (const auto* r : manifest.split_records("test")) test.push_back(synthav::load_sample(manifest, *r));
  check_config(train.size() >= 2, "train_align_classifier: need at least 2 training samples");

  AlignTrainResult result{AlignClassifier::init(config.arch, noisy, config.seed), {}, 0.0};
  AlignClassifier& model = result.classifier;

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.warmup = config.warmup;
  opt.weight_decay = config.weight_decay;

  Rng rng = Rng::stream(config.seed, noisy ? "align/train-noisy" : "align/train-clean");
  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    nn::Ctx ctx{tape, model.params};
    ad::Var loss;
    for (int b = 0; b < config.batch; ++b) {
      AlignPair pair = make_align_pair(train, fmt, cavp_model, codec, config.clip_s, rng);
      int t = 0;
      Latent z = pair.z0;
      if (noisy) {
        t = static_cast<int>(rng.uniform_int(1, sched.timesteps));
        z = diffusion::forward_sample(pair.z0, t, rng.normal_tensor(pair.z0.shape()), sched);
      }
      Tensor c({pair.cond.rows(), pair.cond.cols()});
      c.mat() = pair.cond;
      ad::Var logit = model.logit_var(ctx, tape.input(std::move(z)), t, tape.input(std::move(c)));
      // BCE with logits: softplus(l) - y*l
      ad::Var l = ad::sub(ad::softplus(logit), ad::scale(logit, static_cast<double>(pair.label)));
      loss = loss.valid() ? ad::add(loss, ad::sum(l)) : ad::sum(l);
    }
    loss = ad::scale(loss, 1.0 / config.batch);
    const double loss_val = loss.value().flat(0);
    check_runtime(std::isfinite(loss_val), msg("train_align_classifier: non-finite loss at step ", step));
    tape.backward(loss);
    auto grads = nn::collect_grads(ctx);
    opt.step(model.params, grads);
    result.losses.push_back(loss_val);
  }

  // Held-out accuracy over a fixed constructed pair set.
  const auto& eval_samples = test.size() >= 2 ? test : train;
  Rng eval_rng = Rng::stream(config.seed, "align/eval");
  int correct = 0;
  for (int i = 0; i < config.eval_pairs; ++i) {
    AlignPair pair = make_align_pair(eval_samples, fmt, cavp_model, codec, config.clip_s, eval_rng);
    int t = 0;
    Latent z = pair.z0;
    if (noisy) {
      t = static_cast<int>(eval_rng.uniform_int(1, sched.timesteps));
      z = diffusion::forward_sample(pair.z0, t, eval_rng.normal_tensor(pair.z0.shape()), sched);
    }
    const double p = model.prob(z, t, pair.cond);
    if ((p >= 0.5) == (pair.label == 1)) ++correct;
  }
  result.test_accuracy = static_cast<double>(correct) / config.eval_pairs;
  model.test_accuracy = result.test_accuracy;
  return result;
}

}  // namespace foley::guidance
