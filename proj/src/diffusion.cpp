#include "foley/diffusion.hpp"

#include <cmath>
#include <fstream>

#include "foley/checkpoint.hpp"

namespace foley::diffusion {

using nlohmann::json;

void NoiseSchedule::validate() const {
  check_config(timesteps >= 1, "NoiseSchedule: timesteps must be >= 1");
  check_config(alpha.size() == static_cast<size_t>(timesteps) + 1 && alpha_bar.size() == alpha.size() &&
                   posterior_var.size() == alpha.size(),
               "NoiseSchedule: table sizes inconsistent");
  check_config(alpha_bar[0] == 1.0, "NoiseSchedule: alpha_bar[0] must be 1");
  double prod = 1.0;
  for (int t = 1; t <= timesteps; ++t) {
    const double a = alpha[static_cast<size_t>(t)];
    check_config(a > 0.0 && a < 1.0, msg("NoiseSchedule: alpha_", t, " outside (0,1)"));
    prod *= a;
    const double ab = alpha_bar[static_cast<size_t>(t)];
    check_config(std::abs(ab - prod) <= 1e-12 * prod, msg("NoiseSchedule: alpha_bar_", t, " != product"));
    check_config(ab < alpha_bar[static_cast<size_t>(t) - 1], "NoiseSchedule: alpha_bar must strictly decrease");
    const double expect = (1.0 - alpha_bar[static_cast<size_t>(t) - 1]) * (1.0 - a) / (1.0 - ab);
    check_config(std::abs(posterior_var[static_cast<size_t>(t)] - expect) <= 1e-12 + 1e-12 * expect,
                 msg("NoiseSchedule: posterior variance mismatch at t=", t));
  }
}

NoiseSchedule make_schedule(ScheduleKind kind, int timesteps, double beta_start, double beta_end) {
  check_config(kind == ScheduleKind::linear_beta, "make_schedule: unknown schedule kind");
  check_config(timesteps >= 1, "make_schedule: timesteps must be >= 1");
  check_config(beta_start > 0 && beta_start <= beta_end && beta_end < 1,
               msg("make_schedule: need 0 < beta_start <= beta_end < 1, got ", beta_start, ", ", beta_end));
  NoiseSchedule s;
  s.timesteps = timesteps;
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  s.alpha.assign(static_cast<size_t>(timesteps) + 1, 1.0);
  s.alpha_bar.assign(static_cast<size_t>(timesteps) + 1, 1.0);
  s.posterior_var.assign(static_cast<size_t>(timesteps) + 1, 0.0);
  for (int t = 1; t <= timesteps; ++t) {
    const double beta =
        timesteps == 1 ? beta_start
                       : beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / (timesteps - 1);
    s.alpha[static_cast<size_t>(t)] = 1.0 - beta;
    s.alpha_bar[static_cast<size_t>(t)] = s.alpha_bar[static_cast<size_t>(t) - 1] * (1.0 - beta);
    s.posterior_var[static_cast<size_t>(t)] = (1.0 - s.alpha_bar[static_cast<size_t>(t) - 1]) * beta /
                                              (1.0 - s.alpha_bar[static_cast<size_t>(t)]);
  }
  s.validate();
  return s;
}

Latent forward_sample(const Latent& z0, int t, const Latent& noise, const NoiseSchedule& sched) {
  check_config(t >= 1 && t <= sched.timesteps, msg("forward_sample: t=", t, " outside [1, ", sched.timesteps, "]"));
  check_same_shape(z0, noise, "forward_sample");
  return sched.sqrt_ab(t) * z0 + sched.sqrt_1m_ab(t) * noise;
}

void UnetArch::validate() const {
  check_config(latent_channels >= 1 && base_channels >= 4, "UnetArch: channel counts too small");
  check_config(cond_input >= 1 && cond_width >= 1, "UnetArch: condition widths must be positive");
  check_config(temb_dim >= 2 && temb_dim % 2 == 0, "UnetArch: temb_dim must be even");
}

namespace {

void build_layers(DenoiserModel& m, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "unet/init");
  auto& s = m.params;
  const int c = m.arch.base_channels;
  const int cl = m.arch.latent_channels;
  const int ct = m.arch.temb_dim;
  const int cw = m.arch.cond_width;

  if (!s.has("cond.null")) s.add("cond.null", nn::normal_init({1, m.arch.cond_input}, 0.02, rng));
  m.cond_mlp1 = nn::Linear(s, rng, "cond.mlp1", m.arch.cond_input, cw);
  m.cond_mlp2 = nn::Linear(s, rng, "cond.mlp2", cw, cw);
  m.temb1 = nn::Linear(s, rng, "unet.temb1", ct, ct);
  m.temb2 = nn::Linear(s, rng, "unet.temb2", ct, ct);

  m.conv_in = nn::Conv2d(s, rng, "unet.in", cl, c, 3, 1, 1, 1);
  m.enc1 = nn::ResBlock2d(s, rng, "unet.enc1", c, c, ct);
  m.attn_enc1 = nn::CrossAttention(s, rng, "unet.attn_e1", c, cw);
  m.down1 = nn::Conv2d(s, rng, "unet.down1", c, c, 3, 2, 2, 1);
  m.enc2 = nn::ResBlock2d(s, rng, "unet.enc2", c, 2 * c, ct);
  m.attn_enc2 = nn::CrossAttention(s, rng, "unet.attn_e2", 2 * c, cw);
  m.down2 = nn::Conv2d(s, rng, "unet.down2", 2 * c, 2 * c, 3, 2, 2, 1);
  m.enc3 = nn::ResBlock2d(s, rng, "unet.enc3", 2 * c, 2 * c, ct);
  m.mid1 = nn::ResBlock2d(s, rng, "unet.mid1", 2 * c, 2 * c, ct);
  m.mid2 = nn::ResBlock2d(s, rng, "unet.mid2", 2 * c, 2 * c, ct);
  m.dec3 = nn::ResBlock2d(s, rng, "unet.dec3", 4 * c, 2 * c, ct);
  m.up2 = nn::Conv2d(s, rng, "unet.up2", 2 * c, 2 * c, 3, 1, 1, 1);
  m.dec2 = nn::ResBlock2d(s, rng, "unet.dec2", 4 * c, 2 * c, ct);
  m.attn_dec2 = nn::CrossAttention(s, rng, "unet.attn_d2", 2 * c, cw);
  m.up1 = nn::Conv2d(s, rng, "unet.up1", 2 * c, c, 3, 1, 1, 1);
  m.dec1 = nn::ResBlock2d(s, rng, "unet.dec1", 2 * c, c, ct);
  m.attn_dec1 = nn::CrossAttention(s, rng, "unet.attn_d1", c, cw);
  m.out_norm = nn::GroupNorm(s, "unet.out_norm", c, 4);
  m.conv_out = nn::Conv2d(s, rng, "unet.out", c, cl, 3, 1, 1, 1, /*zero_init=*/true);
}

// (C,H,W) feature map <-> (H*W, C) token rows for attention; the time axis of
// the grid feeds the temporal-locality bias.
ad::Var attend(nn::Ctx& ctx, const nn::CrossAttention& attn, ad::Var h, ad::Var cond) {
  const Shape s = h.value().shape();
  ad::Var tokens = ad::transpose(ad::reshape(h, {s[0], s[1] * s[2]}));
  tokens = attn(ctx, tokens, cond, s[1], s[2]);
  return ad::reshape(ad::transpose(tokens), s);
}

}  // namespace

DenoiserModel DenoiserModel::init(const UnetArch& arch, const NoiseSchedule& sched, std::uint64_t seed) {
  arch.validate();
  sched.validate();
  DenoiserModel m;
  m.arch = arch;
  m.schedule = sched;
  build_layers(m, seed);
  return m;
}

DenoiserModel DenoiserModel::from_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  check_runtime(ckpt.meta.value("model", "") == "ldm",
                msg("checkpoint at ", dir.string(), " is not an ldm checkpoint"));
  DenoiserModel m;
  const auto& a = ckpt.meta.at("arch");
  m.arch.latent_channels = a.at("latent_channels").get<int>();
  m.arch.base_channels = a.at("base_channels").get<int>();
  m.arch.cond_input = a.at("cond_input").get<int>();
  m.arch.cond_width = a.at("cond_width").get<int>();
  m.arch.temb_dim = a.at("temb_dim").get<int>();
  const auto& sc = ckpt.meta.at("schedule");
  m.schedule = make_schedule(ScheduleKind::linear_beta, sc.at("timesteps").get<int>(),
                             sc.at("beta_start").get<double>(), sc.at("beta_end").get<double>());
  m.params = std::move(ckpt.params);
  const size_t loaded = m.params.items.size();
  build_layers(m, 0);
  check_params_match(m.params, loaded, dir);
  return m;
}

void DenoiserModel::save(const std::filesystem::path& dir, const json& extra) const {
  json meta = extra;
  meta["model"] = "ldm";
  meta["arch"] = {{"latent_channels", arch.latent_channels},
                  {"base_channels", arch.base_channels},
                  {"cond_input", arch.cond_input},
                  {"cond_width", arch.cond_width},
                  {"temb_dim", arch.temb_dim}};
  // The generating endpoints reproduce the tables exactly on reload.
  meta["schedule"] = {{"kind", "linear_beta"},
                      {"timesteps", schedule.timesteps},
                      {"beta_start", schedule.beta_start},
                      {"beta_end", schedule.beta_end}};
  save_checkpoint(dir, params, meta);
}

ad::Var DenoiserModel::project_condition(nn::Ctx& ctx, ad::Var cond_raw, std::int64_t cond_frames) const {
  if (!cond_raw.valid()) {
    ad::Var null_row = ctx.leaf("cond.null");
    Tensor ones({cond_frames, 1});
    ones.vec().setOnes();
    cond_raw = ad::matmul(ctx.tape.input(std::move(ones)), null_row);
  }
  const std::int64_t t = cond_raw.value().dim(0);
  ad::Var pe = ctx.tape.input(nn::positional_encoding(t, arch.cond_input));
  ad::Var h = ad::add(cond_raw, pe);
  return cond_mlp2(ctx, ad::silu(cond_mlp1(ctx, h)));
}

ad::Var DenoiserModel::eps_var(nn::Ctx& ctx, ad::Var z_t, int t, ad::Var cond_proj) const {
  check_config(t >= 1 && t <= schedule.timesteps, msg("eps: t=", t, " outside schedule [1, ", schedule.timesteps, "]"));
  check_config(z_t.value().ndim() == 3 && z_t.value().dim(0) == arch.latent_channels,
               msg("eps: latent shape ", shape_str(z_t.value().shape()), " does not match configured C'=",
                   arch.latent_channels));
  ad::Var temb = ctx.tape.input(nn::timestep_embedding(static_cast<double>(t), arch.temb_dim).reshaped(
      {1, arch.temb_dim}));
  temb = ad::reshape(temb2(ctx, ad::silu(temb1(ctx, temb))), {arch.temb_dim});

  ad::Var h = conv_in(ctx, z_t);
  ad::Var h1 = attend(ctx, attn_enc1, enc1(ctx, h, temb), cond_proj);
  ad::Var h2 = attend(ctx, attn_enc2, enc2(ctx, down1(ctx, h1), temb), cond_proj);
  ad::Var h3 = enc3(ctx, down2(ctx, h2), temb);
  ad::Var m = mid2(ctx, mid1(ctx, h3, temb), temb);
  ad::Var d3 = dec3(ctx, ad::concat_channels(m, h3), temb);
  ad::Var u2 = up2(ctx, ad::upsample2x(d3));
  ad::Var d2 = attend(ctx, attn_dec2, dec2(ctx, ad::concat_channels(u2, h2), temb), cond_proj);
  ad::Var u1 = up1(ctx, ad::upsample2x(d2));
  ad::Var d1 = attend(ctx, attn_dec1, dec1(ctx, ad::concat_channels(u1, h1), temb), cond_proj);
  return conv_out(ctx, ad::silu(out_norm(ctx, d1)));
}

Tensor DenoiserModel::predict_eps(const Latent& z_t, int t, const MatrixXd* cond, std::int64_t cond_frames) const {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(params), /*trainable=*/false};
  ad::Var cond_raw;
  if (cond != nullptr) {
    check_config(cond->cols() == arch.cond_input,
                 msg("eps: condition width ", cond->cols(), ", expected ", arch.cond_input));
    Tensor c({cond->rows(), cond->cols()});
    c.mat() = *cond;
    cond_raw = tape.input(std::move(c));
  }
  ad::Var proj = project_condition(ctx, cond_raw, cond != nullptr ? cond->rows() : cond_frames);
  return eps_var(ctx, tape.input(z_t), t, proj).value();
}

namespace {

ad::Var denoise_loss_var(nn::Ctx& ctx, const DenoiserModel& model, const Latent& z0, const MatrixXd* cond,
                         std::int64_t cond_frames, double cond_drop_prob, Rng& rng) {
  const int t = static_cast<int>(rng.uniform_int(1, model.schedule.timesteps));
  const Tensor eps = rng.normal_tensor(z0.shape());
  const Latent z_t = forward_sample(z0, t, eps, model.schedule);
  const bool drop = rng.uniform() < cond_drop_prob;
  ad::Var cond_raw;
  if (!drop && cond != nullptr) {
    Tensor c({cond->rows(), cond->cols()});
    c.mat() = *cond;
    cond_raw = ctx.tape.input(std::move(c));
  }
  ad::Var proj = model.project_condition(ctx, cond_raw, cond != nullptr ? cond->rows() : cond_frames);
  ad::Var pred = model.eps_var(ctx, ctx.tape.input(z_t), t, proj);
  ad::Var err = ad::sub(pred, ctx.tape.input(eps));
  return ad::mean(ad::mul(err, err));
}

}  // namespace

double denoise_loss(const Latent& z0, const MatrixXd& cond, const DenoiserModel& model, double cond_drop_prob,
                    Rng& rng) {
  check_config(cond_drop_prob >= 0 && cond_drop_prob <= 1, "denoise_loss: cond_drop_prob outside [0,1]");
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(model.params), /*trainable=*/false};
  const double v = denoise_loss_var(ctx, model, z0, &cond, cond.rows(), cond_drop_prob, rng).value().flat(0);
  check_runtime(std::isfinite(v), "denoise_loss: non-finite loss");
  return v;
}

std::pair<Latent, cavp::EmbeddingSeq> split_merge_augment(
    const std::pair<dsp::MelSpec, cavp::EmbeddingSeq>& pair_a,
    const std::pair<dsp::MelSpec, cavp::EmbeddingSeq>& pair_b, double cut, const codec::Codec& codec) {
  const auto& fmt = codec.fmt;
  const double fcut = cut * fmt.fps;
  const auto cut_frames = static_cast<std::int64_t>(std::llround(fcut));
  check_config(std::abs(fcut - static_cast<double>(cut_frames)) < 1e-6 && cut_frames >= 0,
               msg("split_merge_augment: cut ", cut, " s does not sit on the ", fmt.fps, " fps frame grid"));
  const std::int64_t spf = synthav::frames_per_video_frame(fmt, synthav::Stage::ldm);

  const auto check_pair = [&](const std::pair<dsp::MelSpec, cavp::EmbeddingSeq>& p, std::int64_t frames,
                              const char* which) {
    check_config(p.second.values.rows() == frames,
                 msg("split_merge_augment: segment ", which, " features have ", p.second.values.rows(),
                     " rows, expected ", frames));
    check_config(p.first.values.rows() == frames * spf,
                 msg("split_merge_augment: segment ", which, " spectrogram has ", p.first.values.rows(),
                     " rows, expected ", frames * spf));
  };

  dsp::MelSpec merged;
  cavp::EmbeddingSeq cond;
  cond.modality = cavp::Modality::video;
  if (cut_frames == 0) {
    merged = pair_b.first;
    cond.values = pair_b.second.values;
  } else {
    check_pair(pair_a, cut_frames, "A");
    merged = pair_a.first;
    merged.values.conservativeResize(pair_a.first.values.rows() + pair_b.first.values.rows(),
                                     pair_a.first.values.cols());
    merged.values.bottomRows(pair_b.first.values.rows()) = pair_b.first.values;
    cond.values.resize(pair_a.second.values.rows() + pair_b.second.values.rows(), pair_a.second.values.cols());
    cond.values.topRows(pair_a.second.values.rows()) = pair_a.second.values;
    cond.values.bottomRows(pair_b.second.values.rows()) = pair_b.second.values;
  }
  return {codec::encode(merged, codec), std::move(cond)};
}

LdmTrainResult train_ldm(const synthav::DatasetManifest& manifest, const cavp::CavpModel& cavp_model,
                         const codec::Codec& codec, const LdmTrainConfig& config,
                         const DenoiserModel* resume_from) {
  const auto& fmt = manifest.config.format;
  const auto records = manifest.split_records("train");
  check_config(!records.empty(), "train_ldm: empty training split");
  std::vector<synthav::AVSample> samples;
  for (const auto* r : records) samples.push_back(synthav::load_sample(manifest, *r));

  const NoiseSchedule sched =
      make_schedule(config.schedule_kind, config.timesteps, config.beta_start, config.beta_end);
  LdmTrainResult result{resume_from != nullptr ? *resume_from
                                               : DenoiserModel::init(config.arch, sched, config.seed),
                        {}};
  DenoiserModel& model = result.model;

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.warmup = config.warmup;
  opt.weight_decay = config.weight_decay;

  Rng rng = Rng::stream(config.seed, "ldm/train");
  const auto clip_frames = static_cast<std::int64_t>(std::llround(config.clip_s * fmt.fps));
  const std::int64_t total_frames = samples.front().video.frame_count();
  check_config(clip_frames <= total_frames, "train_ldm: clip longer than dataset samples");

  const auto encode_video_frames = [&](const synthav::AVSample& s, std::int64_t f0, std::int64_t n) {
    return cavp::encode_video(synthav::video_crop(s.video, f0, n), cavp_model);
  };
  const auto sample_index = [&]() {
    return static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1));
  };

  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    nn::Ctx ctx{tape, model.params};
    ad::Var loss;
    for (int b = 0; b < config.batch; ++b) {
      Latent z0;
      MatrixXd cond;
      if (config.augment && rng.uniform() < config.aug_prob && clip_frames >= 2) {
        const auto& sa = samples[sample_index()];
        const auto& sb = samples[sample_index()];
        const std::int64_t cut_frames = rng.uniform_int(1, clip_frames - 1);
        const std::int64_t fa = rng.uniform_int(0, total_frames - cut_frames);
        const std::int64_t fb = rng.uniform_int(0, total_frames - (clip_frames - cut_frames));
        auto pa = std::pair{synthav::mel_for_frames(sa, fa, cut_frames, synthav::Stage::ldm, fmt),
                            encode_video_frames(sa, fa, cut_frames)};
        auto pb = std::pair{
            synthav::mel_for_frames(sb, fb, clip_frames - cut_frames, synthav::Stage::ldm, fmt),
            encode_video_frames(sb, fb, clip_frames - cut_frames)};
        auto [z, cond_seq] = split_merge_augment(pa, pb, static_cast<double>(cut_frames) / fmt.fps, codec);
        z0 = std::move(z);
        cond = std::move(cond_seq.values);
      } else {
        const auto& s = samples[sample_index()];
        std::int64_t max_f0 = total_frames - clip_frames;
        while (max_f0 > 0) {  // keep the crop inside the audio framing margin
          const std::int64_t spf = synthav::frames_per_video_frame(fmt, synthav::Stage::ldm);
          const std::int64_t need = (max_f0 + clip_frames) * spf * fmt.hop_ldm - fmt.hop_ldm + fmt.fft_size;
          if (need <= static_cast<std::int64_t>(s.audio.samples.size())) break;
          --max_f0;
        }
        const std::int64_t f0 = max_f0 > 0 ? rng.uniform_int(0, max_f0) : 0;
        z0 = codec::encode(synthav::mel_for_frames(s, f0, clip_frames, synthav::Stage::ldm, fmt), codec);
        cond = encode_video_frames(s, f0, clip_frames).values;
      }
      ad::Var l = denoise_loss_var(ctx, model, z0, &cond, cond.rows(), config.cond_drop_prob, rng);
      loss = loss.valid() ? ad::add(loss, l) : l;
    }
    loss = ad::scale(loss, 1.0 / config.batch);
    const double loss_val = loss.value().flat(0);
    check_runtime(std::isfinite(loss_val), msg("train_ldm: non-finite loss at step ", step));
    tape.backward(loss);
    auto grads = nn::collect_grads(ctx);
    opt.step(model.params, grads);
    result.log.push_back(
        {step, loss_val, opt.lr * (opt.warmup > 0 ? std::min(1.0, double(opt.step_count) / opt.warmup) : 1.0)});
  }
  return result;
}

void write_train_log(const std::filesystem::path& path, const std::vector<cavp::TrainLogEntry>& log) {
  std::ofstream f(path);
  check_runtime(f.good(), msg("cannot write training log ", path.string()));
  for (const auto& e : log)
    f << json{{"step", e.step}, {"loss", e.loss}, {"lr", e.lr}}.dump() << "\n";
}

}  // namespace foley::diffusion
