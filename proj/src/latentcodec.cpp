#include "foley/latentcodec.hpp"

#include <cmath>

#include "foley/checkpoint.hpp"

namespace foley::codec {

using nlohmann::json;

void CodecArch::validate() const {
  check_config(compress >= 1, "CodecArch: compress rate must be >= 1");
  check_config(latent_channels >= 1, "CodecArch: latent_channels must be >= 1");
  if (mode == Mode::identity)
    check_config(latent_channels == compress * compress,
                 msg("CodecArch: identity mode needs latent_channels == r*r, got C'=", latent_channels,
                     " for r=", compress));
  else
    check_config(compress == 4, "CodecArch: the learned encoder is built for r=4");
}

namespace {

void build_layers(Codec& c, std::uint64_t seed) {
  if (c.arch.mode == Mode::identity) return;
  Rng rng = Rng::stream(seed, "codec/init");
  auto& s = c.params;
  const int cb = c.arch.base_channels;
  const int cl = c.arch.latent_channels;
  c.e1 = nn::Conv2d(s, rng, "enc.c1", 1, cb, 3, 2, 2, 1);
  c.en1 = nn::GroupNorm(s, "enc.n1", cb, 4);
  c.e2 = nn::Conv2d(s, rng, "enc.c2", cb, 2 * cb, 3, 2, 2, 1);
  c.en2 = nn::GroupNorm(s, "enc.n2", 2 * cb, 4);
  c.e3 = nn::Conv2d(s, rng, "enc.c3", 2 * cb, 2 * cb, 3, 1, 1, 1);
  c.en3 = nn::GroupNorm(s, "enc.n3", 2 * cb, 4);
  c.e4 = nn::Conv2d(s, rng, "enc.c4", 2 * cb, cl, 3, 1, 1, 1);
  c.d1 = nn::Conv2d(s, rng, "dec.c1", cl, 2 * cb, 3, 1, 1, 1);
  c.dn1 = nn::GroupNorm(s, "dec.n1", 2 * cb, 4);
  c.d2 = nn::Conv2d(s, rng, "dec.c2", 2 * cb, 2 * cb, 3, 1, 1, 1);
  c.dn2 = nn::GroupNorm(s, "dec.n2", 2 * cb, 4);
  c.d3 = nn::Conv2d(s, rng, "dec.c3", 2 * cb, cb, 3, 1, 1, 1);
  c.dn3 = nn::GroupNorm(s, "dec.n3", cb, 4);
  c.d4 = nn::Conv2d(s, rng, "dec.c4", cb, 1, 3, 1, 1, 1);
}

}  // namespace

Codec Codec::identity(const synthav::AvFormat& fmt, int compress) {
  Codec c;
  c.arch.mode = Mode::identity;
  c.arch.compress = compress;
  c.arch.latent_channels = compress * compress;
  c.arch.validate();
  c.fmt = fmt;
  return c;
}

Codec Codec::init_learned(const CodecArch& arch, const synthav::AvFormat& fmt, std::uint64_t seed) {
  arch.validate();
  check_config(arch.mode == Mode::learned, "init_learned: arch.mode must be learned");
  Codec c;
  c.arch = arch;
  c.fmt = fmt;
  build_layers(c, seed);
  return c;
}

Codec Codec::from_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  check_runtime(ckpt.meta.value("model", "") == "codec",
                msg("checkpoint at ", dir.string(), " is not a codec checkpoint"));
  Codec c;
  c.arch.mode = ckpt.meta.at("arch").at("mode").get<std::string>() == "identity" ? Mode::identity : Mode::learned;
  c.arch.compress = ckpt.meta.at("arch").at("compress").get<int>();
  c.arch.latent_channels = ckpt.meta.at("arch").at("latent_channels").get<int>();
  c.arch.base_channels = ckpt.meta.at("arch").at("base_channels").get<int>();
  c.latent_scale = ckpt.meta.at("latent_scale").get<double>();
  c.fmt.sample_rate = ckpt.meta.at("format").at("sample_rate").get<int>();
  c.fmt.fps = ckpt.meta.at("format").at("fps").get<int>();
  c.fmt.mel_bins = ckpt.meta.at("format").at("mel_bins").get<int>();
  c.fmt.fft_size = ckpt.meta.at("format").at("fft_size").get<int>();
  c.fmt.hop_pretrain = ckpt.meta.at("format").at("hop_pretrain").get<int>();
  c.fmt.hop_ldm = ckpt.meta.at("format").at("hop_ldm").get<int>();
  c.fmt.mel_floor = ckpt.meta.at("format").at("mel_floor").get<double>();
  c.params = std::move(ckpt.params);
  const size_t loaded = c.params.items.size();
  build_layers(c, 0);
  check_params_match(c.params, loaded, dir);
  return c;
}

void Codec::save(const std::filesystem::path& dir, const json& extra) const {
  json meta = extra;
  meta["model"] = "codec";
  meta["arch"] = {{"mode", arch.mode == Mode::identity ? "identity" : "learned"},
                  {"compress", arch.compress},
                  {"latent_channels", arch.latent_channels},
                  {"base_channels", arch.base_channels}};
  meta["latent_scale"] = latent_scale;
  meta["format"] = {{"sample_rate", fmt.sample_rate}, {"fps", fmt.fps},
                    {"mel_bins", fmt.mel_bins},       {"fft_size", fmt.fft_size},
                    {"hop_pretrain", fmt.hop_pretrain}, {"hop_ldm", fmt.hop_ldm},
                    {"mel_floor", fmt.mel_floor}};
  save_checkpoint(dir, params, meta);
}

ad::Var Codec::encode_var(nn::Ctx& ctx, ad::Var x) const {
  x = ad::silu(en1(ctx, e1(ctx, x)));
  x = ad::silu(en2(ctx, e2(ctx, x)));
  x = ad::silu(en3(ctx, e3(ctx, x)));
  return e4(ctx, x);
}

ad::Var Codec::decode_var(nn::Ctx& ctx, ad::Var z) const {
  z = ad::silu(dn1(ctx, d1(ctx, z)));
  z = ad::upsample2x(z);
  z = ad::silu(dn2(ctx, d2(ctx, z)));
  z = ad::upsample2x(z);
  z = ad::silu(dn3(ctx, d3(ctx, z)));
  return d4(ctx, z);
}

namespace {

void check_divisible(const dsp::MelSpec& mel, int r) {
  check_config(mel.values.rows() % r == 0 && mel.values.cols() % r == 0,
               msg("codec encode: spectrogram ", mel.values.rows(), "x", mel.values.cols(),
                   " is not divisible by the compress rate ", r));
}

}  // namespace

Latent encode(const dsp::MelSpec& mel, const Codec& codec) {
  const int r = codec.arch.compress;
  check_divisible(mel, r);
  const std::int64_t t = mel.values.rows(), m = mel.values.cols();
  if (codec.arch.mode == Mode::identity) {
    Latent z({static_cast<std::int64_t>(r) * r, t / r, m / r});
    for (std::int64_t c = 0; c < r * r; ++c)
      for (std::int64_t i = 0; i < t / r; ++i)
        for (std::int64_t j = 0; j < m / r; ++j)
          z.at(c, i, j) = mel.values(i * r + c / r, j * r + c % r);
    return z;
  }
  Tensor x({1, t, m});
  x.mat(t, m) = dsp::normalized_mel(mel);
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(codec.params), /*trainable=*/false};
  Tensor z = codec.encode_var(ctx, tape.input(std::move(x))).value();
  z.vec() *= 1.0 / codec.latent_scale;
  return z;
}

dsp::MelSpec decode(const Latent& z, const Codec& codec) {
  check_config(z.ndim() == 3 && z.dim(0) == codec.arch.latent_channels,
               msg("codec decode: latent shape ", shape_str(z.shape()), " does not match C'=",
                   codec.arch.latent_channels));
  const int r = codec.arch.compress;
  dsp::MelSpec mel;
  mel.mel_basis = codec.fmt.mel_bins;
  mel.fft_size = codec.fmt.fft_size;
  mel.hop_size = codec.fmt.hop_ldm;
  mel.sample_rate = codec.fmt.sample_rate;
  mel.floor = codec.fmt.mel_floor;
  if (codec.arch.mode == Mode::identity) {
    const std::int64_t t = z.dim(1) * r, m = z.dim(2) * r;
    mel.values.resize(t, m);
    for (std::int64_t c = 0; c < r * r; ++c)
      for (std::int64_t i = 0; i < z.dim(1); ++i)
        for (std::int64_t j = 0; j < z.dim(2); ++j)
          mel.values(i * r + c / r, j * r + c % r) = z.at(c, i, j);
    return mel;
  }
  Tensor zs = z;
  zs.vec() *= codec.latent_scale;
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(codec.params), /*trainable=*/false};
  const Tensor x = codec.decode_var(ctx, tape.input(std::move(zs))).value();
  const std::int64_t t = x.dim(1), m = x.dim(2);
  MatrixXd norm = x.mat(t, m);
  mel.values = dsp::denormalized_mel(norm, mel).values;
  return mel;
}

CodecTrainResult train_codec(const synthav::DatasetManifest& manifest, const CodecTrainConfig& config) {
  check_config(config.arch.mode == Mode::learned, "train_codec: identity codec has nothing to train");
  const auto& fmt = manifest.config.format;
  const auto records = manifest.split_records("train");
  check_config(!records.empty(), "train_codec: empty training split");

  std::vector<synthav::AVSample> samples;
  for (const auto* r : records) samples.push_back(synthav::load_sample(manifest, *r));

  CodecTrainResult result{Codec::init_learned(config.arch, fmt, config.seed), {}};
  Codec& codec = result.codec;

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.warmup = config.warmup;
  opt.weight_decay = config.weight_decay;

  Rng rng = Rng::stream(config.seed, "codec/train");
  const std::int64_t total_frames = samples.front().video.frame_count();
  const std::int64_t crop = std::min<std::int64_t>(config.crop_frames, total_frames);

  for (int step = 0; step < config.steps; ++step) {
    ad::Tape tape;
    nn::Ctx ctx{tape, codec.params};
    ad::Var loss;
    for (int b = 0; b < config.batch; ++b) {
      const auto& s = samples[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1))];
      const std::int64_t f0 = rng.uniform_int(0, total_frames - crop);
      const dsp::MelSpec mel = synthav::mel_for_frames(s, f0, crop, synthav::Stage::ldm, fmt);
      Tensor x({1, mel.values.rows(), mel.values.cols()});
      x.mat(mel.values.rows(), mel.values.cols()) = dsp::normalized_mel(mel);
      ad::Var xv = tape.input(std::move(x));
      ad::Var rec = codec.decode_var(ctx, codec.encode_var(ctx, xv));
      ad::Var err = ad::sub(rec, xv);
      ad::Var l = ad::mean(ad::mul(err, err));
      loss = loss.valid() ? ad::add(loss, l) : l;
    }
    loss = ad::scale(loss, 1.0 / config.batch);
    const double loss_val = loss.value().flat(0);
    check_runtime(std::isfinite(loss_val), msg("train_codec: non-finite loss at step ", step));
    tape.backward(loss);
    auto grads = nn::collect_grads(ctx);
    opt.step(codec.params, grads);
    result.losses.push_back(loss_val);
  }

  // Calibrate the latent scale on a probe set so diffusion sees unit-ish variance.
  double sq = 0;
  std::int64_t count = 0;
  Rng probe = Rng::stream(config.seed, "codec/scale");
  for (int i = 0; i < 12; ++i) {
    const auto& s = samples[static_cast<size_t>(probe.uniform_int(0, static_cast<std::int64_t>(samples.size()) - 1))];
    const std::int64_t f0 = probe.uniform_int(0, total_frames - crop);
    const dsp::MelSpec mel = synthav::mel_for_frames(s, f0, crop, synthav::Stage::ldm, fmt);
    const Latent z = encode(mel, codec);  // latent_scale is still 1 here
    sq += z.vec().squaredNorm();
    count += z.size();
  }
  codec.latent_scale = std::max(1e-6, std::sqrt(sq / static_cast<double>(count)));
  return result;
}

double heldout_reconstruction_mse(const Codec& codec, const synthav::DatasetManifest& manifest,
                                  const std::string& split, int max_samples) {
  const auto& fmt = manifest.config.format;
  const auto records = manifest.split_records(split);
  check_config(!records.empty(), msg("heldout_reconstruction_mse: split '", split, "' is empty"));
  const int n = std::min<int>(max_samples, static_cast<int>(records.size()));
  double total = 0;
  std::int64_t count = 0;
  for (int i = 0; i < n; ++i) {
    const synthav::AVSample s = synthav::load_sample(manifest, *records[static_cast<size_t>(i)]);
    const std::int64_t frames = s.video.frame_count();
    const dsp::MelSpec mel = synthav::mel_for_frames(s, 0, frames, synthav::Stage::ldm, fmt);
    const dsp::MelSpec rec = decode(encode(mel, codec), codec);
    total += (rec.values - mel.values).squaredNorm();
    count += mel.values.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace foley::codec
