#include "foley/cavp.hpp"

#include <algorithm>
#include <cmath>

#include "foley/checkpoint.hpp"

namespace foley::cavp {

using nlohmann::json;

void CavpArch::validate() const {
  check_config(embed_dim >= 4, "CavpArch: embed_dim too small");
  check_config(audio_channels >= 2 && video_channels >= 2, "CavpArch: channel widths too small");
}

namespace {

void build_layers(CavpModel& m, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "cavp/init");
  auto& s = m.params;
  const int ca = m.arch.audio_channels;
  const int cv = m.arch.video_channels;
  // audio tower: (2, T', M) -> (4ca, T'/16, M/8), frame rate after stride 16
  m.a1 = nn::Conv2d(s, rng, "audio.c1", 2, ca, 3, 2, 2, 1);
  m.an1 = nn::GroupNorm(s, "audio.n1", ca, 4);
  m.a2 = nn::Conv2d(s, rng, "audio.c2", ca, 2 * ca, 3, 2, 2, 1);
  m.an2 = nn::GroupNorm(s, "audio.n2", 2 * ca, 4);
  m.a3 = nn::Conv2d(s, rng, "audio.c3", 2 * ca, 3 * ca, 3, 2, 2, 1);
  m.an3 = nn::GroupNorm(s, "audio.n3", 3 * ca, 4);
  m.a4 = nn::Conv2d(s, rng, "audio.c4", 3 * ca, 4 * ca, 3, 2, 1, 1);
  m.an4 = nn::GroupNorm(s, "audio.n4", 4 * ca, 4);
  m.a_proj = nn::Linear(s, rng, "audio.proj", 4 * ca, m.arch.embed_dim);
  // video tower: (2, T, H, W) -> (4cv, T, H/8, W/8), frame axis preserved
  m.v1 = nn::Conv3d(s, rng, "video.c1", 2, cv, 3, 1, 2, 2, 1);
  m.vn1 = nn::GroupNorm(s, "video.n1", cv, 4);
  m.v2 = nn::Conv3d(s, rng, "video.c2", cv, 2 * cv, 3, 1, 2, 2, 1);
  m.vn2 = nn::GroupNorm(s, "video.n2", 2 * cv, 4);
  m.v3 = nn::Conv3d(s, rng, "video.c3", 2 * cv, 4 * cv, 3, 1, 2, 2, 1);
  m.vn3 = nn::GroupNorm(s, "video.n3", 4 * cv, 4);
  m.v_proj = nn::Linear(s, rng, "video.proj", 4 * cv, m.arch.embed_dim);
}

Tensor audio_input(const dsp::MelSpec& mel) {
  const std::int64_t t = mel.values.rows(), m = mel.values.cols();
  const MatrixXd norm = dsp::normalized_mel(mel);
  Tensor x({2, t, m});
  for (std::int64_t r = 0; r < t; ++r) {
    const double ramp = (static_cast<double>(r) + 0.5) / static_cast<double>(t);
    for (std::int64_t c = 0; c < m; ++c) {
      x.at(0, r, c) = norm(r, c);
      x.at(1, r, c) = ramp;
    }
  }
  return x;
}

Tensor video_input(const synthav::VideoClip& clip) {
  const std::int64_t t = clip.frame_count();
  const std::int64_t h = clip.frames.dim(1), w = clip.frames.dim(2);
  Tensor x({2, t, h, w});
  for (std::int64_t f = 0; f < t; ++f) {
    const double ramp = (static_cast<double>(f) + 0.5) / static_cast<double>(t);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t z = 0; z < w; ++z) {
        x.at(0, f, y, z) = clip.frames.at(f, y, z);
        x.at(1, f, y, z) = ramp;
      }
  }
  return x;
}

}  // namespace

CavpModel CavpModel::init(const CavpArch& arch, const synthav::AvFormat& fmt, std::uint64_t seed) {
  arch.validate();
  CavpModel m;
  m.arch = arch;
  m.fmt = fmt;
  build_layers(m, seed);
  return m;
}

CavpModel CavpModel::from_checkpoint(const std::filesystem::path& dir) {
  Checkpoint ckpt = load_checkpoint(dir);
  check_runtime(ckpt.meta.value("model", "") == "cavp",
                msg("checkpoint at ", dir.string(), " is a '", ckpt.meta.value("model", "?"),
                    "' model, expected 'cavp'"));
  CavpModel m;
  m.arch.embed_dim = ckpt.meta.at("arch").at("embed_dim").get<int>();
  m.arch.audio_channels = ckpt.meta.at("arch").at("audio_channels").get<int>();
  m.arch.video_channels = ckpt.meta.at("arch").at("video_channels").get<int>();
  m.fmt.sample_rate = ckpt.meta.at("format").at("sample_rate").get<int>();
  m.fmt.fps = ckpt.meta.at("format").at("fps").get<int>();
  m.fmt.mel_bins = ckpt.meta.at("format").at("mel_bins").get<int>();
  m.fmt.fft_size = ckpt.meta.at("format").at("fft_size").get<int>();
  m.fmt.hop_pretrain = ckpt.meta.at("format").at("hop_pretrain").get<int>();
  m.fmt.hop_ldm = ckpt.meta.at("format").at("hop_ldm").get<int>();
  m.params = std::move(ckpt.params);
  const size_t loaded = m.params.items.size();
  build_layers(m, 0);  // shapes validated against loaded tensors
  check_params_match(m.params, loaded, dir);
  return m;
}

void CavpModel::save(const std::filesystem::path& dir, const json& extra) const {
  json meta = extra;
  meta["model"] = "cavp";
  meta["arch"] = {{"embed_dim", arch.embed_dim},
                  {"audio_channels", arch.audio_channels},
                  {"video_channels", arch.video_channels}};
  meta["format"] = {{"sample_rate", fmt.sample_rate}, {"fps", fmt.fps},       {"mel_bins", fmt.mel_bins},
                    {"fft_size", fmt.fft_size},       {"hop_pretrain", fmt.hop_pretrain},
                    {"hop_ldm", fmt.hop_ldm}};
  save_checkpoint(dir, params, meta);
}

ad::Var CavpModel::audio_tower_seq(nn::Ctx& ctx, const dsp::MelSpec& mel) const {
  check_config(mel.values.rows() % 16 == 0,
               msg("encode_audio: spectrogram time axis ", mel.values.rows(),
                   " is not a multiple of the encoder stride 16"));
  ad::Var x = ctx.tape.input(audio_input(mel));
  x = ad::silu(an1(ctx, a1(ctx, x)));
  x = ad::silu(an2(ctx, a2(ctx, x)));
  x = ad::silu(an3(ctx, a3(ctx, x)));
  x = ad::silu(an4(ctx, a4(ctx, x)));       // (4ca, T, M/8)
  x = ad::mean_over_last(x);                // (4ca, T)
  x = ad::transpose(ad::reshape(x, {x.value().dim(0), x.value().dim(1)}));
  return a_proj(ctx, x);                    // (T, C)
}

ad::Var CavpModel::video_tower_seq(nn::Ctx& ctx, const synthav::VideoClip& clip) const {
  ad::Var x = ctx.tape.input(video_input(clip));
  x = ad::silu(vn1(ctx, v1(ctx, x)));
  x = ad::silu(vn2(ctx, v2(ctx, x)));
  x = ad::silu(vn3(ctx, v3(ctx, x)));       // (4cv, T, H/8, W/8)
  x = ad::mean_over_last(ad::mean_over_last(x));  // (4cv, T)
  x = ad::transpose(ad::reshape(x, {x.value().dim(0), x.value().dim(1)}));
  return v_proj(ctx, x);                    // (T, C)
}

ad::Var CavpModel::audio_tower(nn::Ctx& ctx, const dsp::MelSpec& mel) const {
  return ad::max_over_rows(audio_tower_seq(ctx, mel));
}

ad::Var CavpModel::video_tower(nn::Ctx& ctx, const synthav::VideoClip& clip) const {
  return ad::max_over_rows(video_tower_seq(ctx, clip));
}

EmbeddingSeq encode_audio(const dsp::MelSpec& mel, const CavpModel& model) {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(model.params), /*trainable=*/false};
  const Tensor v = model.audio_tower_seq(ctx, mel).value();
  EmbeddingSeq e;
  e.modality = Modality::audio;
  e.values = v.mat();
  check_runtime(e.values.allFinite(), "encode_audio: non-finite embedding");
  return e;
}

EmbeddingSeq encode_video(const synthav::VideoClip& clip, const CavpModel& model) {
  ad::Tape tape;
  nn::Ctx ctx{tape, const_cast<nn::ParamStore&>(model.params), /*trainable=*/false};
  const Tensor v = model.video_tower_seq(ctx, clip).value();
  EmbeddingSeq e;
  e.modality = Modality::video;
  e.values = v.mat();
  check_runtime(e.values.allFinite(), "encode_video: non-finite embedding");
  return e;
}

PooledEmbedding temporal_pool(const EmbeddingSeq& e) {
  check_config(e.values.rows() >= 1, "temporal_pool: empty sequence");
  return e.values.colwise().maxCoeff().transpose();
}

namespace {

// Order-invariant reduction so permuting the batch cannot change the result
// even in the last ulp.
double sorted_sum(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  double s = 0;
  for (double x : v) s += x;
  return s;
}

double lse_sorted(const std::vector<double>& v) {
  double m = v.front();
  for (double x : v) m = std::max(m, x);
  std::vector<double> e(v.size());
  for (size_t i = 0; i < v.size(); ++i) e[i] = std::exp(v[i] - m);
  return m + std::log(sorted_sum(std::move(e)));
}

// Shared form of both contrast objectives (plain-double route).
double info_nce(const std::vector<PooledEmbedding>& audio, const std::vector<PooledEmbedding>& video,
                double tau) {
  check_config(tau > 0, "contrast loss: tau must be positive");
  check_config(!audio.empty() && audio.size() == video.size(),
               "contrast loss: need equal, non-empty embedding lists");
  const auto n = static_cast<size_t>(audio.size());
  std::vector<std::vector<double>> sim(n, std::vector<double>(n));
  for (size_t i = 0; i < n; ++i) {
    const double na = audio[i].norm();
    check_config(na > 1e-12, msg("contrast loss: audio embedding ", i, " has zero norm, cosine undefined"));
    for (size_t j = 0; j < n; ++j) {
      const double nv = video[j].norm();
      check_config(nv > 1e-12, msg("contrast loss: video embedding ", j, " has zero norm, cosine undefined"));
      sim[i][j] = audio[i].dot(video[j]) / (na * nv * tau);
    }
  }
  std::vector<double> per_pair(n);
  for (size_t i = 0; i < n; ++i) {
    std::vector<double> col(n);
    for (size_t k = 0; k < n; ++k) col[k] = sim[k][i];
    per_pair[i] = 0.5 * (lse_sorted(sim[i]) - sim[i][i]) + 0.5 * (lse_sorted(col) - sim[i][i]);
  }
  return sorted_sum(std::move(per_pair)) / static_cast<double>(n);
}

}  // namespace

double semantic_contrast_loss(const std::vector<PooledEmbedding>& audio,
                              const std::vector<PooledEmbedding>& video, double tau) {
  return info_nce(audio, video, tau);
}

double temporal_contrast_loss(const std::vector<PooledEmbedding>& audio,
                              const std::vector<PooledEmbedding>& video, double tau) {
  return info_nce(audio, video, tau);
}

double cavp_total_loss(const CavpBatch& batch) {
  check_config(batch.lambda_temporal >= 0, "cavp_total_loss: lambda must be non-negative");
  double loss = semantic_contrast_loss(batch.semantic_audio, batch.semantic_video, batch.tau);
  if (batch.lambda_temporal > 0 && !batch.temporal_audio.empty()) {
    check_config(batch.temporal_audio.size() == batch.temporal_video.size(),
                 "cavp_total_loss: mismatched temporal pair groups");
    double lt = 0;
    for (size_t v = 0; v < batch.temporal_audio.size(); ++v)
      lt += temporal_contrast_loss(batch.temporal_audio[v], batch.temporal_video[v], batch.tau);
    loss += batch.lambda_temporal * lt / static_cast<double>(batch.temporal_audio.size());
  }
  return loss;
}

namespace {

// Var-path InfoNCE matching info_nce bit-for-bit in structure.
ad::Var info_nce_var(ad::Tape& tape, const std::vector<ad::Var>& audio, const std::vector<ad::Var>& video,
                     double tau) {
  ad::Var a = ad::normalize_rows(ad::stack_rows(audio));
  ad::Var v = ad::normalize_rows(ad::stack_rows(video));
  ad::Var sim = ad::scale(ad::matmul(a, ad::transpose(v)), 1.0 / tau);
  ad::Var lse_row = ad::logsumexp_rows(sim);
  ad::Var lse_col = ad::logsumexp_rows(ad::transpose(sim));
  ad::Var d = ad::diag(sim);
  ad::Var per_pair = ad::sub(ad::scale(ad::add(lse_row, lse_col), 0.5), d);
  return ad::mean(per_pair);
}

struct ClipPool {
  std::vector<synthav::AVSample> samples;
  std::vector<std::vector<std::int64_t>> eventful_starts;  // frame-aligned pretrain windows with >= 1 event
  std::vector<std::vector<std::int64_t>> all_starts;
};

std::vector<std::int64_t> window_starts(const synthav::AVSample& s, std::int64_t window_frames, bool eventful,
                                        int fps) {
  const std::int64_t total = s.video.frame_count();
  std::vector<std::int64_t> starts;
  for (std::int64_t f0 = 0; f0 + window_frames <= total; ++f0) {
    if (!eventful) {
      starts.push_back(f0);
      continue;
    }
    for (const auto& e : s.script.events) {
      const auto ef = static_cast<std::int64_t>(std::llround(e.time * fps));
      if (ef >= f0 && ef < f0 + window_frames) {
        starts.push_back(f0);
        break;
      }
    }
  }
  return starts;
}

ClipPool load_pool(const synthav::DatasetManifest& manifest, const std::string& split, double clip_s) {
  ClipPool pool;
  const auto fps = manifest.config.format.fps;
  const auto window = static_cast<std::int64_t>(std::llround(clip_s * fps));
  for (const auto* rec : manifest.split_records(split)) {
    pool.samples.push_back(synthav::load_sample(manifest, *rec));
    const auto& s = pool.samples.back();
    pool.eventful_starts.push_back(window_starts(s, window, true, fps));
    pool.all_starts.push_back(window_starts(s, window, false, fps));
    if (pool.eventful_starts.back().empty()) pool.eventful_starts.back() = pool.all_starts.back();
  }
  check_config(!pool.samples.empty(), msg("dataset split '", split, "' is empty"));
  return pool;
}

// N_T starts with pairwise gaps >= gap_frames; rejection sampling with a
// deterministic greedy fallback.
std::vector<std::int64_t> pick_segment_starts(const std::vector<std::int64_t>& starts, int count,
                                              std::int64_t gap_frames, Rng& rng) {
  std::vector<std::int64_t> out;
  for (int attempt = 0; attempt < 64; ++attempt) {
    out.clear();
    for (int k = 0; k < count; ++k) {
      const std::int64_t cand = starts[static_cast<size_t>(rng.uniform_int(0, static_cast<std::int64_t>(starts.size()) - 1))];
      bool ok = true;
      for (std::int64_t prev : out)
        if (std::abs(prev - cand) < gap_frames) ok = false;
      if (!ok) break;
      out.push_back(cand);
    }
    if (static_cast<int>(out.size()) == count) return out;
  }
  out.clear();
  for (std::int64_t s : starts) {  // greedy sweep
    bool ok = true;
    for (std::int64_t prev : out)
      if (std::abs(prev - s) < gap_frames) ok = false;
    if (ok) out.push_back(s);
    if (static_cast<int>(out.size()) == count) return out;
  }
  while (static_cast<int>(out.size()) < count) out.push_back(starts.front());
  return out;
}

}  // namespace

std::int64_t most_eventful_start_frame(const synthav::AVSample& sample, double clip_s) {
  const auto window = static_cast<std::int64_t>(std::llround(clip_s * sample.video.fps));
  const std::int64_t total = sample.video.frame_count();
  std::int64_t best = 0, best_count = -1;
  for (std::int64_t f0 = 0; f0 + window <= total; ++f0) {
    std::int64_t count = 0;
    for (const auto& e : sample.script.events) {
      const auto ef = static_cast<std::int64_t>(std::llround(e.time * sample.video.fps));
      if (ef >= f0 && ef < f0 + window) ++count;
    }
    if (count > best_count) {
      best_count = count;
      best = f0;
    }
  }
  return best;
}

CavpTrainResult train_cavp(const synthav::DatasetManifest& manifest, const CavpTrainConfig& config) {
  const auto& fmt = manifest.config.format;
  ClipPool pool = load_pool(manifest, "train", config.contrast.clip_s);
  check_config(pool.samples.size() >= 2, "train_cavp: need at least 2 training videos");

  CavpTrainResult result{CavpModel::init(config.arch, fmt, config.seed), {}};
  CavpModel& model = result.model;

  nn::AdamW opt;
  opt.lr = config.lr;
  opt.warmup = config.warmup;
  opt.weight_decay = config.weight_decay;

  Rng rng = Rng::stream(config.seed, "cavp/train");
  const auto n_clip = static_cast<std::int64_t>(std::llround(config.contrast.clip_s * fmt.fps));
  const auto gap_frames = static_cast<std::int64_t>(std::llround(config.contrast.min_gap_s * fmt.fps));
  const int n_videos = std::min<int>(config.contrast.batch_videos, static_cast<int>(pool.samples.size()));

  for (int step = 0; step < config.steps; ++step) {
    std::vector<std::int64_t> order(pool.samples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<std::int64_t>(i);
    rng.shuffle(order);

    ad::Tape tape;
    nn::Ctx ctx{tape, model.params};
    std::vector<ad::Var> sem_a, sem_v;
    std::vector<std::vector<ad::Var>> temp_a, temp_v;
    for (int b = 0; b < n_videos; ++b) {
      const auto& sample = pool.samples[static_cast<size_t>(order[static_cast<size_t>(b)])];
      const auto& starts = pool.eventful_starts[static_cast<size_t>(order[static_cast<size_t>(b)])];
      const auto segs = pick_segment_starts(starts, config.contrast.clips_per_video, gap_frames, rng);
      std::vector<ad::Var> seg_a, seg_v;
      for (std::int64_t f0 : segs) {
        const dsp::MelSpec mel = synthav::mel_for_frames(sample, f0, n_clip, synthav::Stage::pretrain, fmt);
        const synthav::VideoClip clip = synthav::video_crop(sample.video, f0, n_clip);
        seg_a.push_back(model.audio_tower(ctx, mel));
        seg_v.push_back(model.video_tower(ctx, clip));
      }
      sem_a.push_back(seg_a.front());
      sem_v.push_back(seg_v.front());
      if (config.contrast.clips_per_video > 1) {
        temp_a.push_back(std::move(seg_a));
        temp_v.push_back(std::move(seg_v));
      }
    }

    ad::Var loss = info_nce_var(tape, sem_a, sem_v, config.contrast.tau);
    if (config.contrast.lambda_temporal > 0 && !temp_a.empty()) {
      ad::Var lt;
      for (size_t v = 0; v < temp_a.size(); ++v) {
        ad::Var l = info_nce_var(tape, temp_a[v], temp_v[v], config.contrast.tau);
        lt = lt.valid() ? ad::add(lt, l) : l;
      }
      lt = ad::scale(lt, config.contrast.lambda_temporal / static_cast<double>(temp_a.size()));
      loss = ad::add(loss, lt);
    }

    const double loss_val = loss.value().flat(0);
    check_runtime(std::isfinite(loss_val), msg("train_cavp: non-finite loss at step ", step));
    tape.backward(loss);
    auto grads = nn::collect_grads(ctx);
    opt.step(model.params, grads);
    result.log.push_back({step, loss_val, opt.lr * (opt.warmup > 0 ? std::min(1.0, double(opt.step_count) / opt.warmup) : 1.0)});
  }
  return result;
}

double retrieval_top1(const CavpModel& model, const synthav::DatasetManifest& manifest,
                      const std::string& split, int batch) {
  const auto& fmt = manifest.config.format;
  const auto records = manifest.split_records(split);
  check_config(!records.empty(), msg("retrieval_top1: split '", split, "' is empty"));
  const int n = std::min<int>(batch, static_cast<int>(records.size()));
  const double clip_s = 4.0;
  const auto n_clip = static_cast<std::int64_t>(std::llround(clip_s * fmt.fps));

  std::vector<PooledEmbedding> a_emb, v_emb;
  for (int i = 0; i < n; ++i) {
    const synthav::AVSample sample = synthav::load_sample(manifest, *records[static_cast<size_t>(i)]);
    const std::int64_t f0 = most_eventful_start_frame(sample, clip_s);
    const dsp::MelSpec mel = synthav::mel_for_frames(sample, f0, n_clip, synthav::Stage::pretrain, fmt);
    a_emb.push_back(temporal_pool(encode_audio(mel, model)));
    v_emb.push_back(temporal_pool(encode_video(synthav::video_crop(sample.video, f0, n_clip), model)));
  }
  int hits = 0;
  for (int i = 0; i < n; ++i) {
    double best = -2;
    int arg = -1;
    for (int j = 0; j < n; ++j) {
      const double c = a_emb[static_cast<size_t>(i)].dot(v_emb[static_cast<size_t>(j)]) /
                       (a_emb[static_cast<size_t>(i)].norm() * v_emb[static_cast<size_t>(j)].norm());
      if (c > best) {
        best = c;
        arg = j;
      }
    }
    if (arg == i) ++hits;
  }
  return static_cast<double>(hits) / n;
}

}  // namespace foley::cavp
