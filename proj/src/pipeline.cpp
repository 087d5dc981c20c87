#include "foley/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iostream>

#include "foley/blob.hpp"

namespace foley::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& obj, const char* section, std::initializer_list<const char*> allowed) {
  for (const auto& [key, _] : obj.items()) {
    bool ok = false;
    for (const char* a : allowed)
      if (key == a) ok = true;
    check_config(ok, msg("config: unknown key '", key, "' in section '", section, "'"));
  }
}

template <typename T>
void read_field(const json& obj, const char* key, T& out) {
  if (obj.contains(key)) out = obj.at(key).get<T>();
}

void read_path(const json& obj, const char* key, fs::path& out) {
  if (obj.contains(key)) out = obj.at(key).get<std::string>();
}

}  // namespace

PipelineConfig parse_config(const json& doc) {
  check_config(doc.is_object(), "config: top level must be a JSON object");
  reject_unknown(doc, "<top>", {"seed", "out_root", "data", "cavp", "codec", "ldm", "align", "proxy",
                                "sample", "eval", "paths"});
  PipelineConfig cfg;
  cfg.raw = doc;
  read_field(doc, "seed", cfg.seed);
  read_path(doc, "out_root", cfg.out_root);

  if (doc.contains("data")) {
    const json& d = doc.at("data");
    reject_unknown(d, "data",
                   {"root", "train_samples", "test_samples", "classes", "duration_s", "fps", "height",
                    "width", "sample_rate", "fft_size", "hop_pretrain", "hop_ldm", "mel_bins", "mel_floor"});
    read_path(d, "root", cfg.data.root);
    read_field(d, "train_samples", cfg.data.train_samples);
    read_field(d, "test_samples", cfg.data.test_samples);
    read_field(d, "duration_s", cfg.data.duration);
    read_field(d, "classes", cfg.data.format.classes);
    read_field(d, "fps", cfg.data.format.fps);
    read_field(d, "height", cfg.data.format.height);
    read_field(d, "width", cfg.data.format.width);
    read_field(d, "sample_rate", cfg.data.format.sample_rate);
    read_field(d, "fft_size", cfg.data.format.fft_size);
    read_field(d, "hop_pretrain", cfg.data.format.hop_pretrain);
    read_field(d, "hop_ldm", cfg.data.format.hop_ldm);
    read_field(d, "mel_bins", cfg.data.format.mel_bins);
    read_field(d, "mel_floor", cfg.data.format.mel_floor);
  }
  if (cfg.data.root.empty()) cfg.data.root = "data/synth";
  cfg.data.seed = cfg.seed;

  if (doc.contains("cavp")) {
    const json& d = doc.at("cavp");
    reject_unknown(d, "cavp",
                   {"steps", "lr", "warmup", "weight_decay", "tau", "lambda_temporal", "batch_videos",
                    "clips_per_video", "min_gap_s", "clip_s", "embed_dim", "audio_channels", "video_channels"});
    read_field(d, "steps", cfg.cavp_cfg.steps);
    read_field(d, "lr", cfg.cavp_cfg.lr);
    read_field(d, "warmup", cfg.cavp_cfg.warmup);
    read_field(d, "weight_decay", cfg.cavp_cfg.weight_decay);
    read_field(d, "tau", cfg.cavp_cfg.contrast.tau);
    read_field(d, "lambda_temporal", cfg.cavp_cfg.contrast.lambda_temporal);
    read_field(d, "batch_videos", cfg.cavp_cfg.contrast.batch_videos);
    read_field(d, "clips_per_video", cfg.cavp_cfg.contrast.clips_per_video);
    read_field(d, "min_gap_s", cfg.cavp_cfg.contrast.min_gap_s);
    read_field(d, "clip_s", cfg.cavp_cfg.contrast.clip_s);
    read_field(d, "embed_dim", cfg.cavp_cfg.arch.embed_dim);
    read_field(d, "audio_channels", cfg.cavp_cfg.arch.audio_channels);
    read_field(d, "video_channels", cfg.cavp_cfg.arch.video_channels);
  }
  cfg.cavp_cfg.seed = cfg.seed;

  if (doc.contains("codec")) {
    const json& d = doc.at("codec");
    reject_unknown(d, "codec",
                   {"mode", "steps", "batch", "crop_frames", "lr", "warmup", "weight_decay", "compress",
                    "latent_channels", "base_channels"});
    std::string mode = "learned";
    read_field(d, "mode", mode);
    check_config(mode == "learned" || mode == "identity", "config: codec.mode must be learned|identity");
    cfg.codec_cfg.arch.mode = mode == "learned" ? codec::Mode::learned : codec::Mode::identity;
    read_field(d, "steps", cfg.codec_cfg.steps);
    read_field(d, "batch", cfg.codec_cfg.batch);
    read_field(d, "crop_frames", cfg.codec_cfg.crop_frames);
    read_field(d, "lr", cfg.codec_cfg.lr);
    read_field(d, "warmup", cfg.codec_cfg.warmup);
    read_field(d, "weight_decay", cfg.codec_cfg.weight_decay);
    read_field(d, "compress", cfg.codec_cfg.arch.compress);
    read_field(d, "latent_channels", cfg.codec_cfg.arch.latent_channels);
    read_field(d, "base_channels", cfg.codec_cfg.arch.base_channels);
  }
  cfg.codec_cfg.seed = cfg.seed;

  if (doc.contains("ldm")) {
    const json& d = doc.at("ldm");
    reject_unknown(d, "ldm",
                   {"steps", "batch", "lr", "warmup", "weight_decay", "cond_drop_prob", "augment", "aug_prob",
                    "timesteps", "beta_start", "beta_end", "base_channels", "cond_width", "temb_dim", "clip_s"});
    read_field(d, "steps", cfg.ldm_cfg.steps);
    read_field(d, "batch", cfg.ldm_cfg.batch);
    read_field(d, "lr", cfg.ldm_cfg.lr);
    read_field(d, "warmup", cfg.ldm_cfg.warmup);
    read_field(d, "weight_decay", cfg.ldm_cfg.weight_decay);
    read_field(d, "cond_drop_prob", cfg.ldm_cfg.cond_drop_prob);
    read_field(d, "augment", cfg.ldm_cfg.augment);
    read_field(d, "aug_prob", cfg.ldm_cfg.aug_prob);
    read_field(d, "timesteps", cfg.ldm_cfg.timesteps);
    read_field(d, "beta_start", cfg.ldm_cfg.beta_start);
    read_field(d, "beta_end", cfg.ldm_cfg.beta_end);
    read_field(d, "base_channels", cfg.ldm_cfg.arch.base_channels);
    read_field(d, "cond_width", cfg.ldm_cfg.arch.cond_width);
    read_field(d, "temb_dim", cfg.ldm_cfg.arch.temb_dim);
    read_field(d, "clip_s", cfg.ldm_cfg.clip_s);
    check_config(cfg.ldm_cfg.cond_drop_prob >= 0 && cfg.ldm_cfg.cond_drop_prob <= 1,
                 "config: ldm.cond_drop_prob must lie in [0,1]");
  }
  cfg.ldm_cfg.seed = cfg.seed;

  if (doc.contains("align")) {
    const json& d = doc.at("align");
    reject_unknown(d, "align",
                   {"steps", "batch", "lr", "warmup", "weight_decay", "base_channels", "cond_width",
                    "temb_dim", "clip_s", "eval_pairs"});
    read_field(d, "steps", cfg.align_cfg.steps);
    read_field(d, "batch", cfg.align_cfg.batch);
    read_field(d, "lr", cfg.align_cfg.lr);
    read_field(d, "warmup", cfg.align_cfg.warmup);
    read_field(d, "weight_decay", cfg.align_cfg.weight_decay);
    read_field(d, "base_channels", cfg.align_cfg.arch.base_channels);
    read_field(d, "cond_width", cfg.align_cfg.arch.cond_width);
    read_field(d, "temb_dim", cfg.align_cfg.arch.temb_dim);
    read_field(d, "clip_s", cfg.align_cfg.clip_s);
    read_field(d, "eval_pairs", cfg.align_cfg.eval_pairs);
  }
  cfg.align_cfg.seed = cfg.seed;

  if (doc.contains("proxy")) {
    const json& d = doc.at("proxy");
    reject_unknown(d, "proxy",
                   {"steps", "batch", "lr", "warmup", "weight_decay", "base_channels", "feature_dim", "clip_s"});
    read_field(d, "steps", cfg.proxy_cfg.steps);
    read_field(d, "batch", cfg.proxy_cfg.batch);
    read_field(d, "lr", cfg.proxy_cfg.lr);
    read_field(d, "warmup", cfg.proxy_cfg.warmup);
    read_field(d, "weight_decay", cfg.proxy_cfg.weight_decay);
    read_field(d, "base_channels", cfg.proxy_cfg.arch.base_channels);
    read_field(d, "feature_dim", cfg.proxy_cfg.arch.feature_dim);
    read_field(d, "clip_s", cfg.proxy_cfg.clip_s);
  }
  cfg.proxy_cfg.seed = cfg.seed;
  cfg.proxy_cfg.arch.classes = cfg.data.format.classes;

  if (doc.contains("sample")) {
    const json& d = doc.at("sample");
    reject_unknown(d, "sample",
                   {"sampler", "sampler_steps", "guidance", "omega", "gamma", "count",
                    "griffin_lim_iterations", "clip_s"});
    read_field(d, "sampler", cfg.sample_cfg.sampler);
    read_field(d, "sampler_steps", cfg.sample_cfg.sampler_steps);
    read_field(d, "guidance", cfg.sample_cfg.guidance);
    read_field(d, "omega", cfg.sample_cfg.omega);
    read_field(d, "gamma", cfg.sample_cfg.gamma);
    read_field(d, "count", cfg.sample_cfg.count);
    read_field(d, "griffin_lim_iterations", cfg.sample_cfg.griffin_lim_iterations);
    read_field(d, "clip_s", cfg.sample_cfg.clip_s);
    samplers::parse_sampler_kind(cfg.sample_cfg.sampler);
    guidance::parse_guidance_mode(cfg.sample_cfg.guidance);
  }

  if (doc.contains("eval")) {
    const json& d = doc.at("eval");
    reject_unknown(d, "eval", {"samples_per_video", "max_videos"});
    read_field(d, "samples_per_video", cfg.eval_cfg.samples_per_video);
    read_field(d, "max_videos", cfg.eval_cfg.max_videos);
  }

  if (doc.contains("paths")) {
    const json& d = doc.at("paths");
    reject_unknown(d, "paths",
                   {"manifest", "cavp", "codec", "ldm", "align_clean", "align_noisy", "proxy", "samples"});
    read_path(d, "manifest", cfg.paths.manifest);
    read_path(d, "cavp", cfg.paths.cavp);
    read_path(d, "codec", cfg.paths.codec);
    read_path(d, "ldm", cfg.paths.ldm);
    read_path(d, "align_clean", cfg.paths.align_clean);
    read_path(d, "align_noisy", cfg.paths.align_noisy);
    read_path(d, "proxy", cfg.paths.proxy);
    read_path(d, "samples", cfg.paths.samples);
  }

  cfg.data.format.validate();
  return cfg;
}

PipelineConfig load_config(const fs::path& path) {
  std::ifstream f(path);
  check_config(f.good(), msg("cannot open config file ", path.string()));
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw ConfigError(msg("malformed config JSON in ", path.string(), ": ", e.what()));
  }
  return parse_config(doc);
}

std::string config_hash(const json& doc) {
  const std::string s = doc.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%08x", static_cast<unsigned>(h & 0xffffffffULL));
  return buf;
}

fs::path make_run_dir(const fs::path& out_root, const std::string& stage, const json& config) {
  const auto now = std::chrono::system_clock::now();
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(now.time_since_epoch()).count();
  char stamp[32];
  std::time_t tt = static_cast<std::time_t>(secs);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  std::strftime(stamp, sizeof(stamp), "%Y%m%dT%H%M%S", &tm);
  fs::path base = out_root / msg(stage, "-", stamp, "-", config_hash(config));
  fs::path dir = base;
  for (int i = 2; fs::exists(dir); ++i) dir = base.concat(msg("-", i));
  std::error_code ec;
  fs::create_directories(dir, ec);
  check_runtime(fs::exists(dir), msg("cannot create run directory ", dir.string()));
  return dir;
}

void write_provenance(const fs::path& run_dir, const json& record) {
  std::ofstream f(run_dir / "provenance.json");
  check_runtime(f.good(), msg("cannot write provenance in ", run_dir.string()));
  f << record.dump(2) << "\n";
}

namespace {

void write_config_echo(const fs::path& dir, const json& raw) {
  std::ofstream f(dir / "config.json");
  check_runtime(f.good(), msg("cannot write config echo in ", dir.string()));
  f << raw.dump(2) << "\n";
}

json base_provenance(const PipelineConfig& cfg, const std::string& stage) {
  return {{"stage", stage}, {"seed", cfg.seed}, {"config_hash", config_hash(cfg.raw)}};
}

synthav::DatasetManifest need_manifest(const PipelineConfig& cfg) {
  check_config(!cfg.paths.manifest.empty(), "config: paths.manifest is required for this stage");
  return synthav::load_manifest(cfg.paths.manifest);
}

}  // namespace

fs::path run_gen_data(const PipelineConfig& cfg) {
  synthav::GenConfig gen = cfg.data;
  const synthav::DatasetManifest manifest = synthav::build_dataset(gen);
  const fs::path dir = make_run_dir(cfg.out_root, "gen-data", cfg.raw);
  write_config_echo(dir, cfg.raw);
  json prov = base_provenance(cfg, "gen-data");
  prov["manifest"] = (manifest.root / "manifest.json").string();
  prov["records"] = manifest.records.size();
  write_provenance(dir, prov);
  return manifest.root / "manifest.json";
}

fs::path run_train_cavp(const PipelineConfig& cfg) {
  const auto manifest = need_manifest(cfg);
  const auto result = cavp::train_cavp(manifest, cfg.cavp_cfg);
  const fs::path dir = make_run_dir(cfg.out_root, "train-cavp", cfg.raw);
  write_config_echo(dir, cfg.raw);
  const fs::path ckpt = dir / "checkpoints" / "cavp";
  result.model.save(ckpt, {{"step", cfg.cavp_cfg.steps}, {"seed", cfg.seed}});
  diffusion::write_train_log(dir / "train_log.jsonl", result.log);
  json prov = base_provenance(cfg, "train-cavp");
  prov["checkpoint"] = ckpt.string();
  write_provenance(dir, prov);
  return ckpt;
}

fs::path run_train_codec(const PipelineConfig& cfg) {
  const auto manifest = need_manifest(cfg);
  const fs::path dir = make_run_dir(cfg.out_root, "train-codec", cfg.raw);
  write_config_echo(dir, cfg.raw);
  const fs::path ckpt = dir / "checkpoints" / "codec";
  if (cfg.codec_cfg.arch.mode == codec::Mode::identity) {
    codec::Codec::identity(manifest.config.format, cfg.codec_cfg.arch.compress)
        .save(ckpt, {{"step", 0}, {"seed", cfg.seed}});
  } else {
    const auto result = codec::train_codec(manifest, cfg.codec_cfg);
    result.codec.save(ckpt, {{"step", cfg.codec_cfg.steps}, {"seed", cfg.seed}});
    std::vector<cavp::TrainLogEntry> log;
    for (size_t i = 0; i < result.losses.size(); ++i)
      log.push_back({static_cast<int>(i), result.losses[i], cfg.codec_cfg.lr});
    diffusion::write_train_log(dir / "train_log.jsonl", log);
  }
  json prov = base_provenance(cfg, "train-codec");
  prov["checkpoint"] = ckpt.string();
  write_provenance(dir, prov);
  return ckpt;
}

fs::path run_train_ldm(const PipelineConfig& cfg, bool finetune) {
  const auto manifest = need_manifest(cfg);
  check_config(!cfg.paths.cavp.empty() && !cfg.paths.codec.empty(),
               "config: paths.cavp and paths.codec are required to train the ldm");
  const auto cavp_model = cavp::CavpModel::from_checkpoint(cfg.paths.cavp);
  const auto codec_model = codec::Codec::from_checkpoint(cfg.paths.codec);
  std::optional<diffusion::DenoiserModel> resume;
  if (finetune) {
    check_config(!cfg.paths.ldm.empty(), "config: paths.ldm is required for finetune");
    resume = diffusion::DenoiserModel::from_checkpoint(cfg.paths.ldm);
  }
  const auto result =
      diffusion::train_ldm(manifest, cavp_model, codec_model, cfg.ldm_cfg, resume ? &*resume : nullptr);
  const fs::path dir = make_run_dir(cfg.out_root, finetune ? "finetune" : "train-ldm", cfg.raw);
  write_config_echo(dir, cfg.raw);
  const fs::path ckpt = dir / "checkpoints" / "ldm";
  result.model.save(ckpt, {{"step", cfg.ldm_cfg.steps}, {"seed", cfg.seed}, {"finetuned", finetune}});
  diffusion::write_train_log(dir / "train_log.jsonl", result.log);
  json prov = base_provenance(cfg, finetune ? "finetune" : "train-ldm");
  prov["checkpoint"] = ckpt.string();
  prov["cavp"] = cfg.paths.cavp.string();
  prov["codec"] = cfg.paths.codec.string();
  if (finetune) prov["resumed_from"] = cfg.paths.ldm.string();
  write_provenance(dir, prov);
  return ckpt;
}

fs::path run_train_align(const PipelineConfig& cfg, bool noisy) {
  const auto manifest = need_manifest(cfg);
  check_config(!cfg.paths.cavp.empty() && !cfg.paths.codec.empty(),
               "config: paths.cavp and paths.codec are required to train the alignment classifier");
  const auto cavp_model = cavp::CavpModel::from_checkpoint(cfg.paths.cavp);
  const auto codec_model = codec::Codec::from_checkpoint(cfg.paths.codec);
  const auto sched = diffusion::make_schedule(diffusion::ScheduleKind::linear_beta, cfg.ldm_cfg.timesteps,
                                              cfg.ldm_cfg.beta_start, cfg.ldm_cfg.beta_end);
  const auto result =
      guidance::train_align_classifier(manifest, cavp_model, codec_model, sched, noisy, cfg.align_cfg);
  const fs::path dir = make_run_dir(cfg.out_root, noisy ? "train-align-noisy" : "train-align", cfg.raw);
  write_config_echo(dir, cfg.raw);
  const fs::path ckpt = dir / "checkpoints" / (noisy ? "align_noisy" : "align_clean");
  result.classifier.save(ckpt, {{"step", cfg.align_cfg.steps}, {"seed", cfg.seed}});
  json prov = base_provenance(cfg, "train-align");
  prov["checkpoint"] = ckpt.string();
  prov["noisy"] = noisy;
  prov["test_accuracy"] = result.test_accuracy;
  write_provenance(dir, prov);
  return ckpt;
}

fs::path run_train_proxy(const PipelineConfig& cfg) {
  const auto manifest = need_manifest(cfg);
  const auto result = metrics::train_proxy(manifest, cfg.proxy_cfg);
  const fs::path dir = make_run_dir(cfg.out_root, "train-proxy", cfg.raw);
  write_config_echo(dir, cfg.raw);
  const fs::path ckpt = dir / "checkpoints" / "proxy";
  result.proxy.save(ckpt, {{"step", cfg.proxy_cfg.steps}, {"seed", cfg.seed}});
  json prov = base_provenance(cfg, "train-proxy");
  prov["checkpoint"] = ckpt.string();
  prov["test_accuracy"] = result.test_accuracy;
  write_provenance(dir, prov);
  return ckpt;
}

SampleRun run_sample(const PipelineConfig& cfg) {
  const auto manifest = need_manifest(cfg);
  check_config(!cfg.paths.cavp.empty() && !cfg.paths.codec.empty() && !cfg.paths.ldm.empty(),
               "config: paths.cavp, paths.codec and paths.ldm are required to sample");
  const auto cavp_model = cavp::CavpModel::from_checkpoint(cfg.paths.cavp);
  const auto codec_model = codec::Codec::from_checkpoint(cfg.paths.codec);
  const auto denoiser = diffusion::DenoiserModel::from_checkpoint(cfg.paths.ldm);

  samplers::GenerateOptions opt;
  opt.guidance.mode = guidance::parse_guidance_mode(cfg.sample_cfg.guidance);
  opt.guidance.omega = cfg.sample_cfg.omega;
  opt.guidance.gamma = cfg.sample_cfg.gamma;
  opt.sampler.kind = samplers::parse_sampler_kind(cfg.sample_cfg.sampler);
  opt.sampler.steps = cfg.sample_cfg.sampler_steps;
  opt.griffin_lim_iterations = cfg.sample_cfg.griffin_lim_iterations;

  std::optional<guidance::AlignClassifier> classifier;
  if (opt.guidance.mode == guidance::GuidanceMode::cg ||
      opt.guidance.mode == guidance::GuidanceMode::double_guidance) {
    check_config(!cfg.paths.align_noisy.empty(),
                 "config: paths.align_noisy is required for cg/double guidance");
    classifier = guidance::AlignClassifier::from_checkpoint(cfg.paths.align_noisy);
  }

  SampleRun run;
  run.dir = make_run_dir(cfg.out_root, "sample", cfg.raw);
  write_config_echo(run.dir, cfg.raw);
  std::error_code ec;
  fs::create_directories(run.dir / "samples", ec);

  const auto records = manifest.split_records("test");
  check_config(!records.empty(), "run_sample: manifest has no test split to condition on");
  const auto& fmt = manifest.config.format;
  const auto clip_frames = static_cast<std::int64_t>(std::llround(cfg.sample_cfg.clip_s * fmt.fps));
  const int count = std::min<int>(cfg.sample_cfg.count, static_cast<int>(records.size()));

  for (int i = 0; i < count; ++i) {
    const auto& rec = *records[static_cast<size_t>(i)];
    const synthav::AVSample sample = synthav::load_sample(manifest, rec);
    const synthav::VideoClip clip = synthav::video_crop(sample.video, 0, clip_frames);
    samplers::GenerateOptions per = opt;
    per.sampler.seed = Rng::stream(cfg.seed, msg("sample/", rec.id)).next_u64();
    const auto result = samplers::generate(clip, cavp_model, codec_model, denoiser, per,
                                           classifier ? &*classifier : nullptr);
    const fs::path wav = run.dir / "samples" / (rec.id + ".wav");
    write_wav(wav, result.waveform);
    Tensor mel_t({result.mel.values.rows(), result.mel.values.cols()});
    mel_t.mat() = result.mel.values;
    write_blob(run.dir / "samples" / (rec.id + ".mel.blob"), mel_t, BlobDtype::f32);
    json rec_json = {{"video_id", rec.id},
                     {"start_frame", 0},
                     {"n_frames", clip_frames},
                     {"guidance", guidance::guidance_mode_name(per.guidance.mode)},
                     {"omega", per.guidance.omega},
                     {"gamma", per.guidance.gamma},
                     {"sampler", samplers::sampler_kind_name(per.sampler.kind)},
                     {"sampler_steps", per.sampler.steps},
                     {"seed", per.sampler.seed},
                     {"checkpoints",
                      {{"cavp", cfg.paths.cavp.string()},
                       {"codec", cfg.paths.codec.string()},
                       {"ldm", cfg.paths.ldm.string()}}}};
    std::ofstream rf(run.dir / "samples" / (rec.id + ".json"));
    rf << rec_json.dump(2) << "\n";
    run.wav_paths.push_back(wav);
  }
  json prov = base_provenance(cfg, "sample");
  prov["samples"] = (run.dir / "samples").string();
  prov["count"] = count;
  write_provenance(run.dir, prov);
  return run;
}

metrics::MetricReport run_evaluate(const PipelineConfig& cfg) {
  const auto manifest = need_manifest(cfg);
  check_config(!cfg.paths.samples.empty(), "config: paths.samples (a sample run dir) is required to evaluate");
  check_config(!cfg.paths.cavp.empty() && !cfg.paths.codec.empty() && !cfg.paths.align_clean.empty() &&
                   !cfg.paths.proxy.empty(),
               "config: paths.cavp, paths.codec, paths.align_clean and paths.proxy are required to evaluate");
  const auto cavp_model = cavp::CavpModel::from_checkpoint(cfg.paths.cavp);
  const auto codec_model = codec::Codec::from_checkpoint(cfg.paths.codec);
  const auto clean = guidance::AlignClassifier::from_checkpoint(cfg.paths.align_clean);
  const auto proxy = metrics::ProxyClassifier::from_checkpoint(cfg.paths.proxy);
  const auto& fmt = manifest.config.format;

  std::vector<std::pair<dsp::MelSpec, synthav::VideoClip>> generated;
  std::vector<dsp::MelSpec> gen_mels, real_mels;
  for (const auto& entry : fs::directory_iterator(cfg.paths.samples / "samples")) {
    if (entry.path().extension() != ".json") continue;
    std::ifstream f(entry.path());
    json rec;
    f >> rec;
    const std::string id = rec.at("video_id").get<std::string>();
    const std::int64_t f0 = rec.at("start_frame").get<std::int64_t>();
    const std::int64_t n = rec.at("n_frames").get<std::int64_t>();
    const synthav::ManifestRecord* mrec = nullptr;
    for (const auto& r : manifest.records)
      if (r.id == id) mrec = &r;
    check_runtime(mrec != nullptr, msg("evaluate: sample record references unknown video id '", id, "'"));
    const synthav::AVSample sample = synthav::load_sample(manifest, *mrec);

    const Tensor mel_t = read_blob(cfg.paths.samples / "samples" / (id + ".mel.blob"));
    dsp::MelSpec mel;
    mel.values = mel_t.mat();
    mel.mel_basis = fmt.mel_bins;
    mel.fft_size = fmt.fft_size;
    mel.hop_size = fmt.hop_ldm;
    mel.sample_rate = fmt.sample_rate;
    mel.floor = fmt.mel_floor;

    generated.emplace_back(mel, synthav::video_crop(sample.video, f0, n));
    gen_mels.push_back(mel);
    real_mels.push_back(synthav::mel_for_frames(sample, f0, n, synthav::Stage::ldm, fmt));
  }
  check_config(!generated.empty(), msg("evaluate: no sample records found under ", cfg.paths.samples.string()));

  metrics::MetricReport report;
  report.align_acc = metrics::align_accuracy(generated, clean, codec_model, cavp_model);
  report.is_score = metrics::inception_score(gen_mels, proxy);
  report.fid = metrics::fid_score(real_mels, gen_mels, proxy);
  report.mkl = metrics::mkl_score(real_mels, gen_mels, proxy);
  report.provenance = base_provenance(cfg, "evaluate");
  report.provenance["samples"] = cfg.paths.samples.string();

  const fs::path dir = make_run_dir(cfg.out_root, "evaluate", cfg.raw);
  write_config_echo(dir, cfg.raw);
  metrics::write_metric_report(dir / "metrics.json", report);
  write_provenance(dir, report.provenance);
  std::cout << metrics::format_metric_table({{cfg.sample_cfg.guidance, report}});
  return report;
}

}  // namespace foley::pipeline
