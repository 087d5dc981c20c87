#pragma once

#include <filesystem>
#include <optional>

#include "foley/evalmetrics.hpp"
#include "foley/samplers.hpp"

namespace foley::pipeline {

struct SampleStageConfig {
  std::string sampler = "dpm2";
  int sampler_steps = 25;
  std::string guidance = "double";
  double omega = 4.5;
  double gamma = 8.0;
  int count = 8;
  int griffin_lim_iterations = 48;
  double clip_s = 8.0;
};

struct EvalStageConfig {
  int samples_per_video = 1;
  int max_videos = 24;
};

struct StagePaths {
  std::filesystem::path manifest;
  std::filesystem::path cavp;
  std::filesystem::path codec;
  std::filesystem::path ldm;
  std::filesystem::path align_clean;
  std::filesystem::path align_noisy;
  std::filesystem::path proxy;
  std::filesystem::path samples;  // sample run directory, input of evaluate
};

/// One JSON document configures every stage; unknown keys are rejected before
/// anything runs.
struct PipelineConfig {
  std::uint64_t seed = 1234;
  std::filesystem::path out_root = "runs";
  synthav::GenConfig data;
  cavp::CavpTrainConfig cavp_cfg;
  codec::CodecTrainConfig codec_cfg;
  diffusion::LdmTrainConfig ldm_cfg;
  guidance::AlignTrainConfig align_cfg;
  metrics::ProxyTrainConfig proxy_cfg;
  SampleStageConfig sample_cfg;
  EvalStageConfig eval_cfg;
  StagePaths paths;
  nlohmann::json raw;
};

PipelineConfig parse_config(const nlohmann::json& doc);
PipelineConfig load_config(const std::filesystem::path& path);

std::string config_hash(const nlohmann::json& doc);
/// runs/<stage>-<utc timestamp>-<config hash>[-n]
std::filesystem::path make_run_dir(const std::filesystem::path& out_root, const std::string& stage,
                                   const nlohmann::json& config);
void write_provenance(const std::filesystem::path& run_dir, const nlohmann::json& record);

// Stage entry points shared by the CLI and the acceptance suite. Each writes a
// run directory under out_root and returns the artifact path.
std::filesystem::path run_gen_data(const PipelineConfig& cfg);
std::filesystem::path run_train_cavp(const PipelineConfig& cfg);
std::filesystem::path run_train_codec(const PipelineConfig& cfg);
std::filesystem::path run_train_ldm(const PipelineConfig& cfg, bool finetune = false);
std::filesystem::path run_train_align(const PipelineConfig& cfg, bool noisy);
std::filesystem::path run_train_proxy(const PipelineConfig& cfg);

struct SampleRun {
  std::filesystem::path dir;
  std::vector<std::filesystem::path> wav_paths;
};

SampleRun run_sample(const PipelineConfig& cfg);
metrics::MetricReport run_evaluate(const PipelineConfig& cfg);

}  // namespace foley::pipeline
