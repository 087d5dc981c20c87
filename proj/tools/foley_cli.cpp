// Command-line front end: one subcommand per pipeline stage, one JSON config
// for everything, targeted flag overrides. Exit code 1 = configuration error,
// 2 = runtime failure.
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "foley/pipeline.hpp"

namespace {

using foley::pipeline::PipelineConfig;
using nlohmann::json;

struct CliOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> steps;
  std::optional<double> omega;
  std::optional<double> gamma;
  std::optional<std::string> sampler;
  std::optional<int> sampler_steps;
  std::optional<std::string> guidance;
  bool noisy = false;
};

void add_common(CLI::App* cmd, CliOptions& opt, bool with_steps = true) {
  cmd->add_option("--config", opt.config_path, "pipeline config JSON")->required();
  cmd->add_option("--seed", opt.seed, "override the global seed");
  cmd->add_option("--out", opt.out, "override the output root directory");
  if (with_steps) cmd->add_option("--steps", opt.steps, "override this stage's training step count");
}

json load_raw(const std::string& path) {
  std::ifstream f(path);
  foley::check_config(f.good(), foley::msg("cannot open config file ", path));
  json doc;
  try {
    f >> doc;
  } catch (const json::exception& e) {
    throw foley::ConfigError(foley::msg("malformed config JSON in ", path, ": ", e.what()));
  }
  return doc;
}

PipelineConfig effective_config(const CliOptions& opt, const std::string& stage_key) {
  json doc = load_raw(opt.config_path);
  if (opt.seed) doc["seed"] = *opt.seed;
  if (opt.out) doc["out_root"] = *opt.out;
  if (opt.steps && !stage_key.empty()) doc[stage_key]["steps"] = *opt.steps;
  if (opt.omega) doc["sample"]["omega"] = *opt.omega;
  if (opt.gamma) doc["sample"]["gamma"] = *opt.gamma;
  if (opt.sampler) doc["sample"]["sampler"] = *opt.sampler;
  if (opt.sampler_steps) doc["sample"]["sampler_steps"] = *opt.sampler_steps;
  if (opt.guidance) doc["sample"]["guidance"] = *opt.guidance;
  return foley::pipeline::parse_config(doc);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale synchronized video-to-audio pipeline"};
  app.require_subcommand(1);

  CliOptions opt;
  auto* gen = app.add_subcommand("gen-data", "generate the synthetic audio-visual dataset");
  add_common(gen, opt, false);
  auto* cavp_cmd = app.add_subcommand("train-cavp", "stage-1 contrastive audio-visual pretraining");
  add_common(cavp_cmd, opt);
  auto* codec_cmd = app.add_subcommand("train-codec", "train the mel latent codec");
  add_common(codec_cmd, opt);
  auto* ldm_cmd = app.add_subcommand("train-ldm", "stage-2 latent diffusion training");
  add_common(ldm_cmd, opt);
  auto* align_cmd = app.add_subcommand("train-align", "train the alignment classifier");
  add_common(align_cmd, opt);
  align_cmd->add_flag("--noisy", opt.noisy, "train the noisy (z_t, t) variant used for guidance");
  auto* proxy_cmd = app.add_subcommand("train-proxy", "train the metric proxy classifier");
  add_common(proxy_cmd, opt);
  auto* sample_cmd = app.add_subcommand("sample", "generate audio for held-out videos");
  add_common(sample_cmd, opt, false);
  sample_cmd->add_option("--omega", opt.omega, "CFG scale");
  sample_cmd->add_option("--gamma", opt.gamma, "CG scale");
  sample_cmd->add_option("--sampler", opt.sampler, "ancestral|ddim|plms|dpm2");
  sample_cmd->add_option("--sampler-steps", opt.sampler_steps, "inference step count");
  sample_cmd->add_option("--guidance", opt.guidance, "none|cfg|cg|double");
  auto* eval_cmd = app.add_subcommand("evaluate", "score a sample run directory");
  add_common(eval_cmd, opt, false);
  auto* finetune_cmd = app.add_subcommand("finetune", "resume ldm training on a second dataset");
  add_common(finetune_cmd, opt);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    namespace pl = foley::pipeline;
    if (gen->parsed()) {
      std::cout << pl::run_gen_data(effective_config(opt, "")).string() << "\n";
    } else if (cavp_cmd->parsed()) {
      std::cout << pl::run_train_cavp(effective_config(opt, "cavp")).string() << "\n";
    } else if (codec_cmd->parsed()) {
      std::cout << pl::run_train_codec(effective_config(opt, "codec")).string() << "\n";
    } else if (ldm_cmd->parsed()) {
      std::cout << pl::run_train_ldm(effective_config(opt, "ldm")).string() << "\n";
    } else if (align_cmd->parsed()) {
      std::cout << pl::run_train_align(effective_config(opt, "align"), opt.noisy).string() << "\n";
    } else if (proxy_cmd->parsed()) {
      std::cout << pl::run_train_proxy(effective_config(opt, "proxy")).string() << "\n";
    } else if (sample_cmd->parsed()) {
      std::cout << pl::run_sample(effective_config(opt, "")).dir.string() << "\n";
    } else if (eval_cmd->parsed()) {
      pl::run_evaluate(effective_config(opt, ""));
    } else if (finetune_cmd->parsed()) {
      std::cout << pl::run_train_ldm(effective_config(opt, "ldm"), /*finetune=*/true).string() << "\n";
    }
  } catch (const foley::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
