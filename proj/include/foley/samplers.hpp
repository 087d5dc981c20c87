#pragma once

#include <functional>
#include <optional>

#include "foley/guidance.hpp"

namespace foley::samplers {

using codec::Latent;
using diffusion::NoiseSchedule;

enum class SamplerKind { ancestral, ddim, plms, dpm2 };

struct SamplerSpec {
  SamplerKind kind = SamplerKind::dpm2;
  int steps = 25;
  std::uint64_t seed = 0;

  void validate(const NoiseSchedule& sched) const;
};

SamplerKind parse_sampler_kind(const std::string& name);
std::string sampler_kind_name(SamplerKind kind);

/// Noise estimate consumed by every integrator: (z_t, t) -> eps_hat of the same shape.
using ScoreFn = std::function<Latent(const Latent&, int)>;

/// One ancestral update: z_{t-1} = mu_theta(z_t, t) + sigma_t * noise, with
/// mu_theta = (z_t - (1-alpha_t)/sqrt(1-alpha_bar_t) eps_hat) / sqrt(alpha_t).
/// sigma_1 = 0, so the injected noise vanishes at the last step.
Latent ancestral_step(const Latent& z_t, int t, const Latent& eps_hat, const NoiseSchedule& sched,
                      const Latent& noise);

/// Deterministic DDIM update t -> t_prev (eta = 0); t_prev = 0 lands on the
/// predicted clean latent.
Latent ddim_step(const Latent& z_t, int t, int t_prev, const Latent& eps_hat, const NoiseSchedule& sched);

Latent ancestral_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, Rng& rng);
Latent ddim_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps);
/// Pseudo-linear multistep (Adams-Bashforth ramp over eps history, DDIM transfer).
Latent plms_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps);
/// Second-order multistep exponential integrator in log-SNR time.
Latent dpm2_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps);

/// Timestep ladder from T down to 1, uniform in t (ddim/plms) or uniform in
/// log-SNR (dpm2); `count` entries, strictly decreasing.
std::vector<int> timestep_ladder_uniform(const NoiseSchedule& sched, int count);
std::vector<int> timestep_ladder_logsnr(const NoiseSchedule& sched, int count);

/// Guidance-modified score around a denoiser: substitutes the combined noise
/// estimate wherever a sampler consumes eps. The classifier is required for
/// cg/double modes.
ScoreFn guided_score(const diffusion::DenoiserModel& model, const MatrixXd& cond,
                     const guidance::GuidanceConfig& cfg, const guidance::AlignClassifier* classifier);

struct GenerateResult {
  Waveform waveform;
  dsp::MelSpec mel;
  Latent latent;
};

struct GenerateOptions {
  guidance::GuidanceConfig guidance;
  SamplerSpec sampler;
  int griffin_lim_iterations = 48;
};

/// Full conditional reverse process: CAVP video features -> guided sampling in
/// latent space -> decoded mel -> Griffin-Lim waveform. Deterministic given the
/// sampler seed.
GenerateResult generate(const synthav::VideoClip& video, const cavp::CavpModel& cavp_model,
                        const codec::Codec& codec, const diffusion::DenoiserModel& denoiser,
                        const GenerateOptions& options,
                        const guidance::AlignClassifier* classifier = nullptr);

}  // namespace foley::samplers
