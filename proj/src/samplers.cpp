#include "foley/samplers.hpp"

#include <cmath>

namespace foley::samplers {

void SamplerSpec::validate(const NoiseSchedule& sched) const {
  check_config(steps >= 1 && steps <= sched.timesteps,
               msg("SamplerSpec: steps=", steps, " outside [1, T=", sched.timesteps, "]"));
  if (kind == SamplerKind::plms) check_config(steps >= 4, "SamplerSpec: plms needs steps >= 4 for its warmup");
  if (kind == SamplerKind::dpm2) check_config(steps >= 2, "SamplerSpec: dpm2 needs steps >= 2");
}

SamplerKind parse_sampler_kind(const std::string& name) {
  if (name == "ancestral") return SamplerKind::ancestral;
  if (name == "ddim") return SamplerKind::ddim;
  if (name == "plms") return SamplerKind::plms;
  if (name == "dpm2") return SamplerKind::dpm2;
  throw ConfigError(msg("unknown sampler '", name, "' (expected ancestral|ddim|plms|dpm2)"));
}

std::string sampler_kind_name(SamplerKind kind) {
  switch (kind) {
    case SamplerKind::ancestral: return "ancestral";
    case SamplerKind::ddim: return "ddim";
    case SamplerKind::plms: return "plms";
    case SamplerKind::dpm2: return "dpm2";
  }
  return "?";
}

Latent ancestral_step(const Latent& z_t, int t, const Latent& eps_hat, const NoiseSchedule& sched,
                      const Latent& noise) {
  check_config(t >= 1 && t <= sched.timesteps, msg("ancestral_step: t=", t, " outside [1, ", sched.timesteps, "]"));
  check_same_shape(z_t, eps_hat, "ancestral_step");
  const double a = sched.alpha[static_cast<size_t>(t)];
  const double coeff = (1.0 - a) / sched.sqrt_1m_ab(t);
  Latent z(z_t.shape());
  z.vec() = (z_t.vec() - coeff * eps_hat.vec()) / std::sqrt(a);
  if (t > 1) {
    check_same_shape(z_t, noise, "ancestral_step noise");
    z.vec() += std::sqrt(sched.posterior_var[static_cast<size_t>(t)]) * noise.vec();
  }
  return z;
}

Latent ddim_step(const Latent& z_t, int t, int t_prev, const Latent& eps_hat, const NoiseSchedule& sched) {
  check_config(t >= 1 && t <= sched.timesteps, msg("ddim_step: t=", t, " outside [1, ", sched.timesteps, "]"));
  check_config(t_prev >= 0 && t_prev < t, msg("ddim_step: need 0 <= t_prev < t, got t_prev=", t_prev, ", t=", t));
  check_same_shape(z_t, eps_hat, "ddim_step");
  Latent z0(z_t.shape());
  z0.vec() = (z_t.vec() - sched.sqrt_1m_ab(t) * eps_hat.vec()) / sched.sqrt_ab(t);
  Latent z(z_t.shape());
  z.vec() = sched.sqrt_ab(t_prev) * z0.vec() + sched.sqrt_1m_ab(t_prev) * eps_hat.vec();
  return z;
}

Latent ancestral_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, Rng& rng) {
  Latent z = z_terminal;
  for (int t = sched.timesteps; t >= 1; --t) {
    const Latent eps = score(z, t);
    const Latent noise = t > 1 ? rng.normal_tensor(z.shape()) : Latent{};
    z = ancestral_step(z, t, eps, sched, noise);
  }
  return z;
}

std::vector<int> timestep_ladder_uniform(const NoiseSchedule& sched, int count) {
  check_config(count >= 1 && count <= sched.timesteps, "timestep ladder: bad step count");
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    int t = static_cast<int>(std::llround(static_cast<double>(sched.timesteps) *
                                          static_cast<double>(count - i) / count));
    t = std::max(1, std::min(sched.timesteps, t));
    if (!ts.empty() && t >= ts.back()) t = ts.back() - 1;
    check_config(t >= 1, "timestep ladder: step count too dense");
    ts.push_back(t);
  }
  ts.front() = sched.timesteps;
  ts.back() = 1;
  return ts;
}

namespace {

double log_snr(const NoiseSchedule& sched, int t) {
  const double ab = sched.alpha_bar[static_cast<size_t>(t)];
  return 0.5 * std::log(ab / (1.0 - ab));
}

}  // namespace

std::vector<int> timestep_ladder_logsnr(const NoiseSchedule& sched, int count) {
  check_config(count >= 1 && count <= sched.timesteps, "timestep ladder: bad step count");
  const double l_start = log_snr(sched, sched.timesteps);
  const double l_end = log_snr(sched, 1);
  std::vector<int> ts;
  ts.reserve(static_cast<size_t>(count));
  int prev = sched.timesteps + 1;
  for (int i = 0; i < count; ++i) {
    const double target =
        count == 1 ? l_end : l_start + (l_end - l_start) * static_cast<double>(i) / (count - 1);
    int best = 1;
    double best_d = 1e300;
    for (int t = 1; t <= sched.timesteps; ++t) {  // T is small; scan is fine
      const double d = std::abs(log_snr(sched, t) - target);
      if (d < best_d) {
        best_d = d;
        best = t;
      }
    }
    // stay strictly decreasing while leaving room for the remaining entries
    best = std::min(prev - 1, std::max(best, count - i));
    ts.push_back(best);
    prev = best;
  }
  ts.front() = sched.timesteps;
  ts.back() = 1;
  return ts;
}

Latent ddim_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps) {
  const std::vector<int> ts = timestep_ladder_uniform(sched, steps);
  Latent z = z_terminal;
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    z = ddim_step(z, t, t_prev, score(z, t), sched);
  }
  return z;
}

Latent plms_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps) {
  check_config(steps >= 4, "plms_run: needs steps >= 4");
  const std::vector<int> ts = timestep_ladder_uniform(sched, steps);
  Latent z = z_terminal;
  std::vector<Latent> hist;  // most recent first
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const int t_prev = i + 1 < ts.size() ? ts[i + 1] : 0;
    const Latent eps = score(z, t);
    Latent eff(eps.shape());
    if (hist.empty()) {
      eff = eps;
    } else if (hist.size() == 1) {
      eff.vec() = (3.0 * eps.vec() - hist[0].vec()) / 2.0;
    } else if (hist.size() == 2) {
      eff.vec() = (23.0 * eps.vec() - 16.0 * hist[0].vec() + 5.0 * hist[1].vec()) / 12.0;
    } else {
      eff.vec() =
          (55.0 * eps.vec() - 59.0 * hist[0].vec() + 37.0 * hist[1].vec() - 9.0 * hist[2].vec()) / 24.0;
    }
    z = ddim_step(z, t, t_prev, eff, sched);
    hist.insert(hist.begin(), eps);
    if (hist.size() > 3) hist.pop_back();
  }
  return z;
}

Latent dpm2_run(const Latent& z_terminal, const ScoreFn& score, const NoiseSchedule& sched, int steps) {
  check_config(steps >= 2, "dpm2_run: needs steps >= 2");
  const std::vector<int> ts = timestep_ladder_logsnr(sched, steps);
  const auto a_hat = [&](int t) { return sched.sqrt_ab(t); };
  const auto s_hat = [&](int t) { return sched.sqrt_1m_ab(t); };

  Latent z = z_terminal;
  Latent eps_prev;
  double h_prev = 0;
  for (size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i];
    const double lam = log_snr(sched, t);
    const Latent eps = score(z, t);
    if (i + 1 == ts.size()) {
      // transfer to t = 0: limit of the first-order update equals the clean estimate
      Latent z0(z.shape());
      z0.vec() = (z.vec() - s_hat(t) * eps.vec()) / a_hat(t);
      return z0;
    }
    const int t_next = ts[i + 1];
    const double lam_next = log_snr(sched, t_next);
    const double h = lam_next - lam;
    Latent d(eps.shape());
    if (!eps_prev.empty() && h_prev > 0) {
      const double r = h_prev / h;
      d.vec() = eps.vec() + (1.0 / (2.0 * r)) * (eps.vec() - eps_prev.vec());
    } else {
      d = eps;
    }
    Latent z_next(z.shape());
    z_next.vec() = (a_hat(t_next) / a_hat(t)) * z.vec() - s_hat(t_next) * std::expm1(h) * d.vec();
    z = std::move(z_next);
    eps_prev = eps;
    h_prev = h;
  }
  return z;
}

ScoreFn guided_score(const diffusion::DenoiserModel& model, const MatrixXd& cond,
                     const guidance::GuidanceConfig& cfg, const guidance::AlignClassifier* classifier) {
  using guidance::GuidanceMode;
  if (cfg.mode == GuidanceMode::cg || cfg.mode == GuidanceMode::double_guidance)
    check_config(classifier != nullptr, "guided_score: cg/double guidance needs an alignment classifier");
  const MatrixXd cond_copy = cond;
  const auto* clf = classifier;
  return [&model, cond_copy, cfg, clf](const Latent& z, int t) -> Latent {
    const Latent eps_cond = model.predict_eps(z, t, &cond_copy);
    switch (cfg.mode) {
      case GuidanceMode::none:
        return eps_cond;
      case GuidanceMode::cfg: {
        const Latent eps_uncond = model.predict_eps(z, t, nullptr, cond_copy.rows());
        return guidance::cfg_noise(eps_cond, eps_uncond, cfg.omega);
      }
      case GuidanceMode::cg: {
        const Latent g = guidance::align_grad(z, t, cond_copy, *clf);
        Latent out = eps_cond;
        out.vec() -= cfg.gamma * model.schedule.sqrt_1m_ab(t) * g.vec();
        return out;
      }
      case GuidanceMode::double_guidance: {
        const Latent eps_uncond = model.predict_eps(z, t, nullptr, cond_copy.rows());
        const Latent g = guidance::align_grad(z, t, cond_copy, *clf);
        return guidance::double_guidance_noise(eps_cond, eps_uncond, g, cfg.omega, cfg.gamma,
                                               model.schedule.alpha_bar[static_cast<size_t>(t)]);
      }
    }
    return eps_cond;
  };
}

GenerateResult generate(const synthav::VideoClip& video, const cavp::CavpModel& cavp_model,
                        const codec::Codec& codec, const diffusion::DenoiserModel& denoiser,
                        const GenerateOptions& options, const guidance::AlignClassifier* classifier) {
  const auto& sched = denoiser.schedule;
  options.sampler.validate(sched);
  check_config(video.frame_count() >= 1, "generate: empty video clip");

  const MatrixXd cond = cavp::encode_video(video, cavp_model).values;
  check_config(cond.cols() == denoiser.arch.cond_input,
               msg("generate: CAVP feature width ", cond.cols(), " but the denoiser expects ",
                   denoiser.arch.cond_input));

  const std::int64_t spf = synthav::frames_per_video_frame(codec.fmt, synthav::Stage::ldm);
  const std::int64_t mel_rows = video.frame_count() * spf;
  const int r = codec.arch.compress;
  check_config(mel_rows % r == 0 && codec.fmt.mel_bins % r == 0,
               "generate: clip length incompatible with the codec compress rate");
  const Shape latent_shape{codec.arch.latent_channels, mel_rows / r, codec.fmt.mel_bins / r};

  Rng rng = Rng::stream(options.sampler.seed, "sample/noise");
  Latent z_terminal = rng.normal_tensor(latent_shape);
  const ScoreFn score = guided_score(denoiser, cond, options.guidance, classifier);

  Latent z0;
  switch (options.sampler.kind) {
    case SamplerKind::ancestral: {
      Rng noise_rng = Rng::stream(options.sampler.seed, "sample/ancestral");
      z0 = ancestral_run(z_terminal, score, sched, noise_rng);
      break;
    }
    case SamplerKind::ddim:
      z0 = ddim_run(z_terminal, score, sched, options.sampler.steps);
      break;
    case SamplerKind::plms:
      z0 = plms_run(z_terminal, score, sched, options.sampler.steps);
      break;
    case SamplerKind::dpm2:
      z0 = dpm2_run(z_terminal, score, sched, options.sampler.steps);
      break;
  }

  GenerateResult result;
  result.latent = z0;
  result.mel = codec::decode(z0, codec);
  result.waveform =
      dsp::griffin_lim(result.mel, options.griffin_lim_iterations, options.sampler.seed ^ 0x9e3779b9ULL);
  dsp::peak_normalize(result.waveform);
  return result;
}

}  // namespace foley::samplers
