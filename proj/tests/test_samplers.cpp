#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "foley/samplers.hpp"

using namespace foley;
using namespace foley::samplers;
using diffusion::make_schedule;
using diffusion::NoiseSchedule;
using diffusion::ScheduleKind;

namespace {

NoiseSchedule oracle_schedule() { return make_schedule(ScheduleKind::linear_beta, 250, 1e-4, 2e-2); }

// Analytic score for data ~ N(0, s^2 I): the optimal noise estimate is
// z * sqrt(1-ab_t) / (ab_t s^2 + 1 - ab_t).
ScoreFn gaussian_oracle(const NoiseSchedule& sched, double s) {
  const double s2 = s * s;
  return [&sched, s2](const codec::Latent& z, int t) {
    const double ab = sched.alpha_bar[static_cast<size_t>(t)];
    codec::Latent out(z.shape());
    out.vec() = (std::sqrt(1.0 - ab) / (ab * s2 + 1.0 - ab)) * z.vec();
    return out;
  };
}

double terminal_variance(const NoiseSchedule& sched, const ScoreFn& score, SamplerKind kind, int steps,
                         int runs, std::uint64_t seed, int dim = 4) {
  Rng init(seed);
  Rng anc(seed ^ 0x1234567ULL);
  double sq = 0, sum = 0;
  for (int r = 0; r < runs; ++r) {
    const codec::Latent z_t = init.normal_tensor({dim});
    codec::Latent z0;
    switch (kind) {
      case SamplerKind::ancestral: z0 = ancestral_run(z_t, score, sched, anc); break;
      case SamplerKind::ddim: z0 = ddim_run(z_t, score, sched, steps); break;
      case SamplerKind::plms: z0 = plms_run(z_t, score, sched, steps); break;
      case SamplerKind::dpm2: z0 = dpm2_run(z_t, score, sched, steps); break;
    }
    for (int d = 0; d < dim; ++d) {
      sum += z0.flat(d);
      sq += z0.flat(d) * z0.flat(d);
    }
  }
  const double n = static_cast<double>(runs) * dim;
  const double mean = sum / n;
  return sq / n - mean * mean;
}

}  // namespace

TEST_CASE("ancestral step with zero prediction and zero noise divides by sqrt(alpha)") {
  const NoiseSchedule sched = oracle_schedule();
  Rng rng(1);
  const codec::Latent z = rng.normal_tensor({3, 2});
  const codec::Latent zero = Tensor::zeros({3, 2});
  const codec::Latent next = ancestral_step(z, 100, zero, sched, zero);
  codec::Latent expect(z.shape());
  expect.vec() = z.vec() / std::sqrt(sched.alpha[100]);
  CHECK(bit_equal(next, expect));
}

TEST_CASE("posterior variance table equals the closed form to 1e-12") {
  const NoiseSchedule sched = oracle_schedule();
  for (int t = 2; t <= sched.timesteps; ++t) {
    const double expect = (1.0 - sched.alpha_bar[static_cast<size_t>(t - 1)]) /
                          (1.0 - sched.alpha_bar[static_cast<size_t>(t)]) *
                          (1.0 - sched.alpha[static_cast<size_t>(t)]);
    CHECK(std::abs(sched.posterior_var[static_cast<size_t>(t)] - expect) <= 1e-12);
  }
}

TEST_CASE("no noise is injected at t=1") {
  const NoiseSchedule sched = oracle_schedule();
  Rng rng(2);
  const codec::Latent z = rng.normal_tensor({4});
  const codec::Latent eps = rng.normal_tensor({4});
  const codec::Latent huge = Tensor::full({4}, 1e9);
  const codec::Latent a = ancestral_step(z, 1, eps, sched, huge);
  const codec::Latent b = ancestral_step(z, 1, eps, sched, Tensor::zeros({4}));
  CHECK(bit_equal(a, b));
}

TEST_CASE("ddim with zero prediction scales by sqrt(ab ratio)") {
  const NoiseSchedule sched = oracle_schedule();
  Rng rng(3);
  const codec::Latent z = rng.normal_tensor({5});
  const codec::Latent zero = Tensor::zeros({5});
  const codec::Latent out = ddim_step(z, 120, 60, zero, sched);
  codec::Latent expect(z.shape());
  expect.vec() = std::sqrt(sched.alpha_bar[60] / sched.alpha_bar[120]) * z.vec();
  CHECK(max_abs_diff(out, expect) <= 1e-15);
}

TEST_CASE("ddim inverts the forward map exactly with the true noise") {
  const NoiseSchedule sched = oracle_schedule();
  Rng rng(4);
  const codec::Latent z0 = rng.normal_tensor({6});
  const codec::Latent eps = rng.normal_tensor({6});
  const int t = 200;
  const codec::Latent zt = diffusion::forward_sample(z0, t, eps, sched);
  const codec::Latent rec = ddim_step(zt, t, 0, eps, sched);
  CHECK(max_abs_diff(rec, z0) <= 1e-12);
}

TEST_CASE("ddim ordering violations are rejected") {
  const NoiseSchedule sched = oracle_schedule();
  Rng rng(5);
  const codec::Latent z = rng.normal_tensor({4});
  CHECK_THROWS_AS(ddim_step(z, 10, 10, z, sched), ConfigError);
  CHECK_THROWS_AS(ddim_step(z, 10, 20, z, sched), ConfigError);
}

TEST_CASE("ddim_run at steps=T reproduces the manual per-step chain bit-exactly") {
  const NoiseSchedule sched = make_schedule(ScheduleKind::linear_beta, 40, 1e-4, 2e-2);
  const ScoreFn score = gaussian_oracle(sched, 0.7);
  Rng rng(6);
  const codec::Latent z_t = rng.normal_tensor({4});
  const codec::Latent fast = ddim_run(z_t, score, sched, 40);
  codec::Latent z = z_t;
  for (int t = 40; t >= 1; --t) z = ddim_step(z, t, t - 1, score(z, t), sched);
  CHECK(bit_equal(fast, z));
}

TEST_CASE("deterministic samplers are bit-identical across runs") {
  const NoiseSchedule sched = oracle_schedule();
  const ScoreFn score = gaussian_oracle(sched, 0.8);
  Rng rng(7);
  const codec::Latent z_t = rng.normal_tensor({4});
  CHECK(bit_equal(ddim_run(z_t, score, sched, 50), ddim_run(z_t, score, sched, 50)));
  CHECK(bit_equal(plms_run(z_t, score, sched, 50), plms_run(z_t, score, sched, 50)));
  CHECK(bit_equal(dpm2_run(z_t, score, sched, 25), dpm2_run(z_t, score, sched, 25)));
}

TEST_CASE("step-count contracts are enforced") {
  const NoiseSchedule sched = oracle_schedule();
  SamplerSpec spec;
  spec.kind = SamplerKind::plms;
  spec.steps = 3;
  CHECK_THROWS_AS(spec.validate(sched), ConfigError);
  spec.kind = SamplerKind::dpm2;
  spec.steps = 1;
  CHECK_THROWS_AS(spec.validate(sched), ConfigError);
  spec.steps = 500;
  CHECK_THROWS_AS(spec.validate(sched), ConfigError);
}

TEST_CASE("gaussian oracle: every sampler hits the data variance within 5 percent") {
  const NoiseSchedule sched = oracle_schedule();
  const double s = 0.8;
  const ScoreFn score = gaussian_oracle(sched, s);
  const int runs = 10000;

  const double v_anc = terminal_variance(sched, score, SamplerKind::ancestral, 250, runs, 100);
  const double v_ddim = terminal_variance(sched, score, SamplerKind::ddim, 250, runs, 200);
  const double v_plms = terminal_variance(sched, score, SamplerKind::plms, 250, runs, 300);
  const double v_dpm = terminal_variance(sched, score, SamplerKind::dpm2, 25, runs, 400);

  CHECK(std::abs(v_anc - s * s) / (s * s) <= 0.05);
  CHECK(std::abs(v_ddim - s * s) / (s * s) <= 0.05);
  CHECK(std::abs(v_plms - s * s) / (s * s) <= 0.05);
  CHECK(std::abs(v_dpm - s * s) / (s * s) <= 0.05);
  // 25-step dpm2 agrees with 250-step ddim within 2 percent
  CHECK(std::abs(v_dpm - v_ddim) / v_ddim <= 0.02);
}

TEST_CASE("dpm2 flow-gain error decreases monotonically in step count") {
  // The oracle flow is linear, so each deterministic sampler is a pure gain on
  // z_T; the exact gain transports the terminal marginal to the data marginal:
  // g = s / sqrt(ab_T s^2 + 1 - ab_T).
  const NoiseSchedule sched = oracle_schedule();
  const double s = 0.8;
  const ScoreFn score = gaussian_oracle(sched, s);
  const double ab_t = sched.alpha_bar[static_cast<size_t>(sched.timesteps)];
  const double exact_gain = s / std::sqrt(ab_t * s * s + 1.0 - ab_t);

  const codec::Latent unit = Tensor::full({1}, 1.0);
  double prev_err = 1e300;
  for (int steps : {10, 25, 50, 250}) {
    const double gain = dpm2_run(unit, score, sched, steps).flat(0);
    const double err = std::abs(gain - exact_gain);
    CHECK(err < prev_err);
    prev_err = err;
  }
  CHECK(prev_err <= 1e-4);  // 250-step gain sits on the exact flow
}

TEST_CASE("wrapping the oracle score in cfg with omega=1 changes nothing bit-exactly") {
  const NoiseSchedule sched = oracle_schedule();
  const ScoreFn score = gaussian_oracle(sched, 0.8);
  const ScoreFn wrapped = [&](const codec::Latent& z, int t) {
    const codec::Latent eps = score(z, t);
    codec::Latent fake_uncond(z.shape());
    fake_uncond.vec() = 0.123 * z.vec();
    return guidance::cfg_noise(eps, fake_uncond, 1.0);
  };
  Rng rng(9);
  const codec::Latent z_t = rng.normal_tensor({4});
  CHECK(bit_equal(ddim_run(z_t, score, sched, 50), ddim_run(z_t, wrapped, sched, 50)));
  CHECK(bit_equal(dpm2_run(z_t, score, sched, 25), dpm2_run(z_t, wrapped, sched, 25)));
}

TEST_CASE("timestep ladders are strictly decreasing from T to 1") {
  const NoiseSchedule sched = oracle_schedule();
  for (int steps : {5, 25, 100, 250}) {
    for (const auto& ladder : {timestep_ladder_uniform(sched, steps), timestep_ladder_logsnr(sched, steps)}) {
      CHECK(ladder.front() == sched.timesteps);
      CHECK(ladder.back() == 1);
      for (size_t i = 1; i < ladder.size(); ++i) CHECK(ladder[i] < ladder[i - 1]);
    }
  }
}

TEST_CASE("generate is deterministic and cfg omega=1 equals no guidance end to end") {
  const synthav::AvFormat fmt;
  const cavp::CavpModel cavp_model = cavp::CavpModel::init(cavp::CavpArch{}, fmt, 3);
  const codec::Codec id = codec::Codec::identity(fmt, 2);
  diffusion::UnetArch arch;
  arch.base_channels = 8;
  arch.latent_channels = 4;
  arch.cond_input = 64;
  arch.cond_width = 16;
  arch.temb_dim = 16;
  const auto sched = make_schedule(ScheduleKind::linear_beta, 20, 1e-3, 3e-2);
  const diffusion::DenoiserModel denoiser = diffusion::DenoiserModel::init(arch, sched, 4);

  Rng rng(11);
  const synthav::AVSample sample = synthav::generate_sample(8, 10.0, rng);
  const synthav::VideoClip clip = synthav::video_crop(sample.video, 0, 32);

  GenerateOptions opt;
  opt.guidance.mode = guidance::GuidanceMode::none;
  opt.sampler.kind = SamplerKind::dpm2;
  opt.sampler.steps = 8;
  opt.sampler.seed = 42;
  opt.griffin_lim_iterations = 4;

  const GenerateResult a = generate(clip, cavp_model, id, denoiser, opt);
  const GenerateResult b = generate(clip, cavp_model, id, denoiser, opt);
  CHECK(a.waveform.samples == b.waveform.samples);

  GenerateOptions cfg1 = opt;
  cfg1.guidance.mode = guidance::GuidanceMode::cfg;
  cfg1.guidance.omega = 1.0;
  const GenerateResult c = generate(clip, cavp_model, id, denoiser, cfg1);
  CHECK(a.waveform.samples == c.waveform.samples);
  CHECK(a.mel.values == c.mel.values);

  // a different seed changes the audio
  GenerateOptions other = opt;
  other.sampler.seed = 43;
  const GenerateResult d = generate(clip, cavp_model, id, denoiser, other);
  CHECK(a.waveform.samples != d.waveform.samples);
}

TEST_CASE("per-video seeds make batch generation equal independent calls") {
  const synthav::AvFormat fmt;
  const cavp::CavpModel cavp_model = cavp::CavpModel::init(cavp::CavpArch{}, fmt, 3);
  const codec::Codec id = codec::Codec::identity(fmt, 2);
  diffusion::UnetArch arch;
  arch.base_channels = 8;
  arch.cond_input = 64;
  arch.cond_width = 16;
  arch.temb_dim = 16;
  const auto sched = make_schedule(ScheduleKind::linear_beta, 20, 1e-3, 3e-2);
  const diffusion::DenoiserModel denoiser = diffusion::DenoiserModel::init(arch, sched, 4);

  std::vector<synthav::VideoClip> clips;
  for (std::uint64_t s : {21ull, 22ull, 23ull}) {
    Rng rng(s);
    clips.push_back(synthav::video_crop(synthav::generate_sample(8, 10.0, rng).video, 0, 32));
  }
  GenerateOptions opt;
  opt.guidance.mode = guidance::GuidanceMode::none;
  opt.sampler.kind = SamplerKind::ddim;
  opt.sampler.steps = 5;
  opt.griffin_lim_iterations = 2;

  std::vector<std::vector<double>> batch;
  for (size_t i = 0; i < clips.size(); ++i) {
    GenerateOptions per = opt;
    per.sampler.seed = 1000 + i;
    batch.push_back(generate(clips[i], cavp_model, id, denoiser, per).waveform.samples);
  }
  for (size_t i = 0; i < clips.size(); ++i) {
    GenerateOptions per = opt;
    per.sampler.seed = 1000 + i;
    CHECK(generate(clips[i], cavp_model, id, denoiser, per).waveform.samples == batch[i]);
  }
}
