#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "foley/autodiff.hpp"
#include "foley/rng.hpp"

namespace foley::nn {

/// Named parameter tensors in insertion order; order is part of the
/// determinism contract (checkpoints, optimizer state and init draws follow it).
struct ParamStore {
  std::vector<std::pair<std::string, Tensor>> items;

  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;
  std::int64_t total_params() const;
};

/// Per-forward context: one tape, one parameter store, cached leaves so each
/// parameter appears once per tape regardless of how many layers touch it.
struct Ctx {
  ad::Tape& tape;
  ParamStore& params;
  bool trainable = true;
  std::unordered_map<std::string, ad::Var> cache;

  ad::Var leaf(const std::string& name);
};

Tensor normal_init(Shape shape, double stddev, Rng& rng);

struct Linear {
  std::string name;
  std::int64_t in = 0, out = 0;
  bool bias = true;

  Linear() = default;
  Linear(ParamStore& s, Rng& rng, std::string name, std::int64_t in, std::int64_t out, bool bias = true);
  ad::Var operator()(Ctx& ctx, ad::Var x) const;  // (R, in) -> (R, out)
};

struct Conv2d {
  std::string name;
  std::int64_t cin = 0, cout = 0;
  int k = 3, stride_h = 1, stride_w = 1, pad = 1;
  bool bias = true;

  Conv2d() = default;
  Conv2d(ParamStore& s, Rng& rng, std::string name, std::int64_t cin, std::int64_t cout, int k, int stride_h,
         int stride_w, int pad, bool zero_init = false);
  ad::Var operator()(Ctx& ctx, ad::Var x) const;
};

struct Conv3d {
  std::string name;
  std::int64_t cin = 0, cout = 0;
  int k = 3, stride_d = 1, stride_h = 1, stride_w = 1, pad = 1;

  Conv3d() = default;
  Conv3d(ParamStore& s, Rng& rng, std::string name, std::int64_t cin, std::int64_t cout, int k, int stride_d,
         int stride_h, int stride_w, int pad);
  ad::Var operator()(Ctx& ctx, ad::Var x) const;
};

struct GroupNorm {
  std::string name;
  std::int64_t channels = 0;
  int groups = 4;

  GroupNorm() = default;
  GroupNorm(ParamStore& s, std::string name, std::int64_t channels, int groups);
  ad::Var operator()(Ctx& ctx, ad::Var x) const;
};

struct LayerNorm {
  std::string name;
  std::int64_t dim = 0;

  LayerNorm() = default;
  LayerNorm(ParamStore& s, std::string name, std::int64_t dim);
  ad::Var operator()(Ctx& ctx, ad::Var x) const;
};

/// Single-head cross-attention over flattened spatial tokens with residual:
/// tokens (N, C) attend to cond (T, c_cond). When the caller supplies the
/// token grid (time_len x width), scores carry a quadratic temporal-locality
/// bias so positions start out attending to their own moment in the clip.
struct CrossAttention {
  std::string name;
  std::int64_t c = 0, c_cond = 0;
  double locality = 256.0;
  LayerNorm ln;
  Linear wq, wk, wv, wo;

  CrossAttention() = default;
  CrossAttention(ParamStore& s, Rng& rng, std::string name, std::int64_t c, std::int64_t c_cond);
  ad::Var operator()(Ctx& ctx, ad::Var tokens, ad::Var cond, std::int64_t token_time_len = 0,
                     std::int64_t token_width = 1) const;
};

/// Additive attention bias -locality * (t_token - t_cond)^2 over normalized
/// clip time; (N_tokens, T_cond), token index runs time-major over the grid.
Tensor temporal_locality_bias(std::int64_t time_len, std::int64_t width, std::int64_t cond_rows,
                              double locality);

/// GN-silu-conv (+ timestep projection) GN-silu-conv with skip connection.
struct ResBlock2d {
  std::string name;
  std::int64_t cin = 0, cout = 0, temb_dim = 0;
  GroupNorm gn1, gn2;
  Conv2d conv1, conv2, skip;  // skip is a 1x1 conv, used only when cin != cout
  Linear temb_proj;

  ResBlock2d() = default;
  ResBlock2d(ParamStore& s, Rng& rng, std::string name, std::int64_t cin, std::int64_t cout,
             std::int64_t temb_dim);
  ad::Var operator()(Ctx& ctx, ad::Var x, ad::Var temb) const;  // temb may be invalid
};

/// Sinusoidal features of a scalar timestep, length dim (half sin, half cos).
Tensor timestep_embedding(double t, std::int64_t dim);
/// Sinusoidal positional table (rows, dim) over the row index.
Tensor positional_encoding(std::int64_t rows, std::int64_t dim);

/// Decoupled-weight-decay Adam with linear warmup; decay touches only tensors
/// of rank >= 2 (weights, not biases or norm scales).
struct AdamW {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  double weight_decay = 1e-4;
  int warmup = 0;
  double clip_norm = 1.0;  // global gradient-norm clip; <= 0 disables

  int step_count = 0;
  std::vector<Tensor> m, v;

  void step(ParamStore& params, std::vector<Tensor>& grads);
};

/// Gradients aligned with store order; zeros for parameters the loss did not reach.
std::vector<Tensor> collect_grads(Ctx& ctx);

}  // namespace foley::nn
