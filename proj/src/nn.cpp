#include "foley/nn.hpp"

#include <cmath>
#include <numeric>

namespace foley::nn {

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  check_config(!has(name), msg("ParamStore: duplicate parameter '", name, "'"));
  items.emplace_back(name, std::move(t));
  return items.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  for (auto& [n, t] : items)
    if (n == name) return t;
  throw ConfigError(msg("ParamStore: unknown parameter '", name, "'"));
}

const Tensor& ParamStore::get(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return t;
  throw ConfigError(msg("ParamStore: unknown parameter '", name, "'"));
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& [n, t] : items)
    if (n == name) return true;
  return false;
}

std::int64_t ParamStore::total_params() const {
  std::int64_t n = 0;
  for (const auto& [_, t] : items) n += t.size();
  return n;
}

ad::Var Ctx::leaf(const std::string& name) {
  auto it = cache.find(name);
  if (it != cache.end()) return it->second;
  ad::Var v = tape.input(params.get(name), trainable);
  cache.emplace(name, v);
  return v;
}

Tensor normal_init(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.size(); ++i) t.flat(i) = stddev * rng.normal();
  return t;
}

namespace {

// Keep loaded checkpoint values; initialize only missing parameters.
Tensor& ensure(ParamStore& s, const std::string& name, Shape shape, double stddev, Rng& rng) {
  if (s.has(name)) {
    Tensor& t = s.get(name);
    check_config(t.shape() == shape, msg("parameter '", name, "' has shape ", shape_str(t.shape()),
                                         " but the architecture expects ", shape_str(shape)));
    return t;
  }
  if (stddev == 0.0) return s.add(name, Tensor::zeros(std::move(shape)));
  return s.add(name, normal_init(std::move(shape), stddev, rng));
}

Tensor& ensure_fill(ParamStore& s, const std::string& name, Shape shape, double value) {
  if (s.has(name)) {
    Tensor& t = s.get(name);
    check_config(t.shape() == shape, msg("parameter '", name, "' has shape ", shape_str(t.shape()),
                                         " but the architecture expects ", shape_str(shape)));
    return t;
  }
  return s.add(name, Tensor::full(std::move(shape), value));
}

}  // namespace

Linear::Linear(ParamStore& s, Rng& rng, std::string n, std::int64_t in_, std::int64_t out_, bool bias_)
    : name(std::move(n)), in(in_), out(out_), bias(bias_) {
  ensure(s, name + ".w", {in, out}, std::sqrt(2.0 / static_cast<double>(in)), rng);
  if (bias) ensure(s, name + ".b", {out}, 0.0, rng);
}

ad::Var Linear::operator()(Ctx& ctx, ad::Var x) const {
  ad::Var y = ad::matmul(x, ctx.leaf(name + ".w"));
  if (bias) y = ad::row_bias_add(y, ctx.leaf(name + ".b"));
  return y;
}

Conv2d::Conv2d(ParamStore& s, Rng& rng, std::string n, std::int64_t cin_, std::int64_t cout_, int k_,
               int sh, int sw, int pad_, bool zero_init)
    : name(std::move(n)), cin(cin_), cout(cout_), k(k_), stride_h(sh), stride_w(sw), pad(pad_) {
  const double stddev = zero_init ? 0.0 : std::sqrt(2.0 / static_cast<double>(cin * k * k));
  ensure(s, name + ".w", {cout, cin, k, k}, stddev, rng);
  ensure(s, name + ".b", {cout}, 0.0, rng);
}

ad::Var Conv2d::operator()(Ctx& ctx, ad::Var x) const {
  return ad::conv2d(x, ctx.leaf(name + ".w"), ctx.leaf(name + ".b"), stride_h, stride_w, pad, pad);
}

Conv3d::Conv3d(ParamStore& s, Rng& rng, std::string n, std::int64_t cin_, std::int64_t cout_, int k_,
               int sd, int sh, int sw, int pad_)
    : name(std::move(n)), cin(cin_), cout(cout_), k(k_), stride_d(sd), stride_h(sh), stride_w(sw), pad(pad_) {
  ensure(s, name + ".w", {cout, cin, k, k, k}, std::sqrt(2.0 / static_cast<double>(cin * k * k * k)), rng);
  ensure(s, name + ".b", {cout}, 0.0, rng);
}

ad::Var Conv3d::operator()(Ctx& ctx, ad::Var x) const {
  return ad::conv3d(x, ctx.leaf(name + ".w"), ctx.leaf(name + ".b"), stride_d, stride_h, stride_w, pad, pad,
                    pad);
}

GroupNorm::GroupNorm(ParamStore& s, std::string n, std::int64_t c, int g) : name(std::move(n)), channels(c), groups(g) {
  ensure_fill(s, name + ".g", {channels}, 1.0);
  ensure_fill(s, name + ".b", {channels}, 0.0);
}

ad::Var GroupNorm::operator()(Ctx& ctx, ad::Var x) const {
  return ad::group_norm(x, ctx.leaf(name + ".g"), ctx.leaf(name + ".b"), groups);
}

LayerNorm::LayerNorm(ParamStore& s, std::string n, std::int64_t d) : name(std::move(n)), dim(d) {
  ensure_fill(s, name + ".g", {dim}, 1.0);
  ensure_fill(s, name + ".b", {dim}, 0.0);
}

ad::Var LayerNorm::operator()(Ctx& ctx, ad::Var x) const {
  return ad::layer_norm_rows(x, ctx.leaf(name + ".g"), ctx.leaf(name + ".b"));
}

CrossAttention::CrossAttention(ParamStore& s, Rng& rng, std::string n, std::int64_t c_, std::int64_t cc)
    : name(std::move(n)), c(c_), c_cond(cc) {
  ln = LayerNorm(s, name + ".ln", c);
  wq = Linear(s, rng, name + ".q", c, c, false);
  wk = Linear(s, rng, name + ".k", c_cond, c, false);
  wv = Linear(s, rng, name + ".v", c_cond, c, false);
  wo = Linear(s, rng, name + ".o", c, c, true);
}

Tensor temporal_locality_bias(std::int64_t time_len, std::int64_t width, std::int64_t cond_rows,
                              double locality) {
  Tensor b({time_len * width, cond_rows});
  for (std::int64_t i = 0; i < time_len * width; ++i) {
    const double ti = (static_cast<double>(i / width) + 0.5) / static_cast<double>(time_len);
    for (std::int64_t j = 0; j < cond_rows; ++j) {
      const double tj = (static_cast<double>(j) + 0.5) / static_cast<double>(cond_rows);
      b.at(i, j) = -locality * (ti - tj) * (ti - tj);
    }
  }
  return b;
}

ad::Var CrossAttention::operator()(Ctx& ctx, ad::Var tokens, ad::Var cond, std::int64_t token_time_len,
                                   std::int64_t token_width) const {
  ad::Var h = ln(ctx, tokens);
  // Conv features are translation-invariant, so queries need an explicit
  // position signal to line token positions up against condition rows.
  h = ad::add(h, ctx.tape.input(positional_encoding(h.value().dim(0), c)));
  ad::Var q = wq(ctx, h);
  ad::Var k = wk(ctx, cond);
  ad::Var v = wv(ctx, cond);
  ad::Var scores = ad::scale(ad::matmul(q, ad::transpose(k)), 1.0 / std::sqrt(static_cast<double>(c)));
  if (token_time_len > 0 && locality > 0)
    scores = ad::add(scores, ctx.tape.input(temporal_locality_bias(token_time_len, token_width,
                                                                   cond.value().dim(0), locality)));
  ad::Var attn = ad::softmax_rows(scores);
  ad::Var out = wo(ctx, ad::matmul(attn, v));
  return ad::add(tokens, out);
}

ResBlock2d::ResBlock2d(ParamStore& s, Rng& rng, std::string n, std::int64_t cin_, std::int64_t cout_,
                       std::int64_t temb)
    : name(std::move(n)), cin(cin_), cout(cout_), temb_dim(temb) {
  const int g1 = static_cast<int>(std::gcd(cin, std::int64_t(4)));
  const int g2 = static_cast<int>(std::gcd(cout, std::int64_t(4)));
  gn1 = GroupNorm(s, name + ".gn1", cin, g1);
  conv1 = Conv2d(s, rng, name + ".conv1", cin, cout, 3, 1, 1, 1);
  gn2 = GroupNorm(s, name + ".gn2", cout, g2);
  conv2 = Conv2d(s, rng, name + ".conv2", cout, cout, 3, 1, 1, 1);
  if (temb_dim > 0) temb_proj = Linear(s, rng, name + ".temb", temb_dim, cout);
  if (cin != cout) skip = Conv2d(s, rng, name + ".skip", cin, cout, 1, 1, 1, 0);
}

ad::Var ResBlock2d::operator()(Ctx& ctx, ad::Var x, ad::Var temb) const {
  ad::Var h = conv1(ctx, ad::silu(gn1(ctx, x)));
  if (temb_dim > 0 && temb.valid()) {
    ad::Var proj = temb_proj(ctx, ad::reshape(temb, {1, temb_dim}));
    h = ad::channel_bias_add(h, ad::reshape(proj, {cout}));
  }
  h = conv2(ctx, ad::silu(gn2(ctx, h)));
  ad::Var res = (cin != cout) ? skip(ctx, x) : x;
  return ad::add(res, h);
}

Tensor timestep_embedding(double t, std::int64_t dim) {
  check_config(dim >= 2 && dim % 2 == 0, "timestep_embedding: dim must be even");
  Tensor e({dim});
  const std::int64_t half = dim / 2;
  for (std::int64_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    e.flat(i) = std::sin(t * freq);
    e.flat(half + i) = std::cos(t * freq);
  }
  return e;
}

Tensor positional_encoding(std::int64_t rows, std::int64_t dim) {
  Tensor pe({rows, dim});
  for (std::int64_t r = 0; r < rows; ++r) {
    const Tensor row = timestep_embedding(static_cast<double>(r), dim);
    pe.mat().row(r) = row.vec().transpose();
  }
  return pe;
}

void AdamW::step(ParamStore& params, std::vector<Tensor>& grads) {
  check_config(grads.size() == params.items.size(), "AdamW: gradient list does not match parameter store");
  if (m.empty()) {
    for (auto& [_, t] : params.items) {
      m.push_back(Tensor::zeros(t.shape()));
      v.push_back(Tensor::zeros(t.shape()));
    }
  }
  ++step_count;
  const double warm = warmup > 0 ? std::min(1.0, static_cast<double>(step_count) / warmup) : 1.0;
  const double lr_t = lr * warm;
  const double bc1 = 1.0 - std::pow(beta1, step_count);
  const double bc2 = 1.0 - std::pow(beta2, step_count);

  if (clip_norm > 0) {
    double sq = 0;
    for (const Tensor& g : grads) sq += g.vec().squaredNorm();
    const double norm = std::sqrt(sq);
    if (norm > clip_norm) {
      const double s = clip_norm / norm;
      for (Tensor& g : grads) g.vec() *= s;
    }
  }

  for (size_t i = 0; i < grads.size(); ++i) {
    Tensor& p = params.items[i].second;
    const Tensor& g = grads[i];
    check_runtime(g.all_finite(), msg("AdamW: non-finite gradient for '", params.items[i].first,
                                      "' at step ", step_count));
    m[i].vec() = beta1 * m[i].vec() + (1.0 - beta1) * g.vec();
    v[i].vec() = beta2 * v[i].vec().array().matrix() + (1.0 - beta2) * g.vec().array().square().matrix();
    if (weight_decay > 0 && p.ndim() >= 2) p.vec() *= (1.0 - lr_t * weight_decay);
    p.vec().array() -= lr_t * (m[i].vec().array() / bc1) / ((v[i].vec().array() / bc2).sqrt() + eps);
  }
}

std::vector<Tensor> collect_grads(Ctx& ctx) {
  std::vector<Tensor> grads;
  grads.reserve(ctx.params.items.size());
  for (auto& [name, t] : ctx.params.items) {
    auto it = ctx.cache.find(name);
    if (it == ctx.cache.end()) {
      grads.push_back(Tensor::zeros(t.shape()));
    } else {
      grads.push_back(it->second.grad());
    }
  }
  return grads;
}

}  // namespace foley::nn
