#include "foley/autodiff.hpp"

#include <cmath>
#include <memory>

namespace foley::ad {

const Tensor& Var::value() const { return tape->node(id).value; }

Tensor Var::grad() const {
  const Tensor& g = tape->node(id).grad;
  if (g.empty()) return Tensor::zeros(value().shape());
  return g;
}

Var Tape::input(Tensor value, bool needs_grad) { return make(std::move(value), needs_grad, nullptr); }

Var Tape::make(Tensor value, bool needs_grad, std::function<void()> back) {
  Node n;
  n.value = std::move(value);
  n.needs_grad = needs_grad;
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad_buffer(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  if (n.grad.empty()) n.grad = Tensor::zeros(n.value.shape());
  return n.grad;
}

void Tape::accumulate(int id, const Tensor& g) {
  Tensor& buf = grad_buffer(id);
  check_same_shape(buf, g, "grad accumulate");
  buf.vec() += g.vec();
}

void Tape::backward(Var loss) {
  check_config(loss.valid() && loss.tape == this, "backward: loss is not on this tape");
  check_config(node(loss.id).value.size() == 1, "backward: loss must be scalar");
  grad_buffer(loss.id).flat(0) = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (!n.grad.empty() && n.back) n.back();
  }
}

namespace {

bool wants_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (v.valid() && v.tape->node(v.id).needs_grad) return true;
  return false;
}

Tape* tape_of(std::initializer_list<Var> vs) {
  Tape* t = nullptr;
  for (const Var& v : vs) {
    if (!v.valid()) continue;
    check_config(t == nullptr || t == v.tape, "op mixes variables from different tapes");
    t = v.tape;
  }
  check_config(t != nullptr, "op needs at least one valid variable");
  return t;
}

}  // namespace

Var add(Var a, Var b) {
  Tape* t = tape_of({a, b});
  Tensor v = a.value() + b.value();
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out;
  out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    t->accumulate(a.id, g);
    t->accumulate(b.id, g);
  };
  return out;
}

Var sub(Var a, Var b) {
  Tape* t = tape_of({a, b});
  Tensor v = a.value() - b.value();
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    t->accumulate(a.id, g);
    Tensor& gb = t->grad_buffer(b.id);
    gb.vec() -= g.vec();
  };
  return out;
}

Var mul(Var a, Var b) {
  Tape* t = tape_of({a, b});
  Tensor v = cwise_mul(a.value(), b.value());
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    t->accumulate(a.id, cwise_mul(g, b.value()));
    t->accumulate(b.id, cwise_mul(g, a.value()));
  };
  return out;
}

Var scale(Var a, double s) {
  Tape* t = tape_of({a});
  Tensor v = s * a.value();
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, s, out] {
    t->accumulate(a.id, s * t->node(out.id).grad);
  };
  return out;
}

Var add_scalar(Var a, double c) {
  Tape* t = tape_of({a});
  Tensor v = a.value();
  v.vec().array() += c;
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] { t->accumulate(a.id, t->node(out.id).grad); };
  return out;
}

Var matmul(Var a, Var b) {
  Tape* t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_config(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(0),
               msg("matmul: incompatible shapes ", shape_str(av.shape()), " x ", shape_str(bv.shape())));
  Tensor v({av.dim(0), bv.dim(1)});
  v.mat() = av.mat() * bv.mat();
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    const auto gm = g.mat();
    {
      Tensor da({a.value().dim(0), a.value().dim(1)});
      da.mat() = gm * b.value().mat().transpose();
      t->accumulate(a.id, da);
    }
    {
      Tensor db({b.value().dim(0), b.value().dim(1)});
      db.mat() = a.value().mat().transpose() * gm;
      t->accumulate(b.id, db);
    }
  };
  return out;
}

Var transpose(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2, "transpose: expects a 2-d tensor");
  Tensor v({av.dim(1), av.dim(0)});
  v.mat() = av.mat().transpose();
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor da({a.value().dim(0), a.value().dim(1)});
    da.mat() = g.mat().transpose();
    t->accumulate(a.id, da);
  };
  return out;
}

Var reshape(Var a, Shape shape) {
  Tape* t = tape_of({a});
  Tensor v = a.value().reshaped(shape);
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    t->accumulate(a.id, t->node(out.id).grad.reshaped(a.value().shape()));
  };
  return out;
}

Var slice_rows(Var a, std::int64_t r0, std::int64_t r1) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2 && r0 >= 0 && r0 < r1 && r1 <= av.dim(0),
               msg("slice_rows: bad range [", r0, ",", r1, ") for ", shape_str(av.shape())));
  Tensor v({r1 - r0, av.dim(1)});
  v.mat() = av.mat().middleRows(r0, r1 - r0);
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, r0, r1, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(a.id);
    buf.mat().middleRows(r0, r1 - r0) += g.mat();
  };
  return out;
}

Var concat_rows(Var a, Var b) {
  Tape* t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_config(av.ndim() == 2 && bv.ndim() == 2 && av.dim(1) == bv.dim(1),
               msg("concat_rows: column mismatch ", shape_str(av.shape()), " vs ", shape_str(bv.shape())));
  Tensor v({av.dim(0) + bv.dim(0), av.dim(1)});
  v.mat().topRows(av.dim(0)) = av.mat();
  v.mat().bottomRows(bv.dim(0)) = bv.mat();
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    const std::int64_t ra = a.value().dim(0);
    t->grad_buffer(a.id).mat() += g.mat().topRows(ra);
    t->grad_buffer(b.id).mat() += g.mat().bottomRows(b.value().dim(0));
  };
  return out;
}

Var stack_rows(const std::vector<Var>& rows) {
  check_config(!rows.empty(), "stack_rows: empty input");
  Tape* t = rows[0].tape;
  const std::int64_t c = rows[0].value().size();
  bool needs = false;
  for (const Var& r : rows) {
    check_config(r.tape == t, "stack_rows: mixed tapes");
    check_config(r.value().size() == c, "stack_rows: rows of different lengths");
    needs = needs || t->node(r.id).needs_grad;
  }
  Tensor v({static_cast<std::int64_t>(rows.size()), c});
  for (size_t i = 0; i < rows.size(); ++i) v.mat().row(static_cast<std::int64_t>(i)) = rows[i].value().vec();
  if (!needs) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  std::vector<int> ids(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) ids[i] = rows[i].id;
  t->node(out.id).back = [t, ids, out] {
    const Tensor& g = t->node(out.id).grad;
    for (size_t i = 0; i < ids.size(); ++i) {
      Tensor& buf = t->grad_buffer(ids[static_cast<size_t>(i)]);
      buf.vec() += g.mat().row(static_cast<std::int64_t>(i)).transpose();
    }
  };
  return out;
}

Var row_bias_add(Var x, Var b) {
  Tape* t = tape_of({x, b});
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  check_config(xv.ndim() == 2 && bv.size() == xv.dim(1),
               msg("row_bias_add: shapes ", shape_str(xv.shape()), " + ", shape_str(bv.shape())));
  Tensor v = xv;
  v.mat().rowwise() += bv.vec().transpose();
  if (!wants_grad({x, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, b, out] {
    const Tensor& g = t->node(out.id).grad;
    t->accumulate(x.id, g);
    Tensor& gb = t->grad_buffer(b.id);
    gb.vec() += g.mat().colwise().sum().transpose();
  };
  return out;
}

Var channel_bias_add(Var x, Var b) {
  Tape* t = tape_of({x, b});
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  check_config(xv.ndim() >= 1 && bv.size() == xv.dim(0),
               msg("channel_bias_add: shapes ", shape_str(xv.shape()), " + ", shape_str(bv.shape())));
  const std::int64_t c = xv.dim(0);
  const std::int64_t plane = xv.size() / c;
  Tensor v = xv;
  v.mat(c, plane).colwise() += bv.vec();
  if (!wants_grad({x, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, b, c, plane, out] {
    const Tensor& g = t->node(out.id).grad;
    t->accumulate(x.id, g);
    Tensor& gb = t->grad_buffer(b.id);
    gb.vec() += g.mat(c, plane).rowwise().sum();
  };
  return out;
}

namespace {

template <typename FwdFn, typename BwdFn>
Var unary_op(Var a, FwdFn fwd, BwdFn dfdx_from_xy) {
  Tape* t = tape_of({a});
  Tensor v(a.value().shape());
  for (std::int64_t i = 0; i < v.size(); ++i) v.flat(i) = fwd(a.value().flat(i));
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out, dfdx_from_xy] {
    const Tensor& g = t->node(out.id).grad;
    const Tensor& xv = a.value();
    const Tensor& yv = t->node(out.id).value;
    Tensor da(xv.shape());
    for (std::int64_t i = 0; i < da.size(); ++i) da.flat(i) = g.flat(i) * dfdx_from_xy(xv.flat(i), yv.flat(i));
    t->accumulate(a.id, da);
  };
  return out;
}

double sigmoid_s(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

Var silu(Var a) {
  return unary_op(
      a, [](double x) { return x * sigmoid_s(x); },
      [](double x, double) {
        const double s = sigmoid_s(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var relu(Var a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(Var a) {
  return unary_op(a, [](double x) { return sigmoid_s(x); }, [](double, double y) { return y * (1.0 - y); });
}

Var softplus(Var a) {
  return unary_op(
      a, [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
      [](double x, double) { return sigmoid_s(x); });
}

Var log_(Var a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp_(Var a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sum(Var a) {
  Tape* t = tape_of({a});
  Tensor v = Tensor::scalar(a.value().vec().sum());
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const double g = t->node(out.id).grad.flat(0);
    Tensor& buf = t->grad_buffer(a.id);
    buf.vec().array() += g;
  };
  return out;
}

Var mean(Var a) {
  Tape* t = tape_of({a});
  const double n = static_cast<double>(a.value().size());
  Tensor v = Tensor::scalar(a.value().vec().sum() / n);
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, n, out] {
    const double g = t->node(out.id).grad.flat(0) / n;
    Tensor& buf = t->grad_buffer(a.id);
    buf.vec().array() += g;
  };
  return out;
}

Var softmax_rows(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2, "softmax_rows: expects a 2-d tensor");
  Tensor v(av.shape());
  for (std::int64_t r = 0; r < av.dim(0); ++r) {
    const double m = av.mat().row(r).maxCoeff();
    v.mat().row(r) = (av.mat().row(r).array() - m).exp();
    v.mat().row(r) /= v.mat().row(r).sum();
  }
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const Tensor& g = t->node(out.id).grad;
    const Tensor& y = t->node(out.id).value;
    Tensor da(y.shape());
    for (std::int64_t r = 0; r < y.dim(0); ++r) {
      const double dot = g.mat().row(r).dot(y.mat().row(r));
      da.mat().row(r) = (g.mat().row(r).array() - dot) * y.mat().row(r).array();
    }
    t->accumulate(a.id, da);
  };
  return out;
}

Var logsumexp_rows(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2, "logsumexp_rows: expects a 2-d tensor");
  Tensor v({av.dim(0)});
  for (std::int64_t r = 0; r < av.dim(0); ++r) {
    const double m = av.mat().row(r).maxCoeff();
    v.flat(r) = m + std::log((av.mat().row(r).array() - m).exp().sum());
  }
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const Tensor& g = t->node(out.id).grad;
    const Tensor& y = t->node(out.id).value;
    const Tensor& x = a.value();
    Tensor da(x.shape());
    for (std::int64_t r = 0; r < x.dim(0); ++r)
      da.mat().row(r) = g.flat(r) * (x.mat().row(r).array() - y.flat(r)).exp();
    t->accumulate(a.id, da);
  };
  return out;
}

Var diag(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2 && av.dim(0) == av.dim(1), "diag: expects a square matrix");
  Tensor v({av.dim(0)});
  for (std::int64_t i = 0; i < av.dim(0); ++i) v.flat(i) = av.at(i, i);
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(a.id);
    for (std::int64_t i = 0; i < g.size(); ++i) buf.at(i, i) += g.flat(i);
  };
  return out;
}

Var normalize_rows(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2, "normalize_rows: expects a 2-d tensor");
  Tensor v(av.shape());
  std::vector<double> norms(static_cast<size_t>(av.dim(0)));
  for (std::int64_t r = 0; r < av.dim(0); ++r) {
    const double n = av.mat().row(r).norm();
    check_config(n > 1e-12, msg("normalize_rows: row ", r, " has (near-)zero norm, cosine undefined"));
    norms[static_cast<size_t>(r)] = n;
    v.mat().row(r) = av.mat().row(r) / n;
  }
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out, norms] {
    const Tensor& g = t->node(out.id).grad;
    const Tensor& y = t->node(out.id).value;
    Tensor da(y.shape());
    for (std::int64_t r = 0; r < y.dim(0); ++r) {
      const double dot = g.mat().row(r).dot(y.mat().row(r));
      da.mat().row(r) = (g.mat().row(r) - dot * y.mat().row(r)) / norms[static_cast<size_t>(r)];
    }
    t->accumulate(a.id, da);
  };
  return out;
}

Var max_over_rows(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2 && av.dim(0) >= 1, "max_over_rows: expects a non-empty 2-d tensor");
  Tensor v({av.dim(1)});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<size_t>(av.dim(1)));
  for (std::int64_t c = 0; c < av.dim(1); ++c) {
    std::int64_t best = 0;
    for (std::int64_t r = 1; r < av.dim(0); ++r)
      if (av.at(r, c) > av.at(best, c)) best = r;
    (*argmax)[static_cast<size_t>(c)] = best;
    v.flat(c) = av.at(best, c);
  }
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out, argmax] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(a.id);
    for (std::int64_t c = 0; c < g.size(); ++c) buf.at((*argmax)[static_cast<size_t>(c)], c) += g.flat(c);
  };
  return out;
}

Var mean_over_rows(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() == 2 && av.dim(0) >= 1, "mean_over_rows: expects a non-empty 2-d tensor");
  Tensor v({av.dim(1)});
  v.vec() = av.mat().colwise().mean().transpose();
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(a.id);
    const double inv = 1.0 / static_cast<double>(a.value().dim(0));
    buf.mat().rowwise() += inv * g.vec().transpose();
  };
  return out;
}

Var mean_over_last(Var a) {
  Tape* t = tape_of({a});
  const Tensor& av = a.value();
  check_config(av.ndim() >= 2, "mean_over_last: needs at least 2 dims");
  const std::int64_t w = av.dim(av.ndim() - 1);
  const std::int64_t rows = av.size() / w;
  Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  Tensor v(out_shape);
  v.vec() = av.mat(rows, w).rowwise().mean();
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, rows, w, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(a.id);
    buf.mat(rows, w).colwise() += (1.0 / static_cast<double>(w)) * g.vec();
  };
  return out;
}

Var select(Var a, std::int64_t flat_index) {
  Tape* t = tape_of({a});
  check_config(flat_index >= 0 && flat_index < a.value().size(), "select: index out of range");
  Tensor v = Tensor::scalar(a.value().flat(flat_index));
  if (!wants_grad({a})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, flat_index, out] {
    t->grad_buffer(a.id).flat(flat_index) += t->node(out.id).grad.flat(0);
  };
  return out;
}

namespace {

// im2col for 2-D convolution: output (Ci*kh*kw, Ho*Wo).
Tensor im2col2d(const Tensor& x, int kh, int kw, int sh, int sw, int ph, int pw, std::int64_t ho,
                std::int64_t wo) {
  const std::int64_t ci = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor cols({ci * kh * kw, ho * wo});
  for (std::int64_t c = 0; c < ci; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const std::int64_t row = (c * kh + i) * kw + j;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * sh - ph + i;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * sw - pw + j;
            if (ix < 0 || ix >= w) continue;
            cols.at(row, oy * wo + ox) = x.at(c, iy, ix);
          }
        }
      }
  return cols;
}

void col2im2d(const Tensor& cols, Tensor& dx, int kh, int kw, int sh, int sw, int ph, int pw, std::int64_t ho,
              std::int64_t wo) {
  const std::int64_t ci = dx.dim(0), h = dx.dim(1), w = dx.dim(2);
  for (std::int64_t c = 0; c < ci; ++c)
    for (int i = 0; i < kh; ++i)
      for (int j = 0; j < kw; ++j) {
        const std::int64_t row = (c * kh + i) * kw + j;
        for (std::int64_t oy = 0; oy < ho; ++oy) {
          const std::int64_t iy = oy * sh - ph + i;
          if (iy < 0 || iy >= h) continue;
          for (std::int64_t ox = 0; ox < wo; ++ox) {
            const std::int64_t ix = ox * sw - pw + j;
            if (ix < 0 || ix >= w) continue;
            dx.at(c, iy, ix) += cols.at(row, oy * wo + ox);
          }
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, int stride_h, int stride_w, int pad_h, int pad_w) {
  Tape* t = tape_of({x, w});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  check_config(xv.ndim() == 3 && wv.ndim() == 4, "conv2d: expects x (Ci,H,W) and w (Co,Ci,kh,kw)");
  check_config(xv.dim(0) == wv.dim(1),
               msg("conv2d: input channels ", xv.dim(0), " but kernel expects ", wv.dim(1)));
  const std::int64_t co = wv.dim(0);
  const int kh = static_cast<int>(wv.dim(2)), kw = static_cast<int>(wv.dim(3));
  const std::int64_t ho = (xv.dim(1) + 2 * pad_h - kh) / stride_h + 1;
  const std::int64_t wo = (xv.dim(2) + 2 * pad_w - kw) / stride_w + 1;
  check_config(ho >= 1 && wo >= 1, "conv2d: output would be empty");

  auto cols = std::make_shared<Tensor>(im2col2d(xv, kh, kw, stride_h, stride_w, pad_h, pad_w, ho, wo));
  Tensor v({co, ho, wo});
  v.mat(co, ho * wo) = wv.mat(co, wv.size() / co) * cols->mat();
  if (b.valid()) {
    check_config(b.value().size() == co, "conv2d: bias length mismatch");
    v.mat(co, ho * wo).colwise() += b.value().vec();
  }
  if (!wants_grad({x, w, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, w, b, cols, stride_h, stride_w, pad_h, pad_w, kh, kw, ho, wo, co, out] {
    const Tensor& g = t->node(out.id).grad;
    const auto gm = g.mat(co, ho * wo);
    const Tensor& wv = w.value();
    if (t->node(w.id).needs_grad) {
      Tensor dw(wv.shape());
      dw.mat(co, wv.size() / co) = gm * cols->mat().transpose();
      t->accumulate(w.id, dw);
    }
    if (b.valid() && t->node(b.id).needs_grad) {
      Tensor db({co});
      db.vec() = gm.rowwise().sum();
      t->accumulate(b.id, db);
    }
    if (t->node(x.id).needs_grad) {
      Tensor dcols({cols->dim(0), cols->dim(1)});
      dcols.mat() = wv.mat(co, wv.size() / co).transpose() * gm;
      Tensor& dx = t->grad_buffer(x.id);
      col2im2d(dcols, dx, kh, kw, stride_h, stride_w, pad_h, pad_w, ho, wo);
    }
  };
  return out;
}

namespace {

Tensor im2col3d(const Tensor& x, int kd, int kh, int kw, int sd, int sh, int sw, int pd, int ph, int pw,
                std::int64_t d_out, std::int64_t ho, std::int64_t wo) {
  const std::int64_t ci = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor cols({ci * kd * kh * kw, d_out * ho * wo});
  for (std::int64_t c = 0; c < ci; ++c)
    for (int a = 0; a < kd; ++a)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          const std::int64_t row = ((c * kd + a) * kh + i) * kw + j;
          for (std::int64_t od = 0; od < d_out; ++od) {
            const std::int64_t id = od * sd - pd + a;
            if (id < 0 || id >= d) continue;
            for (std::int64_t oy = 0; oy < ho; ++oy) {
              const std::int64_t iy = oy * sh - ph + i;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t ix = ox * sw - pw + j;
                if (ix < 0 || ix >= w) continue;
                cols.at(row, (od * ho + oy) * wo + ox) = x.at(c, id, iy, ix);
              }
            }
          }
        }
  return cols;
}

void col2im3d(const Tensor& cols, Tensor& dx, int kd, int kh, int kw, int sd, int sh, int sw, int pd, int ph,
              int pw, std::int64_t d_out, std::int64_t ho, std::int64_t wo) {
  const std::int64_t ci = dx.dim(0), d = dx.dim(1), h = dx.dim(2), w = dx.dim(3);
  for (std::int64_t c = 0; c < ci; ++c)
    for (int a = 0; a < kd; ++a)
      for (int i = 0; i < kh; ++i)
        for (int j = 0; j < kw; ++j) {
          const std::int64_t row = ((c * kd + a) * kh + i) * kw + j;
          for (std::int64_t od = 0; od < d_out; ++od) {
            const std::int64_t id = od * sd - pd + a;
            if (id < 0 || id >= d) continue;
            for (std::int64_t oy = 0; oy < ho; ++oy) {
              const std::int64_t iy = oy * sh - ph + i;
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t ox = 0; ox < wo; ++ox) {
                const std::int64_t ix = ox * sw - pw + j;
                if (ix < 0 || ix >= w) continue;
                dx.at(c, id, iy, ix) += cols.at(row, (od * ho + oy) * wo + ox);
              }
            }
          }
        }
}

}  // namespace

Var conv3d(Var x, Var w, Var b, int stride_d, int stride_h, int stride_w, int pad_d, int pad_h, int pad_w) {
  Tape* t = tape_of({x, w});
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  check_config(xv.ndim() == 4 && wv.ndim() == 5, "conv3d: expects x (Ci,D,H,W) and w (Co,Ci,kd,kh,kw)");
  check_config(xv.dim(0) == wv.dim(1),
               msg("conv3d: input channels ", xv.dim(0), " but kernel expects ", wv.dim(1)));
  const std::int64_t co = wv.dim(0);
  const int kd = static_cast<int>(wv.dim(2)), kh = static_cast<int>(wv.dim(3)), kw = static_cast<int>(wv.dim(4));
  const std::int64_t d_out = (xv.dim(1) + 2 * pad_d - kd) / stride_d + 1;
  const std::int64_t ho = (xv.dim(2) + 2 * pad_h - kh) / stride_h + 1;
  const std::int64_t wo = (xv.dim(3) + 2 * pad_w - kw) / stride_w + 1;
  check_config(d_out >= 1 && ho >= 1 && wo >= 1, "conv3d: output would be empty");

  auto cols = std::make_shared<Tensor>(
      im2col3d(xv, kd, kh, kw, stride_d, stride_h, stride_w, pad_d, pad_h, pad_w, d_out, ho, wo));
  Tensor v({co, d_out, ho, wo});
  v.mat(co, d_out * ho * wo) = wv.mat(co, wv.size() / co) * cols->mat();
  if (b.valid()) {
    check_config(b.value().size() == co, "conv3d: bias length mismatch");
    v.mat(co, d_out * ho * wo).colwise() += b.value().vec();
  }
  if (!wants_grad({x, w, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, w, b, cols, stride_d, stride_h, stride_w, pad_d, pad_h, pad_w, kd, kh, kw,
                          d_out, ho, wo, co, out] {
    const Tensor& g = t->node(out.id).grad;
    const auto gm = g.mat(co, d_out * ho * wo);
    const Tensor& wv = w.value();
    if (t->node(w.id).needs_grad) {
      Tensor dw(wv.shape());
      dw.mat(co, wv.size() / co) = gm * cols->mat().transpose();
      t->accumulate(w.id, dw);
    }
    if (b.valid() && t->node(b.id).needs_grad) {
      Tensor db({co});
      db.vec() = gm.rowwise().sum();
      t->accumulate(b.id, db);
    }
    if (t->node(x.id).needs_grad) {
      Tensor dcols({cols->dim(0), cols->dim(1)});
      dcols.mat() = wv.mat(co, wv.size() / co).transpose() * gm;
      Tensor& dx = t->grad_buffer(x.id);
      col2im3d(dcols, dx, kd, kh, kw, stride_d, stride_h, stride_w, pad_d, pad_h, pad_w, d_out, ho, wo);
    }
  };
  return out;
}

Var upsample2x(Var x) {
  Tape* t = tape_of({x});
  const Tensor& xv = x.value();
  check_config(xv.ndim() == 3, "upsample2x: expects (C,H,W)");
  const std::int64_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  Tensor v({c, 2 * h, 2 * w});
  for (std::int64_t ci = 0; ci < c; ++ci)
    for (std::int64_t y = 0; y < 2 * h; ++y)
      for (std::int64_t xx = 0; xx < 2 * w; ++xx) v.at(ci, y, xx) = xv.at(ci, y / 2, xx / 2);
  if (!wants_grad({x})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, c, h, w, out] {
    const Tensor& g = t->node(out.id).grad;
    Tensor& buf = t->grad_buffer(x.id);
    for (std::int64_t ci = 0; ci < c; ++ci)
      for (std::int64_t y = 0; y < 2 * h; ++y)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx) buf.at(ci, y / 2, xx / 2) += g.at(ci, y, xx);
  };
  return out;
}

Var group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
  Tape* t = tape_of({x, gamma, beta});
  const Tensor& xv = x.value();
  check_config(xv.ndim() >= 2, "group_norm: expects at least 2 dims");
  const std::int64_t c = xv.dim(0);
  check_config(c % groups == 0, msg("group_norm: ", c, " channels not divisible by ", groups, " groups"));
  check_config(gamma.value().size() == c && beta.value().size() == c, "group_norm: affine size mismatch");
  const std::int64_t plane = xv.size() / c;
  const std::int64_t cpg = c / groups;
  const std::int64_t gsize = cpg * plane;

  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(groups));
  Tensor v(xv.shape());
  for (int g = 0; g < groups; ++g) {
    const std::int64_t off = g * gsize;
    const auto seg = Eigen::Map<const VectorXd>(xv.data() + off, gsize);
    const double mu = seg.mean();
    const double var = (seg.array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(g)] = inv;
    Eigen::Map<VectorXd>(xhat->data() + off, gsize) = (seg.array() - mu) * inv;
  }
  for (std::int64_t ci = 0; ci < c; ++ci) {
    const double gm = gamma.value().flat(ci), bt = beta.value().flat(ci);
    for (std::int64_t p = 0; p < plane; ++p) v.flat(ci * plane + p) = gm * xhat->flat(ci * plane + p) + bt;
  }
  if (!wants_grad({x, gamma, beta})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, gamma, beta, groups, c, plane, cpg, gsize, xhat, inv_std, out] {
    const Tensor& g = t->node(out.id).grad;
    if (t->node(gamma.id).needs_grad) {
      Tensor dgm({c});
      for (std::int64_t ci = 0; ci < c; ++ci) {
        double s = 0;
        for (std::int64_t p = 0; p < plane; ++p) s += g.flat(ci * plane + p) * xhat->flat(ci * plane + p);
        dgm.flat(ci) = s;
      }
      t->accumulate(gamma.id, dgm);
    }
    if (t->node(beta.id).needs_grad) {
      Tensor dbt({c});
      for (std::int64_t ci = 0; ci < c; ++ci) {
        double s = 0;
        for (std::int64_t p = 0; p < plane; ++p) s += g.flat(ci * plane + p);
        dbt.flat(ci) = s;
      }
      t->accumulate(beta.id, dbt);
    }
    if (t->node(x.id).needs_grad) {
      Tensor dx(x.value().shape());
      for (int gi = 0; gi < groups; ++gi) {
        const std::int64_t off = gi * gsize;
        double mean_dxh = 0, mean_dxh_xh = 0;
        for (std::int64_t k = 0; k < gsize; ++k) {
          const std::int64_t idx = off + k;
          const std::int64_t ci = idx / plane;
          const double dxh = g.flat(idx) * gamma.value().flat(ci);
          mean_dxh += dxh;
          mean_dxh_xh += dxh * xhat->flat(idx);
        }
        mean_dxh /= static_cast<double>(gsize);
        mean_dxh_xh /= static_cast<double>(gsize);
        const double inv = (*inv_std)[static_cast<size_t>(gi)];
        for (std::int64_t k = 0; k < gsize; ++k) {
          const std::int64_t idx = off + k;
          const std::int64_t ci = idx / plane;
          const double dxh = g.flat(idx) * gamma.value().flat(ci);
          dx.flat(idx) = inv * (dxh - mean_dxh - xhat->flat(idx) * mean_dxh_xh);
        }
      }
      t->accumulate(x.id, dx);
    }
  };
  return out;
}

Var layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  Tape* t = tape_of({x, gamma, beta});
  const Tensor& xv = x.value();
  check_config(xv.ndim() == 2, "layer_norm_rows: expects a 2-d tensor");
  const std::int64_t rows = xv.dim(0), c = xv.dim(1);
  check_config(gamma.value().size() == c && beta.value().size() == c, "layer_norm_rows: affine size mismatch");

  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  Tensor v(xv.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double mu = xv.mat().row(r).mean();
    const double var = (xv.mat().row(r).array() - mu).square().mean();
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(r)] = inv;
    xhat->mat().row(r) = (xv.mat().row(r).array() - mu) * inv;
    v.mat().row(r) = xhat->mat().row(r).cwiseProduct(gamma.value().vec().transpose()) +
                     beta.value().vec().transpose();
  }
  if (!wants_grad({x, gamma, beta})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, x, gamma, beta, rows, c, xhat, inv_std, out] {
    const Tensor& g = t->node(out.id).grad;
    if (t->node(gamma.id).needs_grad) {
      Tensor dgm({c});
      dgm.vec() = g.mat().cwiseProduct(xhat->mat()).colwise().sum().transpose();
      t->accumulate(gamma.id, dgm);
    }
    if (t->node(beta.id).needs_grad) {
      Tensor dbt({c});
      dbt.vec() = g.mat().colwise().sum().transpose();
      t->accumulate(beta.id, dbt);
    }
    if (t->node(x.id).needs_grad) {
      Tensor dx(x.value().shape());
      for (std::int64_t r = 0; r < rows; ++r) {
        Eigen::RowVectorXd dxh = g.mat().row(r).cwiseProduct(gamma.value().vec().transpose());
        const double m1 = dxh.mean();
        const double m2 = dxh.cwiseProduct(xhat->mat().row(r)).mean();
        dx.mat().row(r) =
            (*inv_std)[static_cast<size_t>(r)] * (dxh.array() - m1 - xhat->mat().row(r).array() * m2);
      }
      t->accumulate(x.id, dx);
    }
  };
  return out;
}

Var concat_channels(Var a, Var b) {
  Tape* t = tape_of({a, b});
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  check_config(av.ndim() == 3 && bv.ndim() == 3 && av.dim(1) == bv.dim(1) && av.dim(2) == bv.dim(2),
               msg("concat_channels: spatial mismatch ", shape_str(av.shape()), " vs ", shape_str(bv.shape())));
  Tensor v({av.dim(0) + bv.dim(0), av.dim(1), av.dim(2)});
  std::copy_n(av.data(), av.size(), v.data());
  std::copy_n(bv.data(), bv.size(), v.data() + av.size());
  if (!wants_grad({a, b})) return t->input(std::move(v));
  Var out = t->make(std::move(v), true, nullptr);
  t->node(out.id).back = [t, a, b, out] {
    const Tensor& g = t->node(out.id).grad;
    const std::int64_t na = a.value().size();
    Tensor& ga = t->grad_buffer(a.id);
    Tensor& gb = t->grad_buffer(b.id);
    ga.vec() += Eigen::Map<const VectorXd>(g.data(), na);
    gb.vec() += Eigen::Map<const VectorXd>(g.data() + na, b.value().size());
  };
  return out;
}

}  // namespace foley::ad
