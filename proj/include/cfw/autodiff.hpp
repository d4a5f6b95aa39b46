#pragma once

// Tensor-level reverse-mode differentiation. A Tape records every op in evaluation order;
// Tape::backward walks it in reverse, so recording order is already a topological order.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cfw/kernels.hpp"
#include "cfw/tensor.hpp"

namespace cfw::ad {

template <class S>
class Tape;

template <class S>
struct Var {
  Tape<S>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<S>& value() const { return tape->value(*this); }
  const std::vector<std::size_t>& shape() const { return value().shape; }
  bool requires_grad() const { return tape->requires_grad(*this); }
};

template <class S>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&)>;

  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Var<S> constant(Tensor<S> v) { return push(std::move(v), false, {}); }
  Var<S> variable(Tensor<S> v) { return push(std::move(v), true, {}); }

  Var<S> push(Tensor<S> v, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(v), {}, requires_grad, std::move(fn)});
    return Var<S>{this, nodes_.size() - 1};
  }

  const Tensor<S>& value(Var<S> v) const { return nodes_[v.id].value; }
  bool requires_grad(Var<S> v) const { return nodes_[v.id].requires_grad; }

  /// Gradient of `root` w.r.t. `v`; valid after backward(). Empty when v does not require grad.
  const Tensor<S>& grad(Var<S> v) const { return nodes_[v.id].grad; }
  Tensor<S>& grad_mut(std::size_t id) { return nodes_[id].grad; }
  const Tensor<S>& value_at(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad_at(std::size_t id) const { return nodes_[id].requires_grad; }

  /// Seeds d(root)/d(root) with `seed` (ones when empty) and propagates.
  void backward(Var<S> root, const Tensor<S>& seed = {}) {
    for (std::size_t i = 0; i <= root.id; ++i) {
      auto& n = nodes_[i];
      if (n.requires_grad) n.grad = Tensor<S>(n.value.shape, S(0));
    }
    auto& r = nodes_[root.id];
    if (!r.requires_grad) return;
    if (seed.data.empty()) {
      r.grad.fill(S(1));
    } else {
      expect_shape(seed, r.value.shape, "backward seed");
      r.grad = seed;
    }
    for (std::size_t i = root.id + 1; i-- > 0;) {
      auto& n = nodes_[i];
      if (n.requires_grad && n.backward) n.backward(*this);
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
};

namespace detail {

template <class S>
bool any_grad(std::initializer_list<Var<S>> vs) {
  for (auto v : vs)
    if (v.tape && v.requires_grad()) return true;
  return false;
}

template <class S>
void accumulate(Tape<S>& tape, std::size_t dst, std::span<const S> src, S scale = S(1)) {
  if (!tape.requires_grad_at(dst)) return;
  auto& g = tape.grad_mut(dst).data;
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// elementwise

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) fail(ErrorKind::ShapeMismatch, "add: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<S> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t ia = a.id, ib = b.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib, self](Tape<S>& t) {
    const auto& g = t.grad_mut(self).data;
    detail::accumulate<S>(t, ia, g);
    detail::accumulate<S>(t, ib, g);
  });
}

template <class S>
Var<S> sub(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) fail(ErrorKind::ShapeMismatch, "sub: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<S> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib, self](Tape<S>& t) {
    const auto& g = t.grad_mut(self).data;
    detail::accumulate<S>(t, ia, g);
    detail::accumulate<S>(t, ib, g, S(-1));
  });
}

template <class S>
Var<S> mul(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) fail(ErrorKind::ShapeMismatch, "mul: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<S> out = a.value();
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t ia = a.id, ib = b.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), detail::any_grad({a, b}), [ia, ib, self](Tape<S>& t) {
    const auto& g = t.grad_mut(self).data;
    const auto& av = t.value_at(ia).data;
    const auto& bv = t.value_at(ib).data;
    if (t.requires_grad_at(ia)) {
      auto& ga = t.grad_mut(ia).data;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (t.requires_grad_at(ib)) {
      auto& gb = t.grad_mut(ib).data;
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <class S>
Var<S> scale(Var<S> a, S c) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v *= c;
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(),
                      [ia, self, c](Tape<S>& t) { detail::accumulate<S>(t, ia, t.grad_mut(self).data, c); });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = v > S(0) ? v : S(0);
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    const auto& x = t.value_at(ia).data;
    auto& gx = t.grad_mut(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i)
      if (x[i] > S(0)) gx[i] += g[i];
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  Tensor<S> out = a.value();
  for (auto& v : out.data) v = std::tanh(v);
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    const auto& y = t.value_at(self).data;
    auto& gx = t.grad_mut(ia).data;
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (S(1) - y[i] * y[i]);
  });
}

/// Local derivative of ReLU at z (0 at z == 0). Recorded as a constant.
template <class S>
Var<S> relu_mask(Var<S> z) {
  Tensor<S> out = z.value();
  for (auto& v : out.data) v = v > S(0) ? S(1) : S(0);
  return z.tape->constant(std::move(out));
}

inline constexpr double kRescaleEps = 1e-7;

/// DeepLIFT Rescale multiplier of ReLU: (relu(z) - relu(z0)) / (z - z0), falling back to the
/// local gradient when |z - z0| < 1e-7. Differentiable w.r.t. z; the reference z0 is constant.
template <class S>
Var<S> rescale_multiplier(Var<S> z, const Tensor<S>& z_ref) {
  expect_shape(z_ref, z.shape(), "rescale_multiplier reference");
  const auto& zv = z.value().data;
  Tensor<S> out(z.shape());
  for (std::size_t i = 0; i < zv.size(); ++i) {
    const S a = zv[i], b = z_ref[i];
    const S dz = a - b;
    if (std::abs(dz) < S(kRescaleEps)) {
      out[i] = a > S(0) ? S(1) : S(0);
    } else if (a > S(0) && b > S(0)) {
      out[i] = S(1);
    } else if (a <= S(0) && b <= S(0)) {
      out[i] = S(0);
    } else {
      out[i] = (std::max(a, S(0)) - std::max(b, S(0))) / dz;
    }
  }
  const std::size_t iz = z.id;
  std::size_t self = z.tape->size();
  return z.tape->push(std::move(out), z.requires_grad(), [iz, self, z_ref](Tape<S>& t) {
    if (!t.requires_grad_at(iz)) return;
    const auto& g = t.grad_mut(self).data;
    const auto& m = t.value_at(self).data;
    const auto& zv = t.value_at(iz).data;
    auto& gz = t.grad_mut(iz).data;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const S a = zv[i], b = z_ref[i];
      const S dz = a - b;
      if (std::abs(dz) < S(kRescaleEps) || (a > S(0)) == (b > S(0))) continue;
      const S local = a > S(0) ? S(1) : S(0);
      gz[i] += g[i] * (local - m[i]) / dz;
    }
  });
}

// ---------------------------------------------------------------------------------------------
// structural

template <class S>
Var<S> reshape(Var<S> a, std::vector<std::size_t> shape) {
  if (Tensor<S>::element_count(shape) != a.value().size())
    fail(ErrorKind::ShapeMismatch, "reshape " + shape_string(a.shape()) + " -> " + shape_string(shape));
  Tensor<S> out(std::move(shape), a.value().data);
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(),
                      [ia, self](Tape<S>& t) { detail::accumulate<S>(t, ia, t.grad_mut(self).data); });
}

/// [N, C, T] -> [N, C], mean over time.
template <class S>
Var<S> mean_time(Var<S> a) {
  const auto& sh = a.shape();
  if (sh.size() != 3) fail(ErrorKind::ShapeMismatch, "mean_time expects rank 3");
  const std::size_t rows = sh[0] * sh[1], T = sh[2];
  Tensor<S> out({sh[0], sh[1]});
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r) {
    S acc = 0;
    for (std::size_t t = 0; t < T; ++t) acc += x[r * T + t];
    out[r] = acc / static_cast<S>(T);
  }
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self, rows, T](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    auto& gx = t.grad_mut(ia).data;
    const S inv = S(1) / static_cast<S>(T);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t i = 0; i < T; ++i) gx[r * T + i] += g[r] * inv;
  });
}

/// [N, C] -> [N, C, T] with every time step equal to factor * a[n, c].
template <class S>
Var<S> expand_time(Var<S> a, std::size_t T, S factor) {
  const auto& sh = a.shape();
  if (sh.size() != 2) fail(ErrorKind::ShapeMismatch, "expand_time expects rank 2");
  const std::size_t rows = sh[0] * sh[1];
  Tensor<S> out({sh[0], sh[1], T});
  const auto& x = a.value().data;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < T; ++i) out[r * T + i] = factor * x[r];
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self, rows, T, factor](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    auto& gx = t.grad_mut(ia).data;
    for (std::size_t r = 0; r < rows; ++r) {
      S acc = 0;
      for (std::size_t i = 0; i < T; ++i) acc += g[r * T + i];
      gx[r] += factor * acc;
    }
  });
}

// ---------------------------------------------------------------------------------------------
// convolution and dense layers

/// x [N, Cin, T], w [Cout, Cin, K] (K odd), optional b [Cout] -> [N, Cout, T], same padding.
template <class S>
Var<S> conv1d(Var<S> x, Var<S> w, const Var<S>* b = nullptr) {
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 3 || ws[1] != xs[1] || ws[2] % 2 == 0)
    fail(ErrorKind::ShapeMismatch, "conv1d: x " + shape_string(xs) + ", w " + shape_string(ws));
  if (b && b->shape() != std::vector<std::size_t>{ws[0]})
    fail(ErrorKind::ShapeMismatch, "conv1d bias " + shape_string(b->shape()));
  const kernels::ConvDims d{xs[0], xs[1], ws[0], xs[2], ws[2]};
  Tensor<S> out({d.n, d.cout, d.len});
  kernels::conv1d_forward(d, x.value().ptr(), w.value().ptr(), b ? b->value().ptr() : nullptr, out.ptr());
  const std::size_t ix = x.id, iw = w.id;
  const std::ptrdiff_t ib = b ? static_cast<std::ptrdiff_t>(b->id) : -1;
  const bool rg = detail::any_grad({x, w}) || (b && b->requires_grad());
  std::size_t self = x.tape->size();
  return x.tape->push(std::move(out), rg, [d, ix, iw, ib, self](Tape<S>& t) {
    const S* g = t.grad_mut(self).ptr();
    if (t.requires_grad_at(ix)) kernels::conv1d_backward_data(d, g, t.value_at(iw).ptr(), t.grad_mut(ix).ptr());
    if (t.requires_grad_at(iw)) kernels::conv1d_backward_weight(d, g, t.value_at(ix).ptr(), t.grad_mut(iw).ptr());
    if (ib >= 0 && t.requires_grad_at(static_cast<std::size_t>(ib))) {
      auto& gb = t.grad_mut(static_cast<std::size_t>(ib)).data;
      for (std::size_t n = 0; n < d.n; ++n)
        for (std::size_t co = 0; co < d.cout; ++co) {
          S acc = 0;
          const S* go = g + (n * d.cout + co) * d.len;
          for (std::size_t i = 0; i < d.len; ++i) acc += go[i];
          gb[co] += acc;
        }
    }
  });
}

/// Adjoint of conv1d w.r.t. its input: g [N, Cout, T], w [Cout, Cin, K] -> [N, Cin, T].
template <class S>
Var<S> conv1d_transpose(Var<S> g, Var<S> w) {
  const auto& gs = g.shape();
  const auto& ws = w.shape();
  if (gs.size() != 3 || ws.size() != 3 || ws[0] != gs[1] || ws[2] % 2 == 0)
    fail(ErrorKind::ShapeMismatch, "conv1d_transpose: g " + shape_string(gs) + ", w " + shape_string(ws));
  const kernels::ConvDims d{gs[0], ws[1], ws[0], gs[2], ws[2]};
  Tensor<S> out({d.n, d.cin, d.len});
  kernels::conv1d_backward_data(d, g.value().ptr(), w.value().ptr(), out.ptr());
  const std::size_t ig = g.id, iw = w.id;
  std::size_t self = g.tape->size();
  return g.tape->push(std::move(out), detail::any_grad({g, w}), [d, ig, iw, self](Tape<S>& t) {
    const S* ybar = t.grad_mut(self).ptr();
    if (t.requires_grad_at(ig)) {
      Tensor<S> tmp({d.n, d.cout, d.len});
      kernels::conv1d_forward(d, ybar, t.value_at(iw).ptr(), static_cast<const S*>(nullptr), tmp.ptr());
      detail::accumulate<S>(t, ig, tmp.data);
    }
    if (t.requires_grad_at(iw)) kernels::conv1d_backward_weight(d, t.value_at(ig).ptr(), ybar, t.grad_mut(iw).ptr());
  });
}

/// x [N, D], W [R, D], optional b [R] -> [N, R].
template <class S>
Var<S> linear(Var<S> x, Var<S> W, const Var<S>* b = nullptr) {
  const auto& xs = x.shape();
  const auto& ws = W.shape();
  if (xs.size() != 2 || ws.size() != 2 || ws[1] != xs[1])
    fail(ErrorKind::ShapeMismatch, "linear: x " + shape_string(xs) + ", W " + shape_string(ws));
  if (b && b->shape() != std::vector<std::size_t>{ws[0]})
    fail(ErrorKind::ShapeMismatch, "linear bias " + shape_string(b->shape()));
  const std::size_t n = xs[0], in = xs[1], outd = ws[0];
  Tensor<S> out({n, outd});
  kernels::linear_forward(n, in, outd, x.value().ptr(), W.value().ptr(), b ? b->value().ptr() : nullptr, out.ptr());
  const std::size_t ix = x.id, iw = W.id;
  const std::ptrdiff_t ib = b ? static_cast<std::ptrdiff_t>(b->id) : -1;
  const bool rg = detail::any_grad({x, W}) || (b && b->requires_grad());
  std::size_t self = x.tape->size();
  return x.tape->push(std::move(out), rg, [n, in, outd, ix, iw, ib, self](Tape<S>& t) {
    const S* g = t.grad_mut(self).ptr();
    if (t.requires_grad_at(ix)) kernels::linear_backward_data(n, in, outd, g, t.value_at(iw).ptr(), t.grad_mut(ix).ptr());
    if (t.requires_grad_at(iw)) kernels::linear_backward_weight(n, in, outd, g, t.value_at(ix).ptr(), t.grad_mut(iw).ptr());
    if (ib >= 0 && t.requires_grad_at(static_cast<std::size_t>(ib))) {
      auto& gb = t.grad_mut(static_cast<std::size_t>(ib)).data;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < outd; ++r) gb[r] += g[i * outd + r];
    }
  });
}

/// Adjoint of linear w.r.t. its input: g [N, R], W [R, D] -> [N, D].
template <class S>
Var<S> linear_transpose(Var<S> g, Var<S> W) {
  const auto& gs = g.shape();
  const auto& ws = W.shape();
  if (gs.size() != 2 || ws.size() != 2 || ws[0] != gs[1])
    fail(ErrorKind::ShapeMismatch, "linear_transpose: g " + shape_string(gs) + ", W " + shape_string(ws));
  const std::size_t n = gs[0], outd = ws[0], in = ws[1];
  Tensor<S> out({n, in});
  kernels::linear_backward_data(n, in, outd, g.value().ptr(), W.value().ptr(), out.ptr());
  const std::size_t ig = g.id, iw = W.id;
  std::size_t self = g.tape->size();
  return g.tape->push(std::move(out), detail::any_grad({g, W}), [n, in, outd, ig, iw, self](Tape<S>& t) {
    const S* ybar = t.grad_mut(self).ptr();
    if (t.requires_grad_at(ig)) {
      Tensor<S> tmp({n, outd});
      kernels::linear_forward(n, in, outd, ybar, t.value_at(iw).ptr(), static_cast<const S*>(nullptr), tmp.ptr());
      detail::accumulate<S>(t, ig, tmp.data);
    }
    if (t.requires_grad_at(iw)) kernels::linear_backward_weight(n, in, outd, t.value_at(ig).ptr(), ybar, t.grad_mut(iw).ptr());
  });
}

/// Rows of a [N, D] matrix selected by index -> [M, D].
template <class S>
Var<S> gather_rows(Var<S> a, std::vector<std::size_t> idx) {
  const auto& sh = a.shape();
  if (sh.size() != 2) fail(ErrorKind::ShapeMismatch, "gather_rows expects rank 2");
  const std::size_t D = sh[1];
  Tensor<S> out({idx.size(), D});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= sh[0]) fail(ErrorKind::ShapeMismatch, "gather_rows index out of range");
    std::copy_n(a.value().ptr() + idx[i] * D, D, out.ptr() + i * D);
  }
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self, D, idx = std::move(idx)](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    auto& gx = t.grad_mut(ia).data;
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < D; ++j) gx[idx[i] * D + j] += g[i * D + j];
  });
}

/// [N, D] -> [N], sum over the last axis.
template <class S>
Var<S> row_sum(Var<S> a) {
  const auto& sh = a.shape();
  if (sh.size() != 2) fail(ErrorKind::ShapeMismatch, "row_sum expects rank 2");
  const std::size_t N = sh[0], D = sh[1];
  Tensor<S> out({N});
  for (std::size_t i = 0; i < N; ++i) {
    S acc = 0;
    for (std::size_t j = 0; j < D; ++j) acc += a.value()[i * D + j];
    out[i] = acc;
  }
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(std::move(out), a.requires_grad(), [ia, self, N, D](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const auto& g = t.grad_mut(self).data;
    auto& gx = t.grad_mut(ia).data;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < D; ++j) gx[i * D + j] += g[i];
  });
}

// ---------------------------------------------------------------------------------------------
// reductions and losses (accumulated in double)

template <class S>
Var<S> sum(Var<S> a) {
  double acc = 0.0;
  for (S v : a.value().data) acc += v;
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(Tensor<S>({1}, static_cast<S>(acc)), a.requires_grad(), [ia, self](Tape<S>& t) {
    if (!t.requires_grad_at(ia)) return;
    const S g = t.grad_mut(self)[0];
    for (auto& v : t.grad_mut(ia).data) v += g;
  });
}

/// logits [N, C], one class per row -> [N].
template <class S>
Var<S> pick(Var<S> logits, std::vector<std::size_t> cls) {
  const auto& sh = logits.shape();
  if (sh.size() != 2 || cls.size() != sh[0]) fail(ErrorKind::ShapeMismatch, "pick");
  const std::size_t C = sh[1];
  Tensor<S> out({sh[0]});
  for (std::size_t i = 0; i < sh[0]; ++i) {
    if (cls[i] >= C) fail(ErrorKind::ShapeMismatch, "pick: class index out of range");
    out[i] = logits.value()[i * C + cls[i]];
  }
  const std::size_t il = logits.id;
  std::size_t self = logits.tape->size();
  return logits.tape->push(std::move(out), logits.requires_grad(), [il, self, C, cls = std::move(cls)](Tape<S>& t) {
    if (!t.requires_grad_at(il)) return;
    const auto& g = t.grad_mut(self).data;
    auto& gl = t.grad_mut(il).data;
    for (std::size_t i = 0; i < cls.size(); ++i) gl[i * C + cls[i]] += g[i];
  });
}

/// Mean squared difference to a constant target.
template <class S>
Var<S> mse(Var<S> a, const Tensor<S>& target) {
  expect_shape(target, a.shape(), "mse target");
  const auto& x = a.value().data;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = static_cast<double>(x[i]) - static_cast<double>(target[i]);
    acc += d * d;
  }
  const double count = static_cast<double>(x.size());
  const std::size_t ia = a.id;
  std::size_t self = a.tape->size();
  return a.tape->push(Tensor<S>({1}, static_cast<S>(acc / count)), a.requires_grad(),
                      [ia, self, target, count](Tape<S>& t) {
                        if (!t.requires_grad_at(ia)) return;
                        const S g = t.grad_mut(self)[0];
                        const auto& x = t.value_at(ia).data;
                        auto& gx = t.grad_mut(ia).data;
                        const S c = static_cast<S>(2.0 / count) * g;
                        for (std::size_t i = 0; i < x.size(); ++i) gx[i] += c * (x[i] - target[i]);
                      });
}

/// Numerically stable softmax of one row, computed in double.
template <class S>
std::vector<double> softmax_row(std::span<const S> logits) {
  double mx = logits.empty() ? 0.0 : static_cast<double>(logits[0]);
  for (S v : logits) mx = std::max(mx, static_cast<double>(v));
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(static_cast<double>(logits[i]) - mx));
  for (auto& v : p) v /= z;
  return p;
}

/// Weighted mean softmax cross-entropy. `class_weights` empty means uniform.
template <class S>
Var<S> softmax_cross_entropy(Var<S> logits, std::vector<std::size_t> labels, std::vector<double> class_weights = {}) {
  const auto& sh = logits.shape();
  if (sh.size() != 2 || labels.size() != sh[0]) fail(ErrorKind::ShapeMismatch, "softmax_cross_entropy");
  const std::size_t N = sh[0], C = sh[1];
  if (class_weights.empty()) class_weights.assign(C, 1.0);
  Tensor<S> probs({N, C});
  double loss = 0.0, wsum = 0.0;
  const auto& lv = logits.value().data;
  for (std::size_t i = 0; i < N; ++i) {
    auto p = softmax_row<S>(std::span<const S>(lv.data() + i * C, C));
    const double w = class_weights.at(labels[i]);
    loss -= w * std::log(std::max(p[labels[i]], 1e-300));
    wsum += w;
    for (std::size_t c = 0; c < C; ++c) probs[i * C + c] = static_cast<S>(p[c]);
  }
  if (wsum <= 0.0) wsum = 1.0;
  const std::size_t il = logits.id;
  std::size_t self = logits.tape->size();
  return logits.tape->push(Tensor<S>({1}, static_cast<S>(loss / wsum)), logits.requires_grad(),
                           [il, self, N, C, wsum, probs = std::move(probs), labels = std::move(labels),
                            class_weights = std::move(class_weights)](Tape<S>& t) {
                             if (!t.requires_grad_at(il)) return;
                             const double g = t.grad_mut(self)[0];
                             auto& gl = t.grad_mut(il).data;
                             for (std::size_t i = 0; i < N; ++i) {
                               const double w = class_weights[labels[i]] * g / wsum;
                               for (std::size_t c = 0; c < C; ++c) {
                                 const double target = c == labels[i] ? 1.0 : 0.0;
                                 gl[i * C + c] += static_cast<S>(w * (static_cast<double>(probs[i * C + c]) - target));
                               }
                             }
                           });
}

}  // namespace cfw::ad
