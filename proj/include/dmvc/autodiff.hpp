// Copyright 2026 the dmvc authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "dmvc/tensor.hpp"

namespace dmvc {

template <typename S>
class Tape;

/// Lightweight handle to a tape node. Copyable, trivially small; the tensor
/// it names lives inside the tape.
template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<S>& val() const;
  const std::vector<int>& shape() const { return val().shape(); }
  long numel() const { return val().numel(); }
};

/// Reverse-mode tape. Ops record a backward closure at construction; values
/// are computed eagerly so a tape doubles as a plain forward evaluator when
/// nothing requires gradients.
template <typename S>
class Tape {
 public:
  Var<S> leaf(Tensor<S> value, bool needs_grad = false) {
    return make(std::move(value), needs_grad, nullptr);
  }

  Var<S> constant(Tensor<S> value) { return leaf(std::move(value), false); }

  Var<S> scalar(S v) { return constant(Tensor<S>({1}, {v})); }

  const Tensor<S>& value(int id) const { return nodes_[size_t(id)].value; }
  bool needs_grad(int id) const { return nodes_[size_t(id)].needs_grad; }

  /// Gradient buffer of a node; allocated (zeroed) on first touch.
  Tensor<S>& grad(int id) {
    Node& n = nodes_[size_t(id)];
    if (n.grad.empty()) n.grad = Tensor<S>::zeros(n.value.shape());
    return n.grad;
  }

  bool has_grad(int id) const { return !nodes_[size_t(id)].grad.empty(); }

  const Tensor<S>& grad_of(const Var<S>& v) {
    return grad(v.id);
  }

  /// Runs reverse-mode accumulation from a scalar root.
  void backward(const Var<S>& root) {
    if (!root.valid() || root.tape != this)
      throw ShapeError("backward: var does not belong to this tape");
    if (root.numel() != 1)
      throw ShapeError("backward: root must be scalar, got shape " +
                       shape_str(root.shape()));
    grad(root.id)[0] = S(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes_[size_t(i)];
      if (n.backprop && n.needs_grad && !n.grad.empty()) n.backprop();
    }
  }

  size_t size() const { return nodes_.size(); }

  // Op builders call this; not intended for direct use elsewhere.
  Var<S> make(Tensor<S> value, bool needs_grad, std::function<void()> backprop) {
    if (!value.all_finite())
      throw Error("non-finite values produced at tape node " +
                  std::to_string(nodes_.size()));
    nodes_.push_back(Node{std::move(value), Tensor<S>(), std::move(backprop),
                          needs_grad});
    return Var<S>{this, int(nodes_.size()) - 1};
  }

 private:
  struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    std::function<void()> backprop;
    bool needs_grad;
  };
  std::vector<Node> nodes_;
};

template <typename S>
const Tensor<S>& Var<S>::val() const {
  return tape->value(id);
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic.

namespace detail {

template <typename S>
Tape<S>* common_tape(const Var<S>& a, const Var<S>& b) {
  if (a.tape != b.tape)
    throw ShapeError("op mixes vars from different tapes");
  return a.tape;
}

}  // namespace detail

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  Tape<S>* t = detail::common_tape(a, b);
  require_same_shape(a.val(), b.val(), "add");
  Tensor<S> out = a.val();
  out.array() += b.val().array();
  bool ng = t->needs_grad(a.id) || t->needs_grad(b.id);
  auto bp = [t, a, b, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    if (t->needs_grad(a.id)) t->grad(a.id).array() += g.array();
    if (t->needs_grad(b.id)) t->grad(b.id).array() += g.array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  Tape<S>* t = detail::common_tape(a, b);
  require_same_shape(a.val(), b.val(), "sub");
  Tensor<S> out = a.val();
  out.array() -= b.val().array();
  bool ng = t->needs_grad(a.id) || t->needs_grad(b.id);
  auto bp = [t, a, b, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    if (t->needs_grad(a.id)) t->grad(a.id).array() += g.array();
    if (t->needs_grad(b.id)) t->grad(b.id).array() -= g.array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  Tape<S>* t = detail::common_tape(a, b);
  require_same_shape(a.val(), b.val(), "mul");
  Tensor<S> out = a.val();
  out.array() *= b.val().array();
  bool ng = t->needs_grad(a.id) || t->needs_grad(b.id);
  auto bp = [t, a, b, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    if (t->needs_grad(a.id))
      t->grad(a.id).array() += g.array() * b.val().array();
    if (t->needs_grad(b.id))
      t->grad(b.id).array() += g.array() * a.val().array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> div(Var<S> a, Var<S> b) {
  Tape<S>* t = detail::common_tape(a, b);
  require_same_shape(a.val(), b.val(), "div");
  Tensor<S> out = a.val();
  out.array() /= b.val().array();
  bool ng = t->needs_grad(a.id) || t->needs_grad(b.id);
  auto bp = [t, a, b, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    if (t->needs_grad(a.id))
      t->grad(a.id).array() += g.array() / b.val().array();
    if (t->needs_grad(b.id))
      t->grad(b.id).array() -=
          g.array() * a.val().array() / b.val().array().square();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> scale(Var<S> a, S k) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  out.array() *= k;
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, k, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id).array() * k;
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> add_const(Var<S> a, S k) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  out.array() += k;
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id).array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> operator+(Var<S> a, Var<S> b) { return add(a, b); }
template <typename S>
Var<S> operator-(Var<S> a, Var<S> b) { return sub(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, Var<S> b) { return mul(a, b); }
template <typename S>
Var<S> operator*(Var<S> a, S k) { return scale(a, k); }
template <typename S>
Var<S> operator*(S k, Var<S> a) { return scale(a, k); }

template <typename S>
Var<S> square(Var<S> a) { return mul(a, a); }

/// y = exp(x)
template <typename S>
Var<S> exp(Var<S> a) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  out.array() = out.array().exp();
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id).array() * t->value(id).array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// y = log(x); caller keeps x positive.
template <typename S>
Var<S> log(Var<S> a) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  out.array() = out.array().log();
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id).array() / a.val().array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// y = erf(x); d/dx = 2/sqrt(pi) * exp(-x^2)
template <typename S>
Var<S> erf(Var<S> a) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  for (long i = 0; i < out.numel(); ++i) out[i] = S(std::erf(double(out[i])));
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    const S c = S(1.1283791670955125738961589031215);  // 2/sqrt(pi)
    t->grad(a.id).array() +=
        t->grad(id).array() * (-a.val().array().square()).exp() * c;
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Numerically stable softplus: log(1 + exp(x)).
template <typename S>
Var<S> softplus(Var<S> a) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  for (long i = 0; i < out.numel(); ++i) {
    double x = double(out[i]);
    out[i] = S(std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))));
  }
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    // sigmoid(x)
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& x = a.val();
    for (long i = 0; i < x.numel(); ++i)
      ga[i] += g[i] * S(1.0 / (1.0 + std::exp(-double(x[i]))));
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> leaky_relu(Var<S> a, S slope = S(0.1)) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  for (long i = 0; i < out.numel(); ++i)
    if (out[i] < S(0)) out[i] *= slope;
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, slope, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& x = a.val();
    for (long i = 0; i < x.numel(); ++i)
      ga[i] += x[i] >= S(0) ? g[i] : g[i] * slope;
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Hard clamp to [lo, hi]; zero gradient outside the active range.
template <typename S>
Var<S> clamp(Var<S> a, S lo, S hi) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  for (long i = 0; i < out.numel(); ++i)
    out[i] = std::min(hi, std::max(lo, out[i]));
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, lo, hi, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& x = a.val();
    for (long i = 0; i < x.numel(); ++i)
      if (x[i] >= lo && x[i] <= hi) ga[i] += g[i];
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> clamp_min(Var<S> a, S lo) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val();
  for (long i = 0; i < out.numel(); ++i) out[i] = std::max(lo, out[i]);
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, lo, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& x = a.val();
    for (long i = 0; i < x.numel(); ++i)
      if (x[i] >= lo) ga[i] += g[i];
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

// ---------------------------------------------------------------------------
// Reductions and broadcasts.

template <typename S>
Var<S> sum_all(Var<S> a) {
  Tape<S>* t = a.tape;
  Tensor<S> out({1}, {a.val().array().sum()});
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id)[0];
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> mean_all(Var<S> a) {
  return scale(sum_all(a), S(1) / S(a.numel()));
}

/// [N,C,H,W] -> [N,C]; mean over the two spatial axes.
template <typename S>
Var<S> mean_spatial(Var<S> a) {
  Tape<S>* t = a.tape;
  const Tensor<S>& x = a.val();
  if (x.rank() != 4)
    throw ShapeError("mean_spatial wants NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1);
  const long hw = long(x.dim(2)) * x.dim(3);
  Tensor<S> out({N, C});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* p = x.data() + (long(n) * C + c) * hw;
      S s = 0;
      for (long i = 0; i < hw; ++i) s += p[i];
      out[long(n) * C + c] = s / S(hw);
    }
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, N, C, hw, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    for (int n = 0; n < N; ++n)
      for (int c = 0; c < C; ++c) {
        S gv = g[long(n) * C + c] / S(hw);
        S* p = ga.data() + (long(n) * C + c) * hw;
        for (long i = 0; i < hw; ++i) p[i] += gv;
      }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// x[N,C,H,W] * s[N,C], s broadcast over space.
template <typename S>
Var<S> mul_channelwise(Var<S> x, Var<S> s) {
  Tape<S>* t = detail::common_tape(x, s);
  const Tensor<S>& xv = x.val();
  const Tensor<S>& sv = s.val();
  if (xv.rank() != 4 || sv.rank() != 2 || xv.dim(0) != sv.dim(0) ||
      xv.dim(1) != sv.dim(1))
    throw ShapeError("mul_channelwise: shape mismatch " +
                     shape_str(xv.shape()) + " vs " + shape_str(sv.shape()));
  const int N = xv.dim(0), C = xv.dim(1);
  const long hw = long(xv.dim(2)) * xv.dim(3);
  Tensor<S> out = xv;
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      S k = sv[long(n) * C + c];
      S* p = out.data() + (long(n) * C + c) * hw;
      for (long i = 0; i < hw; ++i) p[i] *= k;
    }
  bool ng = t->needs_grad(x.id) || t->needs_grad(s.id);
  auto bp = [t, x, s, N, C, hw, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    if (t->needs_grad(x.id)) {
      Tensor<S>& gx = t->grad(x.id);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          S k = s.val()[long(n) * C + c];
          const S* gp = g.data() + (long(n) * C + c) * hw;
          S* p = gx.data() + (long(n) * C + c) * hw;
          for (long i = 0; i < hw; ++i) p[i] += gp[i] * k;
        }
    }
    if (t->needs_grad(s.id)) {
      Tensor<S>& gs = t->grad(s.id);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const S* gp = g.data() + (long(n) * C + c) * hw;
          const S* xp = x.val().data() + (long(n) * C + c) * hw;
          S acc = 0;
          for (long i = 0; i < hw; ++i) acc += gp[i] * xp[i];
          gs[long(n) * C + c] += acc;
        }
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Plain data-preserving reshape (copies; tensors are small here).
template <typename S>
Var<S> reshape(Var<S> a, std::vector<int> shape) {
  Tape<S>* t = a.tape;
  Tensor<S> out = a.val().reshaped(shape);
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, id = int(t->size())]() {
    t->grad(a.id).array() += t->grad(id).array();
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Softmax along `axis`. Shift-invariant by construction (max subtraction).
template <typename S>
Var<S> softmax(Var<S> a, int axis) {
  Tape<S>* t = a.tape;
  const Tensor<S>& x = a.val();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError("softmax: axis " + std::to_string(axis) +
                     " invalid for shape " + shape_str(x.shape()));
  long outer = 1, inner = 1;
  const int n = x.dim(axis);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);

  Tensor<S> out(x.shape());
  for (long o = 0; o < outer; ++o)
    for (long in = 0; in < inner; ++in) {
      const long base = o * n * inner + in;
      S mx = x[base];
      for (int k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      S z = 0;
      for (int k = 0; k < n; ++k) {
        S e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (int k = 0; k < n; ++k) out[base + k * inner] /= z;
    }
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, outer, inner, n, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& y = t->value(id);
    for (long o = 0; o < outer; ++o)
      for (long in = 0; in < inner; ++in) {
        const long base = o * n * inner + in;
        S dot = 0;
        for (int k = 0; k < n; ++k)
          dot += g[base + k * inner] * y[base + k * inner];
        for (int k = 0; k < n; ++k) {
          const long i = base + k * inner;
          ga[i] += y[i] * (g[i] - dot);
        }
      }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

}  // namespace dmvc
