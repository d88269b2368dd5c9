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

#include "dmvc/autodiff.hpp"

namespace dmvc {

namespace detail {

template <typename S>
using RowMat =
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// im2col for one image: x [C,H,W] -> cols [C*kh*kw, Ho*Wo].
template <typename S>
void im2col(const S* x, int C, int H, int W, int kh, int kw, int stride,
            int pad, int Ho, int Wo, S* cols) {
  const long ow = long(Ho) * Wo;
  long r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        S* dst = cols + r * ow;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < Wo; ++ox) dst[long(oy) * Wo + ox] = S(0);
            continue;
          }
          const S* src = x + (long(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            dst[long(oy) * Wo + ox] =
                (ix >= 0 && ix < W) ? src[ix] : S(0);
          }
        }
      }
}

/// Transpose of im2col: scatter-add cols back into an image gradient.
template <typename S>
void col2im_add(const S* cols, int C, int H, int W, int kh, int kw, int stride,
                int pad, int Ho, int Wo, S* gx) {
  const long ow = long(Ho) * Wo;
  long r = 0;
  for (int c = 0; c < C; ++c)
    for (int ki = 0; ki < kh; ++ki)
      for (int kj = 0; kj < kw; ++kj, ++r) {
        const S* src = cols + r * ow;
        for (int oy = 0; oy < Ho; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= H) continue;
          S* dst = gx + (long(c) * H + iy) * W;
          for (int ox = 0; ox < Wo; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < W) dst[ix] += src[long(oy) * Wo + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D convolution, NCHW. kernel [O,C,kh,kw] with odd kh,kw; output spatial
/// size floor((H + 2 pad - kh)/stride) + 1. Gradients flow to x, kernel and
/// bias. Internally im2col plus a GEMM per image.
template <typename S>
Var<S> conv2d(Var<S> x, Var<S> kernel, Var<S> bias, int stride = 1,
              int pad = 0) {
  Tape<S>* t = detail::common_tape(x, kernel);
  (void)detail::common_tape(kernel, bias);
  const Tensor<S>& xv = x.val();
  const Tensor<S>& kv = kernel.val();
  const Tensor<S>& bv = bias.val();
  if (xv.rank() != 4 || kv.rank() != 4)
    throw ShapeError("conv2d: want x NCHW and kernel OCKK, got " +
                     shape_str(xv.shape()) + " and " + shape_str(kv.shape()));
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int O = kv.dim(0), kh = kv.dim(2), kw = kv.dim(3);
  if (kv.dim(1) != C)
    throw ShapeError("conv2d: input channels differ, x " +
                     shape_str(xv.shape()) + " vs kernel " +
                     shape_str(kv.shape()));
  if (kh % 2 == 0 || kw % 2 == 0)
    throw ShapeError("conv2d: kernel extents must be odd, got " +
                     shape_str(kv.shape()));
  if (stride < 1 || pad < 0)
    throw ShapeError("conv2d: bad stride/pad");
  if (bv.rank() != 1 || bv.dim(0) != O)
    throw ShapeError("conv2d: bias shape " + shape_str(bv.shape()) +
                     " does not match kernel " + shape_str(kv.shape()));
  const int Ho = (H + 2 * pad - kh) / stride + 1;
  const int Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0)
    throw ShapeError("conv2d: empty output for input " + shape_str(xv.shape()) +
                     " kernel " + shape_str(kv.shape()));

  const long ckk = long(C) * kh * kw;
  const long ow = long(Ho) * Wo;
  using detail::RowMat;
  Tensor<S> out({N, O, Ho, Wo});
  {
    RowMat<S> cols(ckk, ow);
    Eigen::Map<const RowMat<S>> wmat(kv.data(), O, ckk);
    for (int n = 0; n < N; ++n) {
      detail::im2col(xv.data() + long(n) * C * H * W, C, H, W, kh, kw, stride,
                     pad, Ho, Wo, cols.data());
      Eigen::Map<RowMat<S>> omat(out.data() + long(n) * O * ow, O, ow);
      omat.noalias() = wmat * cols;
      for (int o = 0; o < O; ++o) omat.row(o).array() += bv[o];
    }
  }

  bool ng = t->needs_grad(x.id) || t->needs_grad(kernel.id) ||
            t->needs_grad(bias.id);
  auto bp = [t, x, kernel, bias, N, C, H, W, O, kh, kw, stride, pad, Ho, Wo,
             ckk, ow, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& xv2 = x.val();
    const Tensor<S>& kv2 = kernel.val();
    const bool gx = t->needs_grad(x.id);
    const bool gk = t->needs_grad(kernel.id);
    const bool gb = t->needs_grad(bias.id);
    Eigen::Map<const RowMat<S>> wmat(kv2.data(), O, ckk);
    RowMat<S> cols(ckk, ow);
    RowMat<S> gcols(ckk, ow);
    for (int n = 0; n < N; ++n) {
      Eigen::Map<const RowMat<S>> gmat(g.data() + long(n) * O * ow, O, ow);
      if (gk || gx)
        detail::im2col(xv2.data() + long(n) * C * H * W, C, H, W, kh, kw,
                       stride, pad, Ho, Wo, cols.data());
      if (gk) {
        Eigen::Map<RowMat<S>> gw(t->grad(kernel.id).data(), O, ckk);
        gw.noalias() += gmat * cols.transpose();
      }
      if (gb) {
        Tensor<S>& gbias = t->grad(bias.id);
        for (int o = 0; o < O; ++o) gbias[o] += gmat.row(o).sum();
      }
      if (gx) {
        gcols.noalias() = wmat.transpose() * gmat;
        detail::col2im_add(gcols.data(), C, H, W, kh, kw, stride, pad, Ho, Wo,
                           t->grad(x.id).data() + long(n) * C * H * W);
      }
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Fully connected layer: x [N,K] * w [K,M] + b [M].
template <typename S>
Var<S> linear(Var<S> x, Var<S> w, Var<S> b) {
  Tape<S>* t = detail::common_tape(x, w);
  (void)detail::common_tape(w, b);
  const Tensor<S>& xv = x.val();
  const Tensor<S>& wv = w.val();
  const Tensor<S>& bv = b.val();
  if (xv.rank() != 2 || wv.rank() != 2 || xv.dim(1) != wv.dim(0) ||
      bv.rank() != 1 || bv.dim(0) != wv.dim(1))
    throw ShapeError("linear: shape mismatch " + shape_str(xv.shape()) + " * " +
                     shape_str(wv.shape()) + " + " + shape_str(bv.shape()));
  const int N = xv.dim(0), K = xv.dim(1), M = wv.dim(1);
  using detail::RowMat;
  Tensor<S> out({N, M});
  {
    Eigen::Map<const RowMat<S>> xm(xv.data(), N, K);
    Eigen::Map<const RowMat<S>> wm(wv.data(), K, M);
    Eigen::Map<RowMat<S>> om(out.data(), N, M);
    om.noalias() = xm * wm;
    for (int n = 0; n < N; ++n) om.row(n) += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bv.data(), M);
  }
  bool ng = t->needs_grad(x.id) || t->needs_grad(w.id) || t->needs_grad(b.id);
  auto bp = [t, x, w, b, N, K, M, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    Eigen::Map<const RowMat<S>> gm(g.data(), N, M);
    Eigen::Map<const RowMat<S>> xm(x.val().data(), N, K);
    Eigen::Map<const RowMat<S>> wm(w.val().data(), K, M);
    if (t->needs_grad(x.id)) {
      Eigen::Map<RowMat<S>> gx(t->grad(x.id).data(), N, K);
      gx.noalias() += gm * wm.transpose();
    }
    if (t->needs_grad(w.id)) {
      Eigen::Map<RowMat<S>> gw(t->grad(w.id).data(), K, M);
      gw.noalias() += xm.transpose() * gm;
    }
    if (t->needs_grad(b.id)) {
      Tensor<S>& gb = t->grad(b.id);
      for (int m = 0; m < M; ++m) gb[m] += gm.col(m).sum();
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Backward-warp x by a dense displacement field, bilinear taps with edge
/// clamping: out(p) = x(p + flow(p)). flow is [N,2,H,W], channel 0 = dx,
/// channel 1 = dy, both in pixels. Differentiable in x and flow.
template <typename S>
Var<S> bilinear_warp(Var<S> x, Var<S> flow) {
  Tape<S>* t = detail::common_tape(x, flow);
  const Tensor<S>& xv = x.val();
  const Tensor<S>& fv = flow.val();
  if (xv.rank() != 4 || fv.rank() != 4 || fv.dim(1) != 2 ||
      xv.dim(0) != fv.dim(0) || xv.dim(2) != fv.dim(2) ||
      xv.dim(3) != fv.dim(3))
    throw ShapeError("bilinear_warp: x " + shape_str(xv.shape()) +
                     " vs flow " + shape_str(fv.shape()));
  const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const long hw = long(H) * W;

  auto clampi = [](int v, int hi) { return v < 0 ? 0 : (v > hi ? hi : v); };

  Tensor<S> out(xv.shape());
  for (int n = 0; n < N; ++n) {
    const S* dxp = fv.data() + (long(n) * 2 + 0) * hw;
    const S* dyp = fv.data() + (long(n) * 2 + 1) * hw;
    for (int y = 0; y < H; ++y)
      for (int xo = 0; xo < W; ++xo) {
        const long p = long(y) * W + xo;
        const S sx = S(xo) + dxp[p];
        const S sy = S(y) + dyp[p];
        const int x0 = int(std::floor(double(sx)));
        const int y0 = int(std::floor(double(sy)));
        const S fx = sx - S(x0);
        const S fy = sy - S(y0);
        const int x0c = clampi(x0, W - 1), x1c = clampi(x0 + 1, W - 1);
        const int y0c = clampi(y0, H - 1), y1c = clampi(y0 + 1, H - 1);
        for (int c = 0; c < C; ++c) {
          const S* src = xv.data() + (long(n) * C + c) * hw;
          const S v00 = src[long(y0c) * W + x0c];
          const S v01 = src[long(y0c) * W + x1c];
          const S v10 = src[long(y1c) * W + x0c];
          const S v11 = src[long(y1c) * W + x1c];
          const S top = v00 + fx * (v01 - v00);
          const S bot = v10 + fx * (v11 - v10);
          out.data()[(long(n) * C + c) * hw + p] = top + fy * (bot - top);
        }
      }
  }

  bool ng = t->needs_grad(x.id) || t->needs_grad(flow.id);
  auto bp = [t, x, flow, N, C, H, W, hw, clampi, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    const Tensor<S>& xv2 = x.val();
    const Tensor<S>& fv2 = flow.val();
    const bool want_gx = t->needs_grad(x.id);
    const bool want_gf = t->needs_grad(flow.id);
    for (int n = 0; n < N; ++n) {
      const S* dxp = fv2.data() + (long(n) * 2 + 0) * hw;
      const S* dyp = fv2.data() + (long(n) * 2 + 1) * hw;
      S* gdx = want_gf ? t->grad(flow.id).data() + (long(n) * 2 + 0) * hw : nullptr;
      S* gdy = want_gf ? t->grad(flow.id).data() + (long(n) * 2 + 1) * hw : nullptr;
      for (int y = 0; y < H; ++y)
        for (int xo = 0; xo < W; ++xo) {
          const long p = long(y) * W + xo;
          const S sx = S(xo) + dxp[p];
          const S sy = S(y) + dyp[p];
          const int x0 = int(std::floor(double(sx)));
          const int y0 = int(std::floor(double(sy)));
          const S fx = sx - S(x0);
          const S fy = sy - S(y0);
          const int x0c = clampi(x0, W - 1), x1c = clampi(x0 + 1, W - 1);
          const int y0c = clampi(y0, H - 1), y1c = clampi(y0 + 1, H - 1);
          // When a tap is clamped, moving the sample point does not change
          // the fetched value, so the flow gradient through that pair is 0.
          const bool xin = (x0 == x0c && x0 + 1 == x1c);
          const bool yin = (y0 == y0c && y0 + 1 == y1c);
          S gdx_acc = 0, gdy_acc = 0;
          for (int c = 0; c < C; ++c) {
            const S go = g.data()[(long(n) * C + c) * hw + p];
            if (go == S(0)) continue;
            const S* src = xv2.data() + (long(n) * C + c) * hw;
            const S v00 = src[long(y0c) * W + x0c];
            const S v01 = src[long(y0c) * W + x1c];
            const S v10 = src[long(y1c) * W + x0c];
            const S v11 = src[long(y1c) * W + x1c];
            if (want_gx) {
              S* gsrc = t->grad(x.id).data() + (long(n) * C + c) * hw;
              gsrc[long(y0c) * W + x0c] += go * (S(1) - fx) * (S(1) - fy);
              gsrc[long(y0c) * W + x1c] += go * fx * (S(1) - fy);
              gsrc[long(y1c) * W + x0c] += go * (S(1) - fx) * fy;
              gsrc[long(y1c) * W + x1c] += go * fx * fy;
            }
            if (want_gf) {
              if (xin)
                gdx_acc += go * ((v01 - v00) * (S(1) - fy) + (v11 - v10) * fy);
              if (yin)
                gdy_acc += go * ((v10 - v00) * (S(1) - fx) + (v11 - v01) * fx);
            }
          }
          if (want_gf) {
            gdx[p] += gdx_acc;
            gdy[p] += gdy_acc;
          }
        }
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Nearest-neighbour 2x spatial upsampling.
template <typename S>
Var<S> upsample2x(Var<S> a) {
  Tape<S>* t = a.tape;
  const Tensor<S>& x = a.val();
  if (x.rank() != 4)
    throw ShapeError("upsample2x wants NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  Tensor<S> out({N, C, 2 * H, 2 * W});
  for (long nc = 0; nc < long(N) * C; ++nc) {
    const S* src = x.data() + nc * H * W;
    S* dst = out.data() + nc * 4 * H * W;
    for (int y = 0; y < 2 * H; ++y)
      for (int xo = 0; xo < 2 * W; ++xo)
        dst[long(y) * 2 * W + xo] = src[long(y / 2) * W + xo / 2];
  }
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, N, C, H, W, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    for (long nc = 0; nc < long(N) * C; ++nc) {
      S* dst = ga.data() + nc * H * W;
      const S* src = g.data() + nc * 4 * H * W;
      for (int y = 0; y < 2 * H; ++y)
        for (int xo = 0; xo < 2 * W; ++xo)
          dst[long(y / 2) * W + xo / 2] += src[long(y) * 2 * W + xo];
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// 2x2 average pooling with stride 2; odd trailing row/column dropped.
template <typename S>
Var<S> avg_pool2(Var<S> a) {
  Tape<S>* t = a.tape;
  const Tensor<S>& x = a.val();
  if (x.rank() != 4)
    throw ShapeError("avg_pool2 wants NCHW, got " + shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = H / 2, Wo = W / 2;
  if (Ho == 0 || Wo == 0)
    throw ShapeError("avg_pool2: input too small " + shape_str(x.shape()));
  Tensor<S> out({N, C, Ho, Wo});
  for (long nc = 0; nc < long(N) * C; ++nc) {
    const S* src = x.data() + nc * H * W;
    S* dst = out.data() + nc * Ho * Wo;
    for (int y = 0; y < Ho; ++y)
      for (int xo = 0; xo < Wo; ++xo)
        dst[long(y) * Wo + xo] =
            (src[long(2 * y) * W + 2 * xo] + src[long(2 * y) * W + 2 * xo + 1] +
             src[long(2 * y + 1) * W + 2 * xo] +
             src[long(2 * y + 1) * W + 2 * xo + 1]) *
            S(0.25);
  }
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, N, C, H, W, Ho, Wo, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    for (long nc = 0; nc < long(N) * C; ++nc) {
      S* dst = ga.data() + nc * H * W;
      const S* src = g.data() + nc * Ho * Wo;
      for (int y = 0; y < Ho; ++y)
        for (int xo = 0; xo < Wo; ++xo) {
          const S gv = src[long(y) * Wo + xo] * S(0.25);
          dst[long(2 * y) * W + 2 * xo] += gv;
          dst[long(2 * y) * W + 2 * xo + 1] += gv;
          dst[long(2 * y + 1) * W + 2 * xo] += gv;
          dst[long(2 * y + 1) * W + 2 * xo + 1] += gv;
        }
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

/// Channel-axis concatenation of NCHW tensors with matching N,H,W.
template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  Tape<S>* t = parts[0].tape;
  const int N = parts[0].val().dim(0);
  const int H = parts[0].val().dim(2);
  const int W = parts[0].val().dim(3);
  int C = 0;
  bool ng = false;
  for (const Var<S>& p : parts) {
    const Tensor<S>& v = p.val();
    if (p.tape != t) throw ShapeError("concat mixes tapes");
    if (v.rank() != 4 || v.dim(0) != N || v.dim(2) != H || v.dim(3) != W)
      throw ShapeError("concat_channels: incompatible part " +
                       shape_str(v.shape()));
    C += v.dim(1);
    ng = ng || t->needs_grad(p.id);
  }
  const long hw = long(H) * W;
  Tensor<S> out({N, C, H, W});
  for (int n = 0; n < N; ++n) {
    long coff = 0;
    for (const Var<S>& p : parts) {
      const Tensor<S>& v = p.val();
      const int pc = v.dim(1);
      std::memcpy(out.data() + (long(n) * C + coff) * hw,
                  v.data() + long(n) * pc * hw, size_t(pc * hw) * sizeof(S));
      coff += pc;
    }
  }
  auto bp = [t, parts, N, C, hw, id = int(t->size())]() {
    const Tensor<S>& g = t->grad(id);
    for (int n = 0; n < N; ++n) {
      long coff = 0;
      for (const Var<S>& p : parts) {
        const int pc = p.val().dim(1);
        if (t->needs_grad(p.id)) {
          S* dst = t->grad(p.id).data() + long(n) * pc * hw;
          const S* src = g.data() + (long(n) * C + coff) * hw;
          for (long i = 0; i < long(pc) * hw; ++i) dst[i] += src[i];
        }
        coff += pc;
      }
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

template <typename S>
Var<S> concat_channels(Var<S> a, Var<S> b) {
  return concat_channels(std::vector<Var<S>>{a, b});
}

/// Channel slice [from, from+count) of an NCHW tensor.
template <typename S>
Var<S> slice_channels(Var<S> a, int from, int count) {
  Tape<S>* t = a.tape;
  const Tensor<S>& x = a.val();
  if (x.rank() != 4 || from < 0 || count <= 0 || from + count > x.dim(1))
    throw ShapeError("slice_channels [" + std::to_string(from) + "," +
                     std::to_string(from + count) + ") invalid for " +
                     shape_str(x.shape()));
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long hw = long(H) * W;
  Tensor<S> out({N, count, H, W});
  for (int n = 0; n < N; ++n)
    std::memcpy(out.data() + long(n) * count * hw,
                x.data() + (long(n) * C + from) * hw,
                size_t(count * hw) * sizeof(S));
  bool ng = t->needs_grad(a.id);
  auto bp = [t, a, from, count, N, C, hw, id = int(t->size())]() {
    Tensor<S>& ga = t->grad(a.id);
    const Tensor<S>& g = t->grad(id);
    for (int n = 0; n < N; ++n) {
      S* dst = ga.data() + (long(n) * C + from) * hw;
      const S* src = g.data() + long(n) * count * hw;
      for (long i = 0; i < long(count) * hw; ++i) dst[i] += src[i];
    }
  };
  return t->make(std::move(out), ng, ng ? std::function<void()>(bp) : nullptr);
}

}  // namespace dmvc
