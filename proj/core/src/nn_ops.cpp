#include "npp/nn_ops.hpp"

#include <algorithm>
#include <cmath>

namespace npp::ad {

namespace {

template <class T>
Tensor<T> make_out(Shape shape) {
  const int64_t n = numel(shape);
  return Tensor<T>(std::move(shape), std::vector<T>(static_cast<size_t>(n)));
}

void check_vol(int ndim, const char* op) {
  require(ndim == 5, std::string(op) + ": expected [N,C,D,H,W] input");
}

// Output extent for one axis; throws unless the stride divides exactly.
int64_t conv_out_extent(int64_t s, int64_t k, int64_t stride, int64_t pad, const char* axis) {
  require(k >= 1 && k % 2 == 1, std::string("conv3d: kernel extent along ") + axis + " must be odd");
  const int64_t span = s + 2 * pad - k;
  require(span >= 0, std::string("conv3d: kernel larger than padded input along ") + axis);
  require(span % stride == 0,
          std::string("conv3d: stride does not divide padded extent along ") + axis);
  return span / stride + 1;
}

// First/last output index whose sampled input index stays in [0, S).
inline void ow_bounds(int64_t off, int64_t stride, int64_t in_extent, int64_t out_extent,
                      int64_t& lo, int64_t& hi) {
  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  const int64_t top = in_extent - 1 - off;
  hi = top < 0 ? lo : std::min(out_extent, top / stride + 1);
  if (hi < lo) hi = lo;
}

}  // namespace

// ---- conv3d ---------------------------------------------------------------

template <class T>
Tensor<T> conv3d(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride, int pad) {
  check_vol(x.ndim(), "conv3d");
  require(w.ndim() == 5, "conv3d: weight must be [F,C,kd,kh,kw]");
  require(stride >= 1, "conv3d: stride must be positive");
  require(pad >= 0, "conv3d: negative padding");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t F = w.dim(0), kd = w.dim(2), kh = w.dim(3), kw = w.dim(4);
  require(w.dim(1) == C, "conv3d: weight channels " + std::to_string(w.dim(1)) +
                             " vs input channels " + std::to_string(C));
  require(b.ndim() == 1 && b.dim(0) == F, "conv3d: bias must be [F]");
  const int64_t Do = conv_out_extent(D, kd, stride, pad, "D");
  const int64_t Ho = conv_out_extent(H, kh, stride, pad, "H");
  const int64_t Wo = conv_out_extent(W, kw, stride, pad, "W");

  Tensor<T> out = make_out<T>(Shape{N, F, Do, Ho, Wo});
  const T* px = x.data();
  const T* pw = w.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t s = stride, p = pad;

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t f = 0; f < F; ++f) {
      T* oblk = po + (n * F + f) * Do * Ho * Wo;
      for (int64_t od = 0; od < Do; ++od) {
        for (int64_t oh = 0; oh < Ho; ++oh) {
          T* orow = oblk + (od * Ho + oh) * Wo;
          const T bias = pb[f];
          for (int64_t ow = 0; ow < Wo; ++ow) orow[ow] = bias;
          for (int64_t c = 0; c < C; ++c) {
            const T* xblk = px + (n * C + c) * D * H * W;
            const T* wblk = pw + (f * C + c) * kd * kh * kw;
            for (int64_t a = 0; a < kd; ++a) {
              const int64_t id = od * s + a - p;
              if (id < 0 || id >= D) continue;
              for (int64_t bh = 0; bh < kh; ++bh) {
                const int64_t ih = oh * s + bh - p;
                if (ih < 0 || ih >= H) continue;
                const T* xrow = xblk + (id * H + ih) * W;
                const T* wrow = wblk + (a * kh + bh) * kw;
                for (int64_t cw = 0; cw < kw; ++cw) {
                  const int64_t off = cw - p;
                  const T wv = wrow[cw];
                  int64_t lo, hi;
                  ow_bounds(off, s, W, Wo, lo, hi);
                  if (s == 1) {
                    const T* xs = xrow + off;
                    for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xs[ow];
                  } else {
                    for (int64_t ow = lo; ow < hi; ++ow) orow[ow] += wv * xrow[ow * s + off];
                  }
                }
              }
            }
          }
        }
      }
    }
  }

  if (x.tracked() || w.tracked() || b.tracked()) {
    const int64_t nx = x.node, nw = w.node, nb = b.node;
    auto vx = x.vals, vw = w.vals;
    out.node = g.push(out.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      const T* pgy = gy.data();
      const T* px2 = vx->data();
      const T* pw2 = vw->data();

      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        for (int64_t f = 0; f < F; ++f) {
          T acc = T(0);
          for (int64_t n = 0; n < N; ++n) {
            const T* oblk = pgy + (n * F + f) * Do * Ho * Wo;
            for (int64_t i = 0; i < Do * Ho * Wo; ++i) acc += oblk[i];
          }
          gb[static_cast<size_t>(f)] += acc;
        }
      }

      if (nw >= 0) {
        T* gw = t.grad_buffer(nw).data();
#pragma omp parallel for schedule(static)
        for (int64_t f = 0; f < F; ++f) {
          for (int64_t n = 0; n < N; ++n) {
            const T* gblk = pgy + (n * F + f) * Do * Ho * Wo;
            for (int64_t od = 0; od < Do; ++od) {
              for (int64_t oh = 0; oh < Ho; ++oh) {
                const T* grow = gblk + (od * Ho + oh) * Wo;
                for (int64_t c = 0; c < C; ++c) {
                  const T* xblk = px2 + (n * C + c) * D * H * W;
                  T* gwblk = gw + (f * C + c) * kd * kh * kw;
                  for (int64_t a = 0; a < kd; ++a) {
                    const int64_t id = od * s + a - p;
                    if (id < 0 || id >= D) continue;
                    for (int64_t bh = 0; bh < kh; ++bh) {
                      const int64_t ih = oh * s + bh - p;
                      if (ih < 0 || ih >= H) continue;
                      const T* xrow = xblk + (id * H + ih) * W;
                      T* gwrow = gwblk + (a * kh + bh) * kw;
                      for (int64_t cw = 0; cw < kw; ++cw) {
                        const int64_t off = cw - p;
                        int64_t lo, hi;
                        ow_bounds(off, s, W, Wo, lo, hi);
                        T acc = T(0);
                        if (s == 1) {
                          const T* xs = xrow + off;
                          for (int64_t ow = lo; ow < hi; ++ow) acc += grow[ow] * xs[ow];
                        } else {
                          for (int64_t ow = lo; ow < hi; ++ow) acc += grow[ow] * xrow[ow * s + off];
                        }
                        gwrow[cw] += acc;
                      }
                    }
                  }
                }
              }
            }
          }
        }
      }

      if (nx >= 0) {
        T* gx = t.grad_buffer(nx).data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < C; ++c) {
            T* gxblk = gx + (n * C + c) * D * H * W;
            for (int64_t f = 0; f < F; ++f) {
              const T* gblk = pgy + (n * F + f) * Do * Ho * Wo;
              const T* wblk = pw2 + (f * C + c) * kd * kh * kw;
              for (int64_t od = 0; od < Do; ++od) {
                for (int64_t oh = 0; oh < Ho; ++oh) {
                  const T* grow = gblk + (od * Ho + oh) * Wo;
                  for (int64_t a = 0; a < kd; ++a) {
                    const int64_t id = od * s + a - p;
                    if (id < 0 || id >= D) continue;
                    for (int64_t bh = 0; bh < kh; ++bh) {
                      const int64_t ih = oh * s + bh - p;
                      if (ih < 0 || ih >= H) continue;
                      T* gxrow = gxblk + (id * H + ih) * W;
                      const T* wrow = wblk + (a * kh + bh) * kw;
                      for (int64_t cw = 0; cw < kw; ++cw) {
                        const int64_t off = cw - p;
                        const T wv = wrow[cw];
                        int64_t lo, hi;
                        ow_bounds(off, s, W, Wo, lo, hi);
                        if (s == 1) {
                          T* gs = gxrow + off;
                          for (int64_t ow = lo; ow < hi; ++ow) gs[ow] += wv * grow[ow];
                        } else {
                          for (int64_t ow = lo; ow < hi; ++ow) gxrow[ow * s + off] += wv * grow[ow];
                        }
                      }
                    }
                  }
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- instance norm --------------------------------------------------------

template <class T>
Tensor<T> instance_norm3d(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, double eps) {
  check_vol(x.ndim(), "instance_norm3d");
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t V = x.dim(2) * x.dim(3) * x.dim(4);
  require(V > 0, "instance_norm3d: empty volume");
  require(gamma.ndim() == 1 && gamma.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
          "instance_norm3d: gamma/beta must be [C]");

  Tensor<T> out = make_out<T>(x.shape);
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto inv_sd = std::make_shared<std::vector<T>>(static_cast<size_t>(N * C));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pb = beta.data();
  T* po = out.data();

#pragma omp parallel for collapse(2) schedule(static)
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t c = 0; c < C; ++c) {
      const T* xs = px + (n * C + c) * V;
      T* ys = po + (n * C + c) * V;
      T* hs = xhat->data() + (n * C + c) * V;
      T mean = T(0);
      for (int64_t i = 0; i < V; ++i) mean += xs[i];
      mean /= static_cast<T>(V);
      T var = T(0);
      for (int64_t i = 0; i < V; ++i) {
        const T d = xs[i] - mean;
        var += d * d;
      }
      var /= static_cast<T>(V);
      const T isd = T(1) / std::sqrt(var + static_cast<T>(eps));
      (*inv_sd)[static_cast<size_t>(n * C + c)] = isd;
      const T gc = pg[c], bc = pb[c];
      for (int64_t i = 0; i < V; ++i) {
        const T xh = (xs[i] - mean) * isd;
        hs[i] = xh;
        ys[i] = gc * xh + bc;
      }
    }
  }

  if (x.tracked() || gamma.tracked() || beta.tracked()) {
    const int64_t nx = x.node, ng = gamma.node, nb = beta.node;
    auto vg = gamma.vals;
    out.node = g.push(x.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      const T* pg2 = vg->data();
      if (ng >= 0 || nb >= 0) {
        T* gg = ng >= 0 ? t.grad_buffer(ng).data() : nullptr;
        T* gb = nb >= 0 ? t.grad_buffer(nb).data() : nullptr;
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < C; ++c) {
            const T* gr = gy.data() + (n * C + c) * V;
            const T* hs = xhat->data() + (n * C + c) * V;
            T sg = T(0), sb = T(0);
            for (int64_t i = 0; i < V; ++i) {
              sg += gr[i] * hs[i];
              sb += gr[i];
            }
            if (gg) gg[c] += sg;
            if (gb) gb[c] += sb;
          }
        }
      }
      if (nx >= 0) {
        T* gx = t.grad_buffer(nx).data();
#pragma omp parallel for collapse(2) schedule(static)
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t c = 0; c < C; ++c) {
            const T* gr = gy.data() + (n * C + c) * V;
            const T* hs = xhat->data() + (n * C + c) * V;
            T* gxs = gx + (n * C + c) * V;
            const T isd = (*inv_sd)[static_cast<size_t>(n * C + c)];
            const T gc = pg2[c];
            T mean_d = T(0), mean_dx = T(0);
            for (int64_t i = 0; i < V; ++i) {
              const T d = gr[i] * gc;
              mean_d += d;
              mean_dx += d * hs[i];
            }
            mean_d /= static_cast<T>(V);
            mean_dx /= static_cast<T>(V);
            for (int64_t i = 0; i < V; ++i) {
              const T d = gr[i] * gc;
              gxs[i] += isd * (d - mean_d - hs[i] * mean_dx);
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- pooling / resampling -------------------------------------------------

template <class T>
Tensor<T> avg_pool2x(Tape<T>& g, const Tensor<T>& x) {
  check_vol(x.ndim(), "avg_pool2x");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  require(D % 2 == 0 && H % 2 == 0 && W % 2 == 0, "avg_pool2x: extents must be even, got " +
                                                      shape_str(x.shape));
  const int64_t Do = D / 2, Ho = H / 2, Wo = W / 2;
  Tensor<T> out = make_out<T>(Shape{N, C, Do, Ho, Wo});
  const T* px = x.data();
  T* po = out.data();
  const T k = T(1) / T(8);
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xb = px + nc * D * H * W;
    T* ob = po + nc * Do * Ho * Wo;
    for (int64_t od = 0; od < Do; ++od)
      for (int64_t oh = 0; oh < Ho; ++oh)
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const int64_t d0 = 2 * od, h0 = 2 * oh, w0 = 2 * ow;
          T acc = T(0);
          for (int64_t dd = 0; dd < 2; ++dd)
            for (int64_t dh = 0; dh < 2; ++dh) {
              const T* row = xb + ((d0 + dd) * H + h0 + dh) * W + w0;
              acc += row[0] + row[1];
            }
          ob[(od * Ho + oh) * Wo + ow] = acc * k;
        }
  }
  if (x.tracked()) {
    const int64_t nx = x.node;
    out.node = g.push(out.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      if (nx < 0) return;
      T* gx = t.grad_buffer(nx).data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* gb = gy.data() + nc * Do * Ho * Wo;
        T* xb = gx + nc * D * H * W;
        for (int64_t od = 0; od < Do; ++od)
          for (int64_t oh = 0; oh < Ho; ++oh)
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const T gv = gb[(od * Ho + oh) * Wo + ow] * k;
              const int64_t d0 = 2 * od, h0 = 2 * oh, w0 = 2 * ow;
              for (int64_t dd = 0; dd < 2; ++dd)
                for (int64_t dh = 0; dh < 2; ++dh) {
                  T* row = xb + ((d0 + dd) * H + h0 + dh) * W + w0;
                  row[0] += gv;
                  row[1] += gv;
                }
            }
      }
    });
  }
  return out;
}

namespace {

// Per-axis interpolation table for the fixed 2x upsampling: clamped source
// pair and the weight of the upper neighbour.
template <class T>
void up2x_axis(int64_t S, std::vector<int64_t>& i0, std::vector<int64_t>& i1, std::vector<T>& w1) {
  const int64_t O = 2 * S;
  i0.resize(static_cast<size_t>(O));
  i1.resize(static_cast<size_t>(O));
  w1.resize(static_cast<size_t>(O));
  for (int64_t o = 0; o < O; ++o) {
    const double src = 0.5 * (static_cast<double>(o) + 0.5) - 0.5;
    double f = std::floor(src);
    int64_t a = static_cast<int64_t>(f);
    double w = src - f;
    int64_t b = a + 1;
    if (a < 0) a = 0;
    if (b > S - 1) b = S - 1;
    if (a > S - 1) a = S - 1;
    i0[static_cast<size_t>(o)] = a;
    i1[static_cast<size_t>(o)] = b;
    w1[static_cast<size_t>(o)] = static_cast<T>(w);
  }
}

}  // namespace

template <class T>
Tensor<T> upsample_trilinear2x(Tape<T>& g, const Tensor<T>& x) {
  check_vol(x.ndim(), "upsample_trilinear2x");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  require(D >= 1 && H >= 1 && W >= 1, "upsample_trilinear2x: empty volume");
  const int64_t Do = 2 * D, Ho = 2 * H, Wo = 2 * W;

  std::vector<int64_t> d0, d1, h0, h1, w0, w1;
  std::vector<T> wd, wh, ww;
  up2x_axis<T>(D, d0, d1, wd);
  up2x_axis<T>(H, h0, h1, wh);
  up2x_axis<T>(W, w0, w1, ww);

  Tensor<T> out = make_out<T>(Shape{N, C, Do, Ho, Wo});
  const T* px = x.data();
  T* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xb = px + nc * D * H * W;
    T* ob = po + nc * Do * Ho * Wo;
    for (int64_t od = 0; od < Do; ++od) {
      const int64_t a0 = d0[static_cast<size_t>(od)], a1 = d1[static_cast<size_t>(od)];
      const T fd = wd[static_cast<size_t>(od)];
      for (int64_t oh = 0; oh < Ho; ++oh) {
        const int64_t b0 = h0[static_cast<size_t>(oh)], b1 = h1[static_cast<size_t>(oh)];
        const T fh = wh[static_cast<size_t>(oh)];
        const T* r00 = xb + (a0 * H + b0) * W;
        const T* r01 = xb + (a0 * H + b1) * W;
        const T* r10 = xb + (a1 * H + b0) * W;
        const T* r11 = xb + (a1 * H + b1) * W;
        T* orow = ob + (od * Ho + oh) * Wo;
        for (int64_t ow = 0; ow < Wo; ++ow) {
          const int64_t c0 = w0[static_cast<size_t>(ow)], c1 = w1[static_cast<size_t>(ow)];
          const T fw = ww[static_cast<size_t>(ow)];
          const T v00 = r00[c0] + fw * (r00[c1] - r00[c0]);
          const T v01 = r01[c0] + fw * (r01[c1] - r01[c0]);
          const T v10 = r10[c0] + fw * (r10[c1] - r10[c0]);
          const T v11 = r11[c0] + fw * (r11[c1] - r11[c0]);
          const T v0 = v00 + fh * (v01 - v00);
          const T v1 = v10 + fh * (v11 - v10);
          orow[ow] = v0 + fd * (v1 - v0);
        }
      }
    }
  }

  if (x.tracked()) {
    const int64_t nx = x.node;
    out.node = g.push(out.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      if (nx < 0) return;
      T* gx = t.grad_buffer(nx).data();
#pragma omp parallel for schedule(static)
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* gb = gy.data() + nc * Do * Ho * Wo;
        T* xb = gx + nc * D * H * W;
        for (int64_t od = 0; od < Do; ++od) {
          const int64_t a0 = d0[static_cast<size_t>(od)], a1 = d1[static_cast<size_t>(od)];
          const T fd = wd[static_cast<size_t>(od)];
          for (int64_t oh = 0; oh < Ho; ++oh) {
            const int64_t b0 = h0[static_cast<size_t>(oh)], b1 = h1[static_cast<size_t>(oh)];
            const T fh = wh[static_cast<size_t>(oh)];
            const T* grow = gb + (od * Ho + oh) * Wo;
            for (int64_t ow = 0; ow < Wo; ++ow) {
              const int64_t c0 = w0[static_cast<size_t>(ow)], c1 = w1[static_cast<size_t>(ow)];
              const T fw = ww[static_cast<size_t>(ow)];
              const T gv = grow[ow];
              const T g0 = gv * (T(1) - fd), g1 = gv * fd;
              xb[(a0 * H + b0) * W + c0] += g0 * (T(1) - fh) * (T(1) - fw);
              xb[(a0 * H + b0) * W + c1] += g0 * (T(1) - fh) * fw;
              xb[(a0 * H + b1) * W + c0] += g0 * fh * (T(1) - fw);
              xb[(a0 * H + b1) * W + c1] += g0 * fh * fw;
              xb[(a1 * H + b0) * W + c0] += g1 * (T(1) - fh) * (T(1) - fw);
              xb[(a1 * H + b0) * W + c1] += g1 * (T(1) - fh) * fw;
              xb[(a1 * H + b1) * W + c0] += g1 * fh * (T(1) - fw);
              xb[(a1 * H + b1) * W + c1] += g1 * fh * fw;
            }
          }
        }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> global_avg_pool(Tape<T>& g, const Tensor<T>& x) {
  check_vol(x.ndim(), "global_avg_pool");
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t V = x.dim(2) * x.dim(3) * x.dim(4);
  require(V > 0, "global_avg_pool: empty volume");
  Tensor<T> out = make_out<T>(Shape{N, C});
  const T* px = x.data();
  T* po = out.data();
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xb = px + nc * V;
    T acc = T(0);
    for (int64_t i = 0; i < V; ++i) acc += xb[i];
    po[nc] = acc / static_cast<T>(V);
  }
  if (x.tracked()) {
    const int64_t nx = x.node;
    out.node = g.push(N * C, [=](Tape<T>& t, const std::vector<T>& gy) {
      if (nx < 0) return;
      T* gx = t.grad_buffer(nx).data();
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T gv = gy[static_cast<size_t>(nc)] / static_cast<T>(V);
        T* xb = gx + nc * V;
        for (int64_t i = 0; i < V; ++i) xb[i] += gv;
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> concat_channels(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  check_vol(a.ndim(), "concat_channels");
  check_vol(b.ndim(), "concat_channels");
  require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3) &&
              a.dim(4) == b.dim(4),
          "concat_channels: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int64_t N = a.dim(0), Ca = a.dim(1), Cb = b.dim(1);
  const int64_t V = a.dim(2) * a.dim(3) * a.dim(4);
  Tensor<T> out = make_out<T>(Shape{N, Ca + Cb, a.dim(2), a.dim(3), a.dim(4)});
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t n = 0; n < N; ++n) {
    std::copy(pa + n * Ca * V, pa + (n + 1) * Ca * V, po + n * (Ca + Cb) * V);
    std::copy(pb + n * Cb * V, pb + (n + 1) * Cb * V, po + n * (Ca + Cb) * V + Ca * V);
  }
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    out.node = g.push(out.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      if (na >= 0) {
        std::vector<T>& ga = t.grad_buffer(na);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Ca * V; ++i)
            ga[static_cast<size_t>(n * Ca * V + i)] +=
                gy[static_cast<size_t>(n * (Ca + Cb) * V + i)];
      }
      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        for (int64_t n = 0; n < N; ++n)
          for (int64_t i = 0; i < Cb * V; ++i)
            gb[static_cast<size_t>(n * Cb * V + i)] +=
                gy[static_cast<size_t>(n * (Ca + Cb) * V + Ca * V + i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> channel_affine(Tape<T>& g, const Tensor<T>& z, const Tensor<T>& alpha,
                         const Tensor<T>& beta) {
  check_vol(z.ndim(), "channel_affine");
  const int64_t N = z.dim(0), C = z.dim(1);
  const int64_t V = z.dim(2) * z.dim(3) * z.dim(4);
  require(alpha.ndim() == 1 && alpha.dim(0) == C && beta.ndim() == 1 && beta.dim(0) == C,
          "channel_affine: alpha/beta must be [C]");
  Tensor<T> out = make_out<T>(z.shape);
  const T* pz = z.data();
  const T* pa = alpha.data();
  const T* pb = beta.data();
  T* po = out.data();
  for (int64_t n = 0; n < N; ++n)
    for (int64_t c = 0; c < C; ++c) {
      const T av = pa[c], bv = pb[c];
      const T* zs = pz + (n * C + c) * V;
      T* ys = po + (n * C + c) * V;
      for (int64_t i = 0; i < V; ++i) ys[i] = av * zs[i] + bv;
    }
  if (z.tracked() || alpha.tracked() || beta.tracked()) {
    const int64_t nz = z.node, na = alpha.node, nb = beta.node;
    auto vz = z.vals, va = alpha.vals;
    out.node = g.push(z.size(), [=](Tape<T>& t, const std::vector<T>& gy) {
      const T* pz2 = vz->data();
      const T* pa2 = va->data();
      if (nz >= 0) {
        T* gz = t.grad_buffer(nz).data();
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const T av = pa2[c];
            const T* gr = gy.data() + (n * C + c) * V;
            T* gs = gz + (n * C + c) * V;
            for (int64_t i = 0; i < V; ++i) gs[i] += av * gr[i];
          }
      }
      if (na >= 0 || nb >= 0) {
        T* ga = na >= 0 ? t.grad_buffer(na).data() : nullptr;
        T* gb = nb >= 0 ? t.grad_buffer(nb).data() : nullptr;
        for (int64_t n = 0; n < N; ++n)
          for (int64_t c = 0; c < C; ++c) {
            const T* gr = gy.data() + (n * C + c) * V;
            const T* zs = pz2 + (n * C + c) * V;
            T sa = T(0), sb = T(0);
            for (int64_t i = 0; i < V; ++i) {
              sa += gr[i] * zs[i];
              sb += gr[i];
            }
            if (ga) ga[c] += sa;
            if (gb) gb[c] += sb;
          }
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> tv3d(Tape<T>& g, const Tensor<T>& x) {
  check_vol(x.ndim(), "tv3d");
  const int64_t N = x.dim(0), C = x.dim(1), D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const int64_t n = x.size();
  require(n > 0, "tv3d: empty tensor");
  const T* px = x.data();
  // Accumulate in double regardless of T; the sum has n*3 terms.
  double acc = 0.0;
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xb = px + nc * D * H * W;
    for (int64_t d = 0; d < D; ++d)
      for (int64_t h = 0; h < H; ++h) {
        const T* row = xb + (d * H + h) * W;
        for (int64_t w = 0; w + 1 < W; ++w) acc += std::abs(static_cast<double>(row[w + 1] - row[w]));
        if (h + 1 < H) {
          const T* row2 = row + W;
          for (int64_t w = 0; w < W; ++w) acc += std::abs(static_cast<double>(row2[w] - row[w]));
        }
        if (d + 1 < D) {
          const T* row3 = row + H * W;
          for (int64_t w = 0; w < W; ++w) acc += std::abs(static_cast<double>(row3[w] - row[w]));
        }
      }
  }
  Tensor<T> out(Shape{1}, std::vector<T>{static_cast<T>(acc / static_cast<double>(n))});
  if (x.tracked()) {
    const int64_t nx = x.node;
    auto vx = x.vals;
    out.node = g.push(1, [=](Tape<T>& t, const std::vector<T>& gy) {
      if (nx < 0) return;
      T* gx = t.grad_buffer(nx).data();
      const T* px2 = vx->data();
      const T scale = gy[0] / static_cast<T>(n);
      auto sgn = [](T v) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); };
      for (int64_t nc = 0; nc < N * C; ++nc) {
        const T* xb = px2 + nc * D * H * W;
        T* gb = gx + nc * D * H * W;
        for (int64_t d = 0; d < D; ++d)
          for (int64_t h = 0; h < H; ++h) {
            const int64_t base = (d * H + h) * W;
            for (int64_t w = 0; w + 1 < W; ++w) {
              const T s = sgn(xb[base + w + 1] - xb[base + w]) * scale;
              gb[base + w + 1] += s;
              gb[base + w] -= s;
            }
            if (h + 1 < H)
              for (int64_t w = 0; w < W; ++w) {
                const T s = sgn(xb[base + W + w] - xb[base + w]) * scale;
                gb[base + W + w] += s;
                gb[base + w] -= s;
              }
            if (d + 1 < D)
              for (int64_t w = 0; w < W; ++w) {
                const T s = sgn(xb[base + H * W + w] - xb[base + w]) * scale;
                gb[base + H * W + w] += s;
                gb[base + w] -= s;
              }
          }
      }
    });
  }
  return out;
}

// ---- transformer block ------------------------------------------------------

template <class T>
Tensor<T> attention_block(Tape<T>& g, const Tensor<T>& x, int heads, const ParamSlice<T>& p) {
  require(x.ndim() == 2, "attention_block: expected [T,E] tokens, got " + shape_str(x.shape));
  const int64_t tokens = x.dim(0), E = x.dim(1);
  require(heads >= 1 && E % heads == 0,
          "attention_block: embed dim " + std::to_string(E) + " not divisible by " +
              std::to_string(heads) + " heads");
  const int64_t hd = E / heads;

  Tensor<T> h1 = layer_norm(g, x, p["ln1.g"], p["ln1.b"]);
  Tensor<T> q = linear(g, h1, p["attn.q.w"], p["attn.q.b"]);
  Tensor<T> k = linear(g, h1, p["attn.k.w"], p["attn.k.b"]);
  Tensor<T> v = linear(g, h1, p["attn.v.w"], p["attn.v.b"]);

  auto split_heads = [&](const Tensor<T>& m) {
    return permute3(g, reshape(g, m, Shape{tokens, heads, hd}), {1, 0, 2});  // [h,T,hd]
  };
  Tensor<T> qh = split_heads(q);
  Tensor<T> kh = split_heads(k);
  Tensor<T> vh = split_heads(v);

  Tensor<T> scores = bmm(g, qh, permute3(g, kh, {0, 2, 1}));         // [h,T,T]
  scores = mul_scalar(g, scores, 1.0 / std::sqrt(static_cast<double>(hd)));
  Tensor<T> attn = softmax_lastdim(g, scores);
  Tensor<T> ctx = bmm(g, attn, vh);                                   // [h,T,hd]
  ctx = reshape(g, permute3(g, ctx, {1, 0, 2}), Shape{tokens, E});
  Tensor<T> mhsa = linear(g, ctx, p["attn.o.w"], p["attn.o.b"]);

  Tensor<T> u = add(g, x, mhsa);

  Tensor<T> h2 = layer_norm(g, u, p["ln2.g"], p["ln2.b"]);
  Tensor<T> hidden = leaky_relu(g, linear(g, h2, p["mlp.f0.w"], p["mlp.f0.b"]), 0.0);
  Tensor<T> y = add(g, u, linear(g, hidden, p["mlp.f1.w"], p["mlp.f1.b"]));
  return y;
}

#define NPP_INSTANTIATE_NN_OPS(T)                                                         \
  template Tensor<T> conv3d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,             \
                               const Tensor<T>&, int, int);                              \
  template Tensor<T> instance_norm3d<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,    \
                                        const Tensor<T>&, double);                       \
  template Tensor<T> avg_pool2x<T>(Tape<T>&, const Tensor<T>&);                          \
  template Tensor<T> upsample_trilinear2x<T>(Tape<T>&, const Tensor<T>&);                \
  template Tensor<T> global_avg_pool<T>(Tape<T>&, const Tensor<T>&);                     \
  template Tensor<T> concat_channels<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);   \
  template Tensor<T> channel_affine<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       const Tensor<T>&);                                \
  template Tensor<T> tv3d<T>(Tape<T>&, const Tensor<T>&);                                \
  template Tensor<T> attention_block<T>(Tape<T>&, const Tensor<T>&, int,                 \
                                        const ParamSlice<T>&);

NPP_INSTANTIATE_NN_OPS(float)
NPP_INSTANTIATE_NN_OPS(double)
#undef NPP_INSTANTIATE_NN_OPS

}  // namespace npp::ad
