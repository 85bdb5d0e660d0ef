#include "npp/tensor_ops.hpp"

#include <algorithm>
#include <cmath>

namespace npp::ad {

namespace {

template <class T>
Tensor<T> make_out(Shape shape) {
  const int64_t n = numel(shape);
  return Tensor<T>(std::move(shape), std::vector<T>(static_cast<size_t>(n)));
}

}  // namespace

// ---- elementwise --------------------------------------------------------

template <class T>
Tensor<T> add(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "add: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    out.node = g.push(n, [na, nb, n](Tape<T>& t, const std::vector<T>& gy) {
      t.accumulate(na, gy.data(), n);
      t.accumulate(nb, gy.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> sub(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "sub: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    out.node = g.push(n, [na, nb, n](Tape<T>& t, const std::vector<T>& gy) {
      t.accumulate(na, gy.data(), n);
      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] -= gy[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "mul: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    auto va = a.vals, vb = b.vals;
    out.node = g.push(n, [na, nb, n, va, vb](Tape<T>& t, const std::vector<T>& gy) {
      if (na >= 0) {
        std::vector<T>& ga = t.grad_buffer(na);
        const T* pb2 = vb->data();
        for (int64_t i = 0; i < n; ++i)
          ga[static_cast<size_t>(i)] += pb2[i] * gy[static_cast<size_t>(i)];
      }
      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        const T* pa2 = va->data();
        for (int64_t i = 0; i < n; ++i)
          gb[static_cast<size_t>(i)] += pa2[i] * gy[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> div(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape == b.shape, "div: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] / pb[i];
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    auto va = a.vals, vb = b.vals;
    out.node = g.push(n, [na, nb, n, va, vb](Tape<T>& t, const std::vector<T>& gy) {
      const T* pa2 = va->data();
      const T* pb2 = vb->data();
      if (na >= 0) {
        std::vector<T>& ga = t.grad_buffer(na);
        for (int64_t i = 0; i < n; ++i)
          ga[static_cast<size_t>(i)] += gy[static_cast<size_t>(i)] / pb2[i];
      }
      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        for (int64_t i = 0; i < n; ++i)
          gb[static_cast<size_t>(i)] -= pa2[i] / (pb2[i] * pb2[i]) * gy[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> add_scalar(Tape<T>& g, const Tensor<T>& a, double s) {
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.size();
  const T sv = static_cast<T>(s);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + sv;
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(n, [na, n](Tape<T>& t, const std::vector<T>& gy) {
      t.accumulate(na, gy.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> mul_scalar(Tape<T>& g, const Tensor<T>& a, double s) {
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.size();
  const T sv = static_cast<T>(s);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * sv;
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(n, [na, n, sv](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      for (int64_t i = 0; i < n; ++i)
        ga[static_cast<size_t>(i)] += sv * gy[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <class T>
Tensor<T> tanh_op(Tape<T>& g, const Tensor<T>& a) {
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.size();
  for (int64_t i = 0; i < n; ++i) po[i] = std::tanh(pa[i]);
  if (a.tracked()) {
    const int64_t na = a.node;
    auto vy = out.vals;
    out.node = g.push(n, [na, n, vy](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      const T* py = vy->data();
      for (int64_t i = 0; i < n; ++i)
        ga[static_cast<size_t>(i)] += (T(1) - py[i] * py[i]) * gy[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <class T>
Tensor<T> leaky_relu(Tape<T>& g, const Tensor<T>& a, double slope) {
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  T* po = out.data();
  const int64_t n = out.size();
  const T sl = static_cast<T>(slope);
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] >= T(0) ? pa[i] : sl * pa[i];
  if (a.tracked()) {
    const int64_t na = a.node;
    auto va = a.vals;
    out.node = g.push(n, [na, n, sl, va](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      const T* pa2 = va->data();
      for (int64_t i = 0; i < n; ++i) {
        const T w = pa2[i] >= T(0) ? T(1) : sl;
        ga[static_cast<size_t>(i)] += w * gy[static_cast<size_t>(i)];
      }
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------

template <class T>
Tensor<T> sum_all(Tape<T>& g, const Tensor<T>& a) {
  const int64_t n = a.size();
  T acc = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  Tensor<T> out(Shape{1}, std::vector<T>{acc});
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(1, [na, n](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      const T gv = gy[0];
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += gv;
    });
  }
  return out;
}

template <class T>
Tensor<T> mean_all(Tape<T>& g, const Tensor<T>& a) {
  const int64_t n = a.size();
  require(n > 0, "mean_all: empty tensor");
  T acc = T(0);
  const T* pa = a.data();
  for (int64_t i = 0; i < n; ++i) acc += pa[i];
  Tensor<T> out(Shape{1}, std::vector<T>{acc / static_cast<T>(n)});
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(1, [na, n](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      const T gv = gy[0] / static_cast<T>(n);
      for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += gv;
    });
  }
  return out;
}

// ---- shape manipulation -------------------------------------------------

template <class T>
Tensor<T> reshape(Tape<T>& g, const Tensor<T>& a, Shape shape) {
  require(numel(shape) == a.size(),
          "reshape: " + shape_str(a.shape) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), *a.vals);
  if (a.tracked()) {
    const int64_t na = a.node;
    const int64_t n = a.size();
    out.node = g.push(n, [na, n](Tape<T>& t, const std::vector<T>& gy) {
      t.accumulate(na, gy.data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> slice_flat(Tape<T>& g, const Tensor<T>& a, int64_t start, int64_t len) {
  require(start >= 0 && len >= 0 && start + len <= a.size(),
          "slice_flat: [" + std::to_string(start) + "," + std::to_string(start + len) +
              ") out of " + std::to_string(a.size()));
  std::vector<T> v(a.vals->begin() + start, a.vals->begin() + start + len);
  Tensor<T> out(Shape{len}, std::move(v));
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(len, [na, start, len](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      for (int64_t i = 0; i < len; ++i)
        ga[static_cast<size_t>(start + i)] += gy[static_cast<size_t>(i)];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose2d(Tape<T>& g, const Tensor<T>& a) {
  require(a.ndim() == 2, "transpose2d: rank " + std::to_string(a.ndim()));
  const int64_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out = make_out<T>(Shape{n, m});
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) po[j * m + i] = pa[i * n + j];
  if (a.tracked()) {
    const int64_t na = a.node;
    out.node = g.push(m * n, [na, m, n](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < n; ++j)
          ga[static_cast<size_t>(i * n + j)] += gy[static_cast<size_t>(j * m + i)];
    });
  }
  return out;
}

namespace {

// dst index for each src index under a rank-3 permutation.
template <class T>
void permute3_copy(const T* src, T* dst, const std::array<int64_t, 3>& sdims,
                   const std::array<int, 3>& perm) {
  std::array<int64_t, 3> ddims{sdims[static_cast<size_t>(perm[0])],
                               sdims[static_cast<size_t>(perm[1])],
                               sdims[static_cast<size_t>(perm[2])]};
  const int64_t sstr[3] = {sdims[1] * sdims[2], sdims[2], 1};
  int64_t dstr_for_src[3] = {0, 0, 0};
  const int64_t dstr[3] = {ddims[1] * ddims[2], ddims[2], 1};
  for (int d = 0; d < 3; ++d) dstr_for_src[perm[d]] = dstr[d];
  for (int64_t i = 0; i < sdims[0]; ++i)
    for (int64_t j = 0; j < sdims[1]; ++j)
      for (int64_t k = 0; k < sdims[2]; ++k)
        dst[i * dstr_for_src[0] + j * dstr_for_src[1] + k * dstr_for_src[2]] =
            src[i * sstr[0] + j * sstr[1] + k * sstr[2]];
}

}  // namespace

template <class T>
Tensor<T> permute3(Tape<T>& g, const Tensor<T>& a, std::array<int, 3> perm) {
  require(a.ndim() == 3, "permute3: rank " + std::to_string(a.ndim()));
  std::array<bool, 3> seen{false, false, false};
  for (int p : perm) {
    require(p >= 0 && p < 3 && !seen[static_cast<size_t>(p)], "permute3: invalid permutation");
    seen[static_cast<size_t>(p)] = true;
  }
  const std::array<int64_t, 3> sdims{a.dim(0), a.dim(1), a.dim(2)};
  Shape oshape{sdims[static_cast<size_t>(perm[0])], sdims[static_cast<size_t>(perm[1])],
               sdims[static_cast<size_t>(perm[2])]};
  Tensor<T> out = make_out<T>(oshape);
  permute3_copy(a.data(), out.data(), sdims, perm);
  if (a.tracked()) {
    const int64_t na = a.node;
    const int64_t n = a.size();
    // Inverse permutation sends gradients back to source layout.
    std::array<int, 3> inv{};
    for (int d = 0; d < 3; ++d) inv[static_cast<size_t>(perm[d])] = d;
    const std::array<int64_t, 3> odims{oshape[0], oshape[1], oshape[2]};
    out.node = g.push(n, [na, odims, inv](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      std::vector<T> tmp(gy.size());
      permute3_copy(gy.data(), tmp.data(), odims, inv);
      for (size_t i = 0; i < tmp.size(); ++i) ga[i] += tmp[i];
    });
  }
  return out;
}

// ---- linear algebra -----------------------------------------------------

namespace {

// c[M,N] += a[M,K] * b[K,N]; plain triple loop ordered for row-major reuse.
template <class T>
void gemm_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[M,N] += a[M,K] * b[N,K]^T
template <class T>
void gemm_bt_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    T* crow = c + i * n;
    for (int64_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc = T(0);
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[K,N] += a[M,K]^T * b[M,N]
template <class T>
void gemm_at_acc(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace

template <class T>
Tensor<T> matmul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0),
          "matmul: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros(Shape{m, n});
  gemm_acc(a.data(), b.data(), out.data(), m, k, n);
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    auto va = a.vals, vb = b.vals;
    out.node = g.push(m * n, [na, nb, m, k, n, va, vb](Tape<T>& t, const std::vector<T>& gy) {
      if (na >= 0) gemm_bt_acc(gy.data(), vb->data(), t.grad_buffer(na).data(), m, n, k);
      if (nb >= 0) gemm_at_acc(va->data(), gy.data(), t.grad_buffer(nb).data(), m, k, n);
    });
  }
  return out;
}

template <class T>
Tensor<T> bmm(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1),
          "bmm: " + shape_str(a.shape) + " x " + shape_str(b.shape));
  const int64_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  Tensor<T> out = Tensor<T>::zeros(Shape{bs, m, n});
  for (int64_t i = 0; i < bs; ++i)
    gemm_acc(a.data() + i * m * k, b.data() + i * k * n, out.data() + i * m * n, m, k, n);
  if (a.tracked() || b.tracked()) {
    const int64_t na = a.node, nb = b.node;
    auto va = a.vals, vb = b.vals;
    out.node = g.push(bs * m * n, [na, nb, bs, m, k, n, va, vb](Tape<T>& t,
                                                                const std::vector<T>& gy) {
      for (int64_t i = 0; i < bs; ++i) {
        const T* gyp = gy.data() + i * m * n;
        if (na >= 0)
          gemm_bt_acc(gyp, vb->data() + i * k * n, t.grad_buffer(na).data() + i * m * k, m, n, k);
        if (nb >= 0)
          gemm_at_acc(va->data() + i * m * k, gyp, t.grad_buffer(nb).data() + i * k * n, m, k, n);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> linear(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  require(x.ndim() >= 1, "linear: rank-0 input");
  const int64_t k = x.dim(x.ndim() - 1);
  require(w.ndim() == 2 && w.dim(1) == k, "linear: weight " + shape_str(w.shape) +
                                              " does not accept inner size " + std::to_string(k));
  const int64_t m = w.dim(0);
  require(b.ndim() == 1 && b.dim(0) == m, "linear: bias " + shape_str(b.shape));
  const int64_t rows = x.size() / std::max<int64_t>(k, 1);
  require(rows * k == x.size(), "linear: ragged input");

  Shape oshape = x.shape;
  oshape.back() = m;
  Tensor<T> out = make_out<T>(oshape);
  const T* px = x.data();
  const T* pw = w.data();
  const T* pb = b.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * k;
    T* yr = po + r * m;
    for (int64_t i = 0; i < m; ++i) {
      const T* wr = pw + i * k;
      T acc = pb[i];
      for (int64_t p = 0; p < k; ++p) acc += xr[p] * wr[p];
      yr[i] = acc;
    }
  }
  if (x.tracked() || w.tracked() || b.tracked()) {
    const int64_t nx = x.node, nw = w.node, nb2 = b.node;
    auto vx = x.vals, vw = w.vals;
    out.node =
        g.push(rows * m, [nx, nw, nb2, rows, m, k, vx, vw](Tape<T>& t, const std::vector<T>& gy) {
          const T* pgy = gy.data();
          if (nx >= 0) {
            // gx[r,:] += gy[r,:] * W
            gemm_acc(pgy, vw->data(), t.grad_buffer(nx).data(), rows, m, k);
          }
          if (nw >= 0) {
            // gW += gy^T * x
            gemm_at_acc(pgy, vx->data(), t.grad_buffer(nw).data(), rows, m, k);
          }
          if (nb2 >= 0) {
            std::vector<T>& gb = t.grad_buffer(nb2);
            for (int64_t r = 0; r < rows; ++r)
              for (int64_t i = 0; i < m; ++i)
                gb[static_cast<size_t>(i)] += pgy[r * m + i];
          }
        });
  }
  return out;
}

template <class T>
Tensor<T> add_rowvec(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& v) {
  require(a.ndim() >= 1 && v.ndim() == 1, "add_rowvec: bad ranks");
  const int64_t k = v.dim(0);
  require(a.dim(a.ndim() - 1) == k, "add_rowvec: " + shape_str(a.shape) + " rows are not length " +
                                        std::to_string(k));
  const int64_t rows = a.size() / k;
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  const T* pv = v.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < k; ++i) po[r * k + i] = pa[r * k + i] + pv[i];
  if (a.tracked() || v.tracked()) {
    const int64_t na = a.node, nv = v.node;
    const int64_t n = a.size();
    out.node = g.push(n, [na, nv, rows, k, n](Tape<T>& t, const std::vector<T>& gy) {
      t.accumulate(na, gy.data(), n);
      if (nv >= 0) {
        std::vector<T>& gv = t.grad_buffer(nv);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < k; ++i)
            gv[static_cast<size_t>(i)] += gy[static_cast<size_t>(r * k + i)];
      }
    });
  }
  return out;
}

// ---- row-wise nonlinearities -------------------------------------------

template <class T>
Tensor<T> softmax_lastdim(Tape<T>& g, const Tensor<T>& a) {
  require(a.ndim() >= 1, "softmax: rank-0 input");
  const int64_t k = a.dim(a.ndim() - 1);
  require(k > 0, "softmax: empty rows");
  const int64_t rows = a.size() / k;
  Tensor<T> out = make_out<T>(a.shape);
  const T* pa = a.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = pa + r * k;
    T* yr = po + r * k;
    T mx = xr[0];
    for (int64_t i = 1; i < k; ++i) mx = std::max(mx, xr[i]);
    T sum = T(0);
    for (int64_t i = 0; i < k; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      sum += yr[i];
    }
    const T inv = T(1) / sum;
    for (int64_t i = 0; i < k; ++i) yr[i] *= inv;
  }
  if (a.tracked()) {
    const int64_t na = a.node;
    auto vy = out.vals;
    out.node = g.push(a.size(), [na, rows, k, vy](Tape<T>& t, const std::vector<T>& gy) {
      if (na < 0) return;
      std::vector<T>& ga = t.grad_buffer(na);
      const T* py = vy->data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* yr = py + r * k;
        const T* gr = gy.data() + r * k;
        T dot = T(0);
        for (int64_t i = 0; i < k; ++i) dot += yr[i] * gr[i];
        for (int64_t i = 0; i < k; ++i)
          ga[static_cast<size_t>(r * k + i)] += yr[i] * (gr[i] - dot);
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> layer_norm(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, double eps) {
  require(x.ndim() >= 1, "layer_norm: rank-0 input");
  const int64_t k = x.dim(x.ndim() - 1);
  require(gamma.ndim() == 1 && gamma.dim(0) == k && beta.ndim() == 1 && beta.dim(0) == k,
          "layer_norm: gamma/beta must be length " + std::to_string(k));
  const int64_t rows = x.size() / k;
  Tensor<T> out = make_out<T>(x.shape);
  // Normalized activations are kept for backward.
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto inv_sd = std::make_shared<std::vector<T>>(static_cast<size_t>(rows));
  const T* px = x.data();
  const T* pg = gamma.data();
  const T* pbt = beta.data();
  T* po = out.data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* xr = px + r * k;
    T mean = T(0);
    for (int64_t i = 0; i < k; ++i) mean += xr[i];
    mean /= static_cast<T>(k);
    T var = T(0);
    for (int64_t i = 0; i < k; ++i) {
      const T d = xr[i] - mean;
      var += d * d;
    }
    var /= static_cast<T>(k);
    const T isd = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_sd)[static_cast<size_t>(r)] = isd;
    for (int64_t i = 0; i < k; ++i) {
      const T xh = (xr[i] - mean) * isd;
      (*xhat)[static_cast<size_t>(r * k + i)] = xh;
      po[r * k + i] = pg[i] * xh + pbt[i];
    }
  }
  if (x.tracked() || gamma.tracked() || beta.tracked()) {
    const int64_t nx = x.node, ng = gamma.node, nb = beta.node;
    auto vg = gamma.vals;
    out.node = g.push(x.size(), [nx, ng, nb, rows, k, xhat, inv_sd, vg](
                                    Tape<T>& t, const std::vector<T>& gy) {
      const T* pg2 = vg->data();
      if (ng >= 0) {
        std::vector<T>& gg = t.grad_buffer(ng);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < k; ++i)
            gg[static_cast<size_t>(i)] += gy[static_cast<size_t>(r * k + i)] *
                                          (*xhat)[static_cast<size_t>(r * k + i)];
      }
      if (nb >= 0) {
        std::vector<T>& gb = t.grad_buffer(nb);
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t i = 0; i < k; ++i)
            gb[static_cast<size_t>(i)] += gy[static_cast<size_t>(r * k + i)];
      }
      if (nx >= 0) {
        std::vector<T>& gx = t.grad_buffer(nx);
        for (int64_t r = 0; r < rows; ++r) {
          const T* gr = gy.data() + r * k;
          const T* xh = xhat->data() + r * k;
          const T isd = (*inv_sd)[static_cast<size_t>(r)];
          // d = gy * gamma; gx = isd * (d - mean(d) - xhat * mean(d * xhat))
          T mean_d = T(0), mean_dx = T(0);
          for (int64_t i = 0; i < k; ++i) {
            const T d = gr[i] * pg2[i];
            mean_d += d;
            mean_dx += d * xh[i];
          }
          mean_d /= static_cast<T>(k);
          mean_dx /= static_cast<T>(k);
          for (int64_t i = 0; i < k; ++i) {
            const T d = gr[i] * pg2[i];
            gx[static_cast<size_t>(r * k + i)] += isd * (d - mean_d - xh[i] * mean_dx);
          }
        }
      }
    });
  }
  return out;
}

#define NPP_INSTANTIATE_TENSOR_OPS(T)                                                  \
  template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> sub<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> mul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> div<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> add_scalar<T>(Tape<T>&, const Tensor<T>&, double);               \
  template Tensor<T> mul_scalar<T>(Tape<T>&, const Tensor<T>&, double);               \
  template Tensor<T> tanh_op<T>(Tape<T>&, const Tensor<T>&);                          \
  template Tensor<T> leaky_relu<T>(Tape<T>&, const Tensor<T>&, double);               \
  template Tensor<T> sum_all<T>(Tape<T>&, const Tensor<T>&);                          \
  template Tensor<T> mean_all<T>(Tape<T>&, const Tensor<T>&);                         \
  template Tensor<T> reshape<T>(Tape<T>&, const Tensor<T>&, Shape);                   \
  template Tensor<T> slice_flat<T>(Tape<T>&, const Tensor<T>&, int64_t, int64_t);     \
  template Tensor<T> transpose2d<T>(Tape<T>&, const Tensor<T>&);                      \
  template Tensor<T> permute3<T>(Tape<T>&, const Tensor<T>&, std::array<int, 3>);     \
  template Tensor<T> matmul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);         \
  template Tensor<T> bmm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> linear<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,          \
                               const Tensor<T>&);                                     \
  template Tensor<T> add_rowvec<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);     \
  template Tensor<T> softmax_lastdim<T>(Tape<T>&, const Tensor<T>&);                  \
  template Tensor<T> layer_norm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                   const Tensor<T>&, double);

NPP_INSTANTIATE_TENSOR_OPS(float)
NPP_INSTANTIATE_TENSOR_OPS(double)
#undef NPP_INSTANTIATE_TENSOR_OPS

}  // namespace npp::ad
