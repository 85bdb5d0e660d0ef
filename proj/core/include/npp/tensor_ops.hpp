#pragma once

#include <array>

#include "npp/tensor.hpp"

// Differentiable tensor algebra. Every function evaluates eagerly and, when
// at least one input is tracked, appends a backward closure to the tape.
// Inputs are never mutated.

namespace npp::ad {

// ---- elementwise --------------------------------------------------------

template <class T> Tensor<T> add(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise a / b. Division by zero follows IEEE semantics; callers that
/// need a guarded denominator add an epsilon first.
template <class T> Tensor<T> div(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);

template <class T> Tensor<T> add_scalar(Tape<T>& g, const Tensor<T>& a, double s);
template <class T> Tensor<T> mul_scalar(Tape<T>& g, const Tensor<T>& a, double s);

template <class T> Tensor<T> tanh_op(Tape<T>& g, const Tensor<T>& a);

/// max(x, 0) + slope * min(x, 0). slope = 0 gives plain ReLU.
template <class T> Tensor<T> leaky_relu(Tape<T>& g, const Tensor<T>& a, double slope);

// ---- reductions ---------------------------------------------------------

template <class T> Tensor<T> sum_all(Tape<T>& g, const Tensor<T>& a);   // -> [1]
template <class T> Tensor<T> mean_all(Tape<T>& g, const Tensor<T>& a);  // -> [1]

// ---- shape manipulation -------------------------------------------------

/// Same elements, new extents; element count must match. The result owns a
/// fresh buffer so downstream mutation hazards cannot arise.
template <class T> Tensor<T> reshape(Tape<T>& g, const Tensor<T>& a, Shape shape);

/// Contiguous run of `len` elements starting at flat offset `start`,
/// returned as a rank-1 tensor.
template <class T> Tensor<T> slice_flat(Tape<T>& g, const Tensor<T>& a, int64_t start, int64_t len);

template <class T> Tensor<T> transpose2d(Tape<T>& g, const Tensor<T>& a);  // [M,N] -> [N,M]

/// Axis permutation of a rank-3 tensor; perm holds the source axis for each
/// destination axis.
template <class T> Tensor<T> permute3(Tape<T>& g, const Tensor<T>& a, std::array<int, 3> perm);

// ---- linear algebra -----------------------------------------------------

template <class T> Tensor<T> matmul(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);  // [M,K]x[K,N]
template <class T> Tensor<T> bmm(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& b);     // [B,M,K]x[B,K,N]

/// x[..., K] -> x W^T + b with W [M, K], b [M].
template <class T> Tensor<T> linear(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Adds v[K] to every length-K row of a.
template <class T> Tensor<T> add_rowvec(Tape<T>& g, const Tensor<T>& a, const Tensor<T>& v);

// ---- row-wise nonlinearities -------------------------------------------

/// Softmax over the last axis, max-subtracted for stability.
template <class T> Tensor<T> softmax_lastdim(Tape<T>& g, const Tensor<T>& a);

/// Layer norm over the last axis with learned per-feature gamma/beta.
template <class T> Tensor<T> layer_norm(Tape<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                                        const Tensor<T>& beta, double eps = 1e-5);

#define NPP_EXTERN_TENSOR_OPS(T)                                                              \
  extern template Tensor<T> add<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> sub<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> mul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> div<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> add_scalar<T>(Tape<T>&, const Tensor<T>&, double);               \
  extern template Tensor<T> mul_scalar<T>(Tape<T>&, const Tensor<T>&, double);               \
  extern template Tensor<T> tanh_op<T>(Tape<T>&, const Tensor<T>&);                          \
  extern template Tensor<T> leaky_relu<T>(Tape<T>&, const Tensor<T>&, double);               \
  extern template Tensor<T> sum_all<T>(Tape<T>&, const Tensor<T>&);                          \
  extern template Tensor<T> mean_all<T>(Tape<T>&, const Tensor<T>&);                         \
  extern template Tensor<T> reshape<T>(Tape<T>&, const Tensor<T>&, Shape);                   \
  extern template Tensor<T> slice_flat<T>(Tape<T>&, const Tensor<T>&, int64_t, int64_t);     \
  extern template Tensor<T> transpose2d<T>(Tape<T>&, const Tensor<T>&);                      \
  extern template Tensor<T> permute3<T>(Tape<T>&, const Tensor<T>&, std::array<int, 3>);     \
  extern template Tensor<T> matmul<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);         \
  extern template Tensor<T> bmm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);            \
  extern template Tensor<T> linear<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                      const Tensor<T>&);                                     \
  extern template Tensor<T> add_rowvec<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&);     \
  extern template Tensor<T> softmax_lastdim<T>(Tape<T>&, const Tensor<T>&);                  \
  extern template Tensor<T> layer_norm<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,      \
                                          const Tensor<T>&, double);

NPP_EXTERN_TENSOR_OPS(float)
NPP_EXTERN_TENSOR_OPS(double)
#undef NPP_EXTERN_TENSOR_OPS

}  // namespace npp::ad
