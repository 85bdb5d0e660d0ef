#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "npp/errors.hpp"

namespace npp::ad {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Throws shape_error with `msg` when `cond` is false.
void require(bool cond, const std::string& msg);

/// Dense row-major N-d array. Copies are shallow: values are shared, so a
/// Tensor behaves like a reference to its buffer. `node < 0` marks the
/// tensor as a constant with respect to the current tape.
template <class T>
struct Tensor {
  Shape shape;
  std::shared_ptr<std::vector<T>> vals;
  int64_t node = -1;

  Tensor() = default;
  Tensor(Shape s, std::vector<T> v);

  static Tensor full(Shape s, T value);
  static Tensor zeros(Shape s) { return full(std::move(s), T(0)); }

  bool defined() const { return static_cast<bool>(vals); }
  int64_t size() const { return vals ? static_cast<int64_t>(vals->size()) : 0; }
  int ndim() const { return static_cast<int>(shape.size()); }
  int64_t dim(int i) const { return shape[static_cast<size_t>(i)]; }

  T* data() { return vals->data(); }
  const T* data() const { return vals->data(); }
  T& operator[](int64_t i) { return (*vals)[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return (*vals)[static_cast<size_t>(i)]; }

  bool tracked() const { return node >= 0; }

  /// Value of a single-element tensor.
  T scalar() const;

  /// Same storage viewed as a constant (drops tape membership).
  Tensor detached() const {
    Tensor t = *this;
    t.node = -1;
    return t;
  }
};

/// Reverse-mode tape. Operations append nodes in execution order; backward()
/// walks them once, last to first, accumulating gradients into parents.
///
/// Usage contract:
///  - one tape per forward/backward pass, confined to one logical thread;
///  - operations on tensors with `node == -1` for every input do not touch
///    the tape at all, so evaluation without gradients is free;
///  - backward() may be called once per tape.
template <class T>
class Tape {
 public:
  using BackFn = std::function<void(Tape&, const std::vector<T>&)>;

  /// New tracked leaf owning `values`.
  Tensor<T> leaf(Shape shape, std::vector<T> values);

  /// Tracks existing storage as a leaf (no copy).
  Tensor<T> watch(const Tensor<T>& t);

  /// Registers an interior node; returns its id. `grad_len` is the length
  /// of the node's gradient buffer (the node's output element count).
  int64_t push(int64_t grad_len, BackFn back);

  /// Seeds d(output)/d(output) = 1 and propagates. `output` must be a
  /// tracked single-element tensor.
  void backward(const Tensor<T>& output);

  /// Gradient of `t` after backward(). Tensors never reached by the
  /// backward sweep report zeros. Throws if `t` is untracked.
  const std::vector<T>& grad(const Tensor<T>& t);

  /// Accumulation target for node `node`; allocated as zeros on demand.
  std::vector<T>& grad_buffer(int64_t node);

  /// grad_buffer(node)[i] += g[i] for i in [0, n). No-op when node < 0.
  void accumulate(int64_t node, const T* g, int64_t n);

  int64_t nodes() const { return static_cast<int64_t>(nodes_.size()); }
  bool backward_done() const { return backward_done_; }

 private:
  struct Node {
    int64_t len = 0;
    std::vector<T> grad;
    BackFn back;  // empty for leaves
  };
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

extern template struct Tensor<float>;
extern template struct Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace npp::ad
