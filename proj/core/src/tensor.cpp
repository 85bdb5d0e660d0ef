#include "npp/tensor.hpp"

#include <sstream>

namespace npp::ad {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) {
    if (d < 0) throw shape_error("negative extent in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw shape_error(msg);
}

template <class T>
Tensor<T>::Tensor(Shape s, std::vector<T> v)
    : shape(std::move(s)), vals(std::make_shared<std::vector<T>>(std::move(v))) {
  if (numel(shape) != size())
    throw shape_error("tensor: " + shape_str(shape) + " does not match " +
                      std::to_string(size()) + " values");
}

template <class T>
Tensor<T> Tensor<T>::full(Shape s, T value) {
  const int64_t n = numel(s);
  return Tensor(std::move(s), std::vector<T>(static_cast<size_t>(n), value));
}

template <class T>
T Tensor<T>::scalar() const {
  if (size() != 1) throw shape_error("scalar() on tensor of size " + std::to_string(size()));
  return (*vals)[0];
}

template <class T>
Tensor<T> Tape<T>::leaf(Shape shape, std::vector<T> values) {
  Tensor<T> t(std::move(shape), std::move(values));
  t.node = push(t.size(), BackFn{});
  return t;
}

template <class T>
Tensor<T> Tape<T>::watch(const Tensor<T>& t) {
  if (!t.defined()) throw shape_error("watch: undefined tensor");
  Tensor<T> view = t;
  view.node = push(t.size(), BackFn{});
  return view;
}

template <class T>
int64_t Tape<T>::push(int64_t grad_len, BackFn back) {
  nodes_.push_back(Node{grad_len, {}, std::move(back)});
  return static_cast<int64_t>(nodes_.size()) - 1;
}

template <class T>
void Tape<T>::backward(const Tensor<T>& output) {
  if (backward_done_) throw domain_error("backward: tape already consumed");
  if (!output.tracked()) throw domain_error("backward: output is not tracked");
  if (output.size() != 1) throw shape_error("backward: output must be a single element");
  backward_done_ = true;
  grad_buffer(output.node)[0] = T(1);
  for (int64_t i = output.node; i >= 0; --i) {
    Node& n = nodes_[static_cast<size_t>(i)];
    if (n.grad.empty() || !n.back) continue;
    n.back(*this, n.grad);
    // Interior gradients are dead after propagation; release the memory.
    n.grad = std::vector<T>{};
  }
}

template <class T>
const std::vector<T>& Tape<T>::grad(const Tensor<T>& t) {
  if (!t.tracked()) throw domain_error("grad: tensor is not tracked");
  return grad_buffer(t.node);
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(int64_t node) {
  Node& n = nodes_[static_cast<size_t>(node)];
  if (n.grad.empty() && n.len > 0) n.grad.assign(static_cast<size_t>(n.len), T(0));
  return n.grad;
}

template <class T>
void Tape<T>::accumulate(int64_t node, const T* g, int64_t n) {
  if (node < 0) return;
  std::vector<T>& buf = grad_buffer(node);
  for (int64_t i = 0; i < n; ++i) buf[static_cast<size_t>(i)] += g[i];
}

template struct Tensor<float>;
template struct Tensor<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace npp::ad
