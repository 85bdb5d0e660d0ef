#pragma once

#include <map>
#include <string>

#include "npp/tensor.hpp"

namespace npp::ad {

/// Named parameter collection. Iteration order is the lexicographic name
/// order, which makes every traversal (optimizer updates, checkpointing,
/// gradient checking) deterministic by construction.
template <class T>
class ParamStore {
 public:
  Tensor<T>& add(const std::string& name, Shape shape, std::vector<T> values) {
    if (params_.count(name)) throw domain_error("param already registered: " + name);
    auto [it, ok] = params_.emplace(name, Tensor<T>(std::move(shape), std::move(values)));
    (void)ok;
    return it->second;
  }

  Tensor<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw domain_error("unknown param: " + name);
    return it->second;
  }
  const Tensor<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw domain_error("unknown param: " + name);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  size_t count() const { return params_.size(); }

  int64_t total_elements() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.size();
    return n;
  }

  /// View of every parameter registered on `tape` as a leaf. Storage is
  /// shared with this store, so optimizer writes through either view.
  ParamStore watch_all(Tape<T>& tape) const {
    ParamStore out;
    for (const auto& [name, t] : params_) out.params_.emplace(name, tape.watch(t));
    return out;
  }

  /// Deep copy into another scalar type (float <-> double).
  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, t] : params_) {
      std::vector<U> v(t.vals->begin(), t.vals->end());
      out.add(name, t.shape, std::move(v));
    }
    return out;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  template <class U>
  friend class ParamStore;
  std::map<std::string, Tensor<T>> params_;
};

/// Read-only view of a ParamStore under a fixed name prefix, e.g. all
/// parameters of one submodule.
template <class T>
struct ParamSlice {
  const ParamStore<T>* store = nullptr;
  std::string prefix;

  const Tensor<T>& operator[](const std::string& sub) const { return store->at(prefix + sub); }
  bool contains(const std::string& sub) const { return store->contains(prefix + sub); }
};

}  // namespace npp::ad
