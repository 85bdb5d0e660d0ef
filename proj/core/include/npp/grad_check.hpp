#pragma once

#include <functional>
#include <string>
#include <vector>

#include "npp/param_store.hpp"
#include "npp/tensor.hpp"

namespace npp::ad {

struct GradCheckEntry {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = true;
  double tol = 0.0;
  int64_t checked = 0;
  double max_rel_err = 0.0;
  GradCheckEntry worst;
  std::vector<GradCheckEntry> failures;
};

/// Scalar objective built on a tape from a parameter store. When the store
/// is watched the result is differentiable; when it is raw the same call
/// performs a value-only evaluation.
template <class T>
using ScalarFn = std::function<Tensor<T>(Tape<T>&, const ParamStore<T>&)>;

/// Central-difference gradient verification in double precision.
///
/// For each parameter tensor, up to `max_per_param` elements are perturbed
/// (all of them when the tensor is small enough; otherwise a seeded random
/// subsample without replacement). The relative error metric is
///   |analytic - numeric| / max(|analytic|, |numeric|, grad_floor).
/// Components below grad_floor are compared on an absolute scale: central
/// differences bottom out near eps/h, so a true-zero derivative would
/// otherwise report spurious relative error. A floor of 1e-4 keeps that noise
/// three orders of magnitude below the pass threshold while still flagging
/// any dropped or mis-scaled gradient of consequence.
/// `h` scales with the magnitude of the perturbed element.
GradCheckReport grad_check(const ScalarFn<double>& f, ParamStore<double>& params, double h,
                           double tol, int64_t max_per_param, uint64_t seed,
                           double grad_floor = 1e-4);

}  // namespace npp::ad
