#include "npp/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "npp/rng.hpp"

namespace npp::ad {

namespace {

double value_of(const ScalarFn<double>& f, ParamStore<double>& params) {
  // Raw (unwatched) store: the tape records nothing.
  Tape<double> tape;
  const double v = f(tape, params).scalar();
  if (!std::isfinite(v)) throw numeric_error("grad_check: non-finite objective value");
  return v;
}

}  // namespace

GradCheckReport grad_check(const ScalarFn<double>& f, ParamStore<double>& params, double h,
                           double tol, int64_t max_per_param, uint64_t seed, double grad_floor) {
  GradCheckReport report;
  report.tol = tol;

  // One reverse sweep gives every analytic derivative.
  std::map<std::string, std::vector<double>> analytic;
  {
    Tape<double> tape;
    ParamStore<double> watched = params.watch_all(tape);
    Tensor<double> loss = f(tape, watched);
    tape.backward(loss);
    for (const auto& [name, t] : watched) analytic[name] = tape.grad(t);
  }

  Rng rng(seed);
  for (auto& [name, t] : params) {
    const int64_t n = t.size();
    std::vector<int64_t> idx;
    if (n <= max_per_param) {
      idx.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
    } else {
      // Partial Fisher-Yates: first max_per_param entries are a uniform
      // sample without replacement.
      std::vector<int64_t> all(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) all[static_cast<size_t>(i)] = i;
      for (int64_t i = 0; i < max_per_param; ++i) {
        const int64_t j = i + rng.uniform_int(n - i);
        std::swap(all[static_cast<size_t>(i)], all[static_cast<size_t>(j)]);
      }
      idx.assign(all.begin(), all.begin() + max_per_param);
      std::sort(idx.begin(), idx.end());
    }

    std::vector<double>& grads = analytic.at(name);
    for (int64_t i : idx) {
      const double old = t[i];
      const double step = h * std::max(1.0, std::abs(old));
      t[i] = old + step;
      const double fp = value_of(f, params);
      t[i] = old - step;
      const double fm = value_of(f, params);
      t[i] = old;
      const double numeric = (fp - fm) / (2.0 * step);
      const double a = grads[static_cast<size_t>(i)];
      const double rel =
          std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), grad_floor});

      ++report.checked;
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = {name, i, a, numeric, rel};
      }
      if (rel > tol) {
        report.pass = false;
        if (report.failures.size() < 32)
          report.failures.push_back({name, i, a, numeric, rel});
      }
    }
  }
  return report;
}

}  // namespace npp::ad
