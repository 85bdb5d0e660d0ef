#pragma once

#include <string>
#include <vector>

#include "npp/grad_check.hpp"

namespace npp::verify {

struct SuiteResult {
  std::string name;
  ad::GradCheckReport report;
};

/// Finite-difference verification of every differentiable primitive, in
/// double precision, followed by the full training objective evaluated on
/// a small synthetic head. `scale` multiplies the spatial extents of the
/// primitive checks (1 = the small defaults). Primitive tolerance is 1e-6,
/// the end-to-end objective allows 1e-4.
std::vector<SuiteResult> gradcheck_suite(int scale = 1, uint64_t seed = 0x9e3779b97f4a7c15ull);

/// True when every report passed.
bool suite_passed(const std::vector<SuiteResult>& results);

}  // namespace npp::verify
