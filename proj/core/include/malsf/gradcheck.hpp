#pragma once

#include <functional>
#include <string>
#include <vector>

#include "malsf/tensor.hpp"

namespace malsf {

// Scalar-valued function of a set of tensors. Must be pure: it is re-run
// many times with perturbed inputs.
using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheckResult {
  double max_rel_err = 0.0;
  int worst_input = -1;
  int64_t worst_element = -1;
  double analytic = 0.0;
  double numeric = 0.0;
};

// Central-difference check of reverse-mode gradients. Relative error uses a
// max(|analytic|, |numeric|, 1e-8) denominator. eps must lie in [1e-7, 1e-3].
GradCheckResult grad_check(const ScalarFn& f, std::vector<Tensor> xs, double eps = 1e-5);

// Named battery entry used by the CLI and the acceptance suite.
struct GradCheckCase {
  std::string name;
  GradCheckResult result;
};

}  // namespace malsf
