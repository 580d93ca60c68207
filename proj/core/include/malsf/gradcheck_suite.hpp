#pragma once

#include <vector>

#include "malsf/gradcheck.hpp"
#include "malsf/model.hpp"

namespace malsf {

// Named gradient-check batteries, one per subsystem. "full" runs central
// differences over every parameter of a reduced-width model against the
// composite training loss on a fixed two-sample batch.
std::vector<std::string> gradcheck_module_names();
std::vector<GradCheckCase> run_gradcheck_module(const std::string& module, uint64_t seed = 99);

// Reduced configuration used by the "full" battery (structure intact,
// widths shrunk so finite differences stay affordable).
ModelConfig gradcheck_model_config();

// Finite differences over all model parameters, parallelized with
// per-thread model replicas (the function under test is pure per replica).
GradCheckResult grad_check_model_composite(const ModelConfig& cfg, uint64_t seed, int threads);

}  // namespace malsf
