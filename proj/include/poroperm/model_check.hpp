#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "poroperm/grad_check.hpp"
#include "poroperm/model.hpp"

namespace poroperm {

struct ModelGradCheckOptions {
  std::size_t inputs = 10;
  double fd_epsilon = 1e-5;
  std::size_t coords_per_tensor = 200;
  double mask_rate = 0.2;
  std::uint64_t seed = 0;
};

struct ModelGradCheckResult {
  double max_rel_error = 0.0;
  /// One report per (head, input) pair, SSL head first.
  std::vector<GradCheckReport> reports;
  std::size_t checked = 0;
  std::size_t skipped_kinks = 0;
  std::size_t refined = 0;
};

/// Double-precision finite-difference check of the full model for one head:
/// masked restoration loss for ssl_restore, standardized regression loss for
/// regress2. Inputs are random binary sub-cubes.
ModelGradCheckResult check_model_gradients(const ArchConfig& arch, HeadKind head, const ModelGradCheckOptions& options);

/// Both heads on the same trunk configuration.
ModelGradCheckResult check_model_gradients(const ArchConfig& arch, const ModelGradCheckOptions& options);

}  // namespace poroperm
