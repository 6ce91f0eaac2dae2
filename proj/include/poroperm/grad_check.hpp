#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>

#include "poroperm/parameters.hpp"

namespace poroperm {

/// Objective value plus the kink signature of the evaluation (see
/// Graph::branch_signature); use 0 for smooth objectives. The value is
/// long double so a refining objective can report more digits than double.
struct Evaluation {
  long double value = 0.0L;
  std::uint64_t branch = 0;
};

/// Evaluates the objective at `params`; when `grads` is non-null it must also
/// fill the analytic gradient (same names and shapes as `params`).
using Objective = std::function<Evaluation(const ParameterSet<double>& params, ParameterSet<double>* grads)>;

struct GradCheckOptions {
  double fd_epsilon = 1e-5;
  /// Tensors larger than this are checked on a random coordinate sample.
  std::size_t coords_per_tensor = 200;
  std::uint64_t seed = 0;
  /// Optional higher-precision evaluation of the same function (never asked
  /// for gradients). Coordinates whose plain central difference disagrees with
  /// the analytic value by more than `refine_above` are re-differenced with it,
  /// which matters for gradients near the 1e-8 floor where roundoff in an O(1)
  /// loss dominates.
  Objective refine;
  double refine_above = 3e-5;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  /// Coordinates dropped because the ± perturbation changed the kink signature.
  std::size_t skipped_kinks = 0;
  std::size_t refined = 0;
};

/// |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric) noexcept;

/// Central-difference check of the objective's analytic gradient.
GradCheckReport grad_check(const Objective& objective, ParameterSet<double> params, const GradCheckOptions& options = {});

}  // namespace poroperm
