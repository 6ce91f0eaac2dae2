#include "poroperm/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "poroperm/random.hpp"

namespace poroperm {

double relative_error(double analytic, double numeric) noexcept {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

GradCheckReport grad_check(const Objective& objective, ParameterSet<double> params, const GradCheckOptions& options) {
  if (!(options.fd_epsilon > 0.0) || !std::isfinite(options.fd_epsilon))
    fail(ErrorCode::InvalidEpsilon, "finite-difference step must be positive");

  ParameterSet<double> analytic = params.zeros_like();
  const Evaluation base = objective(params, &analytic);
  const double h = options.fd_epsilon;

  GradCheckReport report;
  Rng rng(derive_seed(options.seed, {stream::gradcheck}));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<double>& tensor = params[k].tensor;
    std::vector<std::size_t> order(tensor.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    if (tensor.size() > options.coords_per_tensor) rng.shuffle(order.begin(), order.end());

    std::size_t done = 0;
    for (std::size_t i : order) {
      if (done >= options.coords_per_tensor) break;
      const double saved = tensor[i];
      // Divide by the step actually taken, not the nominal 2h.
      const long double step = static_cast<long double>(saved + h) - static_cast<long double>(saved - h);
      auto difference = [&](const Objective& f, double& numeric) {
        tensor[i] = saved + h;
        const Evaluation plus = f(params, nullptr);
        tensor[i] = saved - h;
        const Evaluation minus = f(params, nullptr);
        tensor[i] = saved;
        numeric = static_cast<double>((plus.value - minus.value) / step);
        return plus.branch == base.branch && minus.branch == base.branch;
      };
      double numeric = 0.0;
      if (!difference(objective, numeric)) {
        ++report.skipped_kinks;
        continue;
      }
      if (options.refine && relative_error(analytic[k].tensor[i], numeric) > options.refine_above) {
        ++report.refined;
        if (!difference(options.refine, numeric)) {
          ++report.skipped_kinks;
          continue;
        }
      }
      const double a = analytic[k].tensor[i];
      const double err = relative_error(a, numeric);
      ++done;
      if (report.checked == 0 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_parameter = params[k].name;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
      ++report.checked;
    }
  }
  return report;
}

}  // namespace poroperm
