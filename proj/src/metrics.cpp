#include "poroperm/metrics.hpp"

#include <cmath>
#include <string>

#include "poroperm/error.hpp"

namespace poroperm {

double rmse(std::span<const double> pred, std::span<const double> target,
            std::optional<std::span<const std::uint32_t>> mask) {
  if (pred.size() != target.size())
    fail(ErrorCode::LengthMismatch, std::to_string(pred.size()) + " predictions vs " + std::to_string(target.size()) +
                                        " targets");
  double acc = 0.0;
  std::size_t count = 0;
  if (mask) {
    if (mask->empty()) fail(ErrorCode::EmptyMask, "rmse over an empty mask");
    for (auto i : *mask) {
      if (i >= pred.size()) fail(ErrorCode::LengthMismatch, "mask index out of range");
      const double d = pred[i] - target[i];
      acc += d * d;
    }
    count = mask->size();
  } else {
    if (pred.empty()) fail(ErrorCode::EmptyMask, "rmse of empty vectors");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred[i] - target[i];
      acc += d * d;
    }
    count = pred.size();
  }
  return std::sqrt(acc / static_cast<double>(count));
}

double r_squared(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size())
    fail(ErrorCode::LengthMismatch, std::to_string(pred.size()) + " predictions vs " + std::to_string(target.size()) +
                                        " targets");
  if (target.size() < 2) fail(ErrorCode::TooFewSamples, "r_squared needs at least two values");
  double mean = 0.0;
  for (double t : target) mean += t;
  mean /= static_cast<double>(target.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    ss_tot += (target[i] - mean) * (target[i] - mean);
    ss_res += (target[i] - pred[i]) * (target[i] - pred[i]);
  }
  if (ss_tot == 0.0) fail(ErrorCode::ZeroVariance, "targets have zero variance");
  return 1.0 - ss_res / ss_tot;
}

}  // namespace poroperm
