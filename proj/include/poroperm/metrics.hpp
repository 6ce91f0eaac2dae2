#pragma once

#include <cstdint>
#include <optional>
#include <span>

namespace poroperm {

/// Root mean squared difference, over `mask` indices when given.
double rmse(std::span<const double> pred, std::span<const double> target,
            std::optional<std::span<const std::uint32_t>> mask = std::nullopt);

/// 1 - SS_res / SS_tot, SS_tot taken about the target mean.
double r_squared(std::span<const double> pred, std::span<const double> target);

}  // namespace poroperm
