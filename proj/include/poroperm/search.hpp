#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poroperm/training.hpp"

namespace poroperm {

/// Grids the hyperparameter search draws from.
struct SearchSpace {
  std::vector<double> learning_rates{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  std::vector<std::size_t> batch_sizes{16, 32, 64, 128, 256, 512};
  std::size_t min_layers = 1;  // per layer type
  std::size_t max_layers = 5;
  std::size_t min_feature_maps = 2;
  std::size_t max_feature_maps = 64;
  std::vector<Activation> activations{Activation::relu, Activation::sigmoid, Activation::tanh};
  /// Widths for hidden fully connected layers.
  std::vector<std::size_t> fc_widths{16, 32, 64, 128};

  void validate() const;
};

void to_json(nlohmann::json& j, const SearchSpace& s);
void from_json(const nlohmann::json& j, SearchSpace& s);

struct TrialConfig {
  ArchConfig arch;
  TrainConfig train;
};

/// `count` independent uniform draws from the grids. Architecture fields the
/// space does not cover (edge, heads, kernel, norms) come from `base`.
std::vector<TrialConfig> sample_trials(const SearchSpace& space, const TrialConfig& base, std::size_t count,
                                       std::uint64_t seed);

/// Exhaustive enumeration over learning rate × batch × activation × layer
/// counts, with feature maps and fc widths taken from `base`. Truncated to
/// `limit` entries when `limit` > 0.
std::vector<TrialConfig> grid_trials(const SearchSpace& space, const TrialConfig& base, std::size_t limit);

struct SearchOptions {
  std::size_t folds = 5;
  /// Single train/validation split instead of k-fold CV.
  bool holdout = false;
  double holdout_fraction = 0.8;
  /// Enumerate the grid instead of sampling it.
  bool grid = false;
};

struct TrialRecord {
  std::size_t trial = 0;
  TrialConfig config;
  CrossValidationResult cv;
  double mean_rmse = kUndefined;
  std::string status;  // "ok" or "diverged"
};

nlohmann::json trial_json(const TrialRecord& t);

/// Trains every trial on `data` and returns the trials ranked by mean
/// validation RMSE (diverged trials last, ties by trial index).
std::vector<TrialRecord> random_search(const SearchSpace& space, std::size_t budget, const TrialConfig& base,
                                       const std::vector<MaskedSample>& data, std::uint64_t seed,
                                       const SearchOptions& options = {});

}  // namespace poroperm
