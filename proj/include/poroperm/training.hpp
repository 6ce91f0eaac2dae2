#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poroperm/model.hpp"
#include "poroperm/sampler.hpp"

namespace poroperm {

enum class OptimizerKind { adam, sgd };
enum class LossScope { masked_only, all };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);
std::string to_string(LossScope s);
LossScope loss_scope_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-3;
  std::size_t batch_size = 128;
  std::size_t epochs = 30;
  OptimizerKind optimizer = OptimizerKind::adam;
  std::uint64_t seed = 0;
  LossScope loss_scope = LossScope::masked_only;
  std::size_t eval_every = 1;

  /// Pretraining defaults with the fine-tuning learning rate.
  static TrainConfig finetune_defaults() {
    TrainConfig c;
    c.lr = 1e-5;
    return c;
  }

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

inline constexpr double kUndefined = std::numeric_limits<double>::quiet_NaN();

/// RMSE and R² for one split. For supervised runs the headline values are the
/// unweighted mean of the per-target values (porosity, permeability).
struct SplitScore {
  double rmse = kUndefined;
  double r2 = kUndefined;
  std::optional<std::array<double, 2>> target_rmse;
  std::optional<std::array<double, 2>> target_r2;
};

struct EpochRecord {
  std::size_t epoch = 0;
  std::string split;
  SplitScore score;
  double loss = kUndefined;  // mean minibatch training loss (train records only)
  double wall_time = 0.0;    // seconds since training started
};

struct MetricsSummary {
  SplitScore train;
  SplitScore test;
};

struct Metrics {
  std::string task;
  std::string optimizer;
  std::vector<EpochRecord> records;
  std::optional<MetricsSummary> summary;
};

/// Epoch records followed by the summary, one JSON object per line. Wall time
/// is left out so identical runs produce identical files.
std::string metrics_jsonl(const Metrics& m);
/// Wall-clock times per record, one JSON object per line.
std::string timing_jsonl(const Metrics& m);
nlohmann::json score_json(const SplitScore& s);

/// Raised when the training loss stops being finite; carries the metrics
/// recorded up to that point.
class TrainingDiverged : public Error {
 public:
  TrainingDiverged(std::size_t epoch, Metrics partial)
      : Error(ErrorCode::NonFiniteLoss, "loss became non-finite in epoch " + std::to_string(epoch)),
        epoch_(epoch),
        partial_(std::move(partial)) {}
  std::size_t epoch() const noexcept { return epoch_; }
  const Metrics& partial() const noexcept { return partial_; }

 private:
  std::size_t epoch_;
  Metrics partial_;
};

struct TrainResult {
  Checkpoint checkpoint;
  Metrics metrics;
};

/// Scores an SSL model on masked voxels pooled over `samples`.
SplitScore evaluate_ssl(const Model& model, const std::vector<MaskedSample>& samples);

/// Scores a regression model in original units.
SplitScore evaluate_supervised(const Model& model, const std::vector<SupervisedSample>& samples);

/// Minibatch training of the restoration head on MSE over `loss_scope`.
TrainResult pretrain(Model model, const std::vector<MaskedSample>& train, const std::vector<MaskedSample>& test,
                     const TrainConfig& config);

/// How fine-tuning initializes the model.
struct FinetuneInit {
  enum class Kind { random, pretrained };
  Kind kind = Kind::random;
  /// Trunk architecture for random init (the head is forced to regress2).
  ArchConfig arch;
  /// Init seed for random init; head seed for pretrained init.
  std::uint64_t seed = 0;
  std::optional<Checkpoint> checkpoint;

  static FinetuneInit random(ArchConfig arch, std::uint64_t seed) { return {Kind::random, std::move(arch), seed, {}}; }
  static FinetuneInit pretrained(Checkpoint ckpt, std::uint64_t head_seed) {
    ArchConfig arch = ckpt.model.config();
    return {Kind::pretrained, arch, head_seed, std::move(ckpt)};
  }
};

/// The model fine-tuning starts from, with target stats from `train`.
Model initial_finetune_model(const FinetuneInit& init, const std::vector<SupervisedSample>& train);

/// Mean and population std of the training targets (std of 0 becomes 1).
TargetNorm compute_target_norm(const std::vector<SupervisedSample>& train);

TrainResult finetune(const std::vector<SupervisedSample>& train, const std::vector<SupervisedSample>& test,
                     const TrainConfig& config, const FinetuneInit& init);

/// One row of the random-vs-pretrained initialization comparison.
struct InitComparisonRow {
  std::string init;  // "random" or "pretrained"
  MetricsSummary summary;
  Metrics metrics;
};

/// Fine-tunes the same data twice with identical hyperparameters and seeds,
/// once from random weights (using the checkpoint's trunk architecture) and
/// once from the pretrained checkpoint.
std::vector<InitComparisonRow> compare_initializations(const std::vector<SupervisedSample>& train,
                                                       const std::vector<SupervisedSample>& test,
                                                       const TrainConfig& config, const Checkpoint& pretrained);

nlohmann::json comparison_json(const std::vector<InitComparisonRow>& rows);

/// Seeded partition of [0, n) into k folds whose sizes differ by at most one
/// (the first n % k folds are one larger).
std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t k, std::uint64_t seed);

struct FoldResult {
  std::size_t fold = 0;
  SplitScore train;
  SplitScore validation;
  bool diverged = false;
};

struct CrossValidationResult {
  std::vector<FoldResult> folds;
  double mean_rmse = kUndefined;
  double std_rmse = kUndefined;
  double mean_r2 = kUndefined;
  double std_r2 = kUndefined;
  bool diverged = false;
};

nlohmann::json cv_json(const CrossValidationResult& cv);

/// k-fold cross-validation of SSL pretraining; each fold starts from a model
/// built from `arch` with a fold-specific seed.
CrossValidationResult cross_validate(const std::vector<MaskedSample>& data, const ArchConfig& arch,
                                     const TrainConfig& config, std::size_t k = 5);

/// k-fold cross-validation of supervised training from random init.
CrossValidationResult cross_validate(const std::vector<SupervisedSample>& data, const ArchConfig& arch,
                                     const TrainConfig& config, std::size_t k = 5);

}  // namespace poroperm
