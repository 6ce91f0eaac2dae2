#include "poroperm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "poroperm/metrics.hpp"
#include "poroperm/optim.hpp"
#include "poroperm/random.hpp"

namespace poroperm {

namespace {

using Clock = std::chrono::steady_clock;

double r2_or_undefined(std::span<const double> pred, std::span<const double> target) {
  try {
    return r_squared(pred, target);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ZeroVariance || e.code() == ErrorCode::TooFewSamples) return kUndefined;
    throw;
  }
}

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

nlohmann::json pair_json(const std::array<double, 2>& v) {
  return {{"porosity", number_or_null(v[0])}, {"permeability", number_or_null(v[1])}};
}

template <typename T>
void scale(ParameterSet<T>& ps, T s) {
  for (auto& e : ps)
    for (auto& v : e.tensor.data()) v *= s;
}

// Shared minibatch loop. `loss_of` records one sample's loss on a fresh graph
// with gradients flowing into `grads`; `evaluate` scores a split.
template <typename Sample, typename LossFn, typename EvalFn>
Metrics run_training(Model& model, const std::vector<Sample>& train, const std::vector<Sample>& test,
                     const TrainConfig& config, const std::string& task, LossFn&& loss_of, EvalFn&& evaluate) {
  config.validate();
  Metrics metrics;
  metrics.task = task;
  metrics.optimizer = to_string(config.optimizer);
  if (config.epochs == 0) return metrics;
  if (train.empty()) fail(ErrorCode::EmptyInput, "training set is empty");

  const auto start = Clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(Clock::now() - start).count(); };

  ParameterSet<float>& params = model.parameters();
  ParameterSet<float> grads = params.zeros_like();
  auto adam = AdamState<float>::fresh(params, AdamConfig{config.lr});
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng rng(derive_seed(config.seed, {stream::shuffle, epoch}));
    rng.shuffle(order.begin(), order.end());

    double loss_sum = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += config.batch_size) {
      const std::size_t b1 = std::min(order.size(), b0 + config.batch_size);
      grads.set_zero();
      for (std::size_t i = b0; i < b1; ++i) {
        Graph<float> g;
        const Var loss = loss_of(g, params, grads, train[order[i]]);
        const double value = g.value(loss)[0];
        if (!std::isfinite(value)) throw TrainingDiverged(epoch, std::move(metrics));
        g.backward(loss);
        loss_sum += value;
      }
      scale(grads, 1.0f / static_cast<float>(b1 - b0));
      if (config.optimizer == OptimizerKind::adam)
        adam_step(params, grads, adam);
      else
        sgd_step(params, grads, config.lr);
    }

    for (const auto& e : params)
      for (float v : e.tensor.data())
        if (!std::isfinite(v)) throw TrainingDiverged(epoch, std::move(metrics));

    if (epoch % config.eval_every != 0 && epoch != config.epochs) continue;
    const double mean_loss = loss_sum / static_cast<double>(train.size());
    EpochRecord tr{epoch, "train", evaluate(model, train), mean_loss, 0.0};
    tr.wall_time = elapsed();
    metrics.records.push_back(tr);
    if (!test.empty()) {
      EpochRecord te{epoch, "test", evaluate(model, test), kUndefined, 0.0};
      te.wall_time = elapsed();
      metrics.records.push_back(te);
    }
  }

  MetricsSummary summary;
  for (auto it = metrics.records.rbegin(); it != metrics.records.rend() && it->epoch == config.epochs; ++it)
    (it->split == "train" ? summary.train : summary.test) = it->score;
  metrics.summary = summary;
  return metrics;
}

template <typename Sample>
std::vector<Sample> gather(const std::vector<Sample>& data, const std::vector<std::size_t>& idx) {
  std::vector<Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data[i]);
  return out;
}

template <typename Sample, typename Train>
CrossValidationResult cross_validate_impl(const std::vector<Sample>& data, const TrainConfig& config, std::size_t k,
                                          Train&& train_fold) {
  if (k < 2) fail(ErrorCode::InvalidK, "cross-validation needs k >= 2");
  if (data.size() < k) fail(ErrorCode::TooFewSamples, "fewer samples than folds");
  const auto folds = kfold_partition(data.size(), k, derive_seed(config.seed, {stream::fold}));

  CrossValidationResult cv;
  for (std::size_t f = 0; f < k; ++f) {
    std::vector<std::size_t> train_idx;
    for (std::size_t o = 0; o < k; ++o)
      if (o != f) train_idx.insert(train_idx.end(), folds[o].begin(), folds[o].end());
    std::sort(train_idx.begin(), train_idx.end());
    TrainConfig fc = config;
    fc.seed = derive_seed(config.seed, {stream::fold, f});
    fc.eval_every = std::max<std::size_t>(config.epochs, 1);
    FoldResult fr;
    fr.fold = f;
    try {
      const auto metrics = train_fold(gather(data, train_idx), gather(data, folds[f]), fc);
      if (metrics.summary) {
        fr.train = metrics.summary->train;
        fr.validation = metrics.summary->test;
      }
    } catch (const TrainingDiverged&) {
      fr.diverged = true;
      cv.diverged = true;
    }
    cv.folds.push_back(fr);
  }

  if (cv.diverged) {
    cv.mean_rmse = std::numeric_limits<double>::infinity();
    return cv;
  }
  auto mean_std = [&](auto get, double& mean, double& sd) {
    double s = 0.0, s2 = 0.0;
    for (const auto& f : cv.folds) s += get(f);
    mean = s / static_cast<double>(cv.folds.size());
    for (const auto& f : cv.folds) s2 += (get(f) - mean) * (get(f) - mean);
    sd = std::sqrt(s2 / static_cast<double>(cv.folds.size()));
  };
  mean_std([](const FoldResult& f) { return f.validation.rmse; }, cv.mean_rmse, cv.std_rmse);
  mean_std([](const FoldResult& f) { return f.validation.r2; }, cv.mean_r2, cv.std_r2);
  return cv;
}

}  // namespace

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  fail(ErrorCode::InvalidConfig, "unknown optimizer '" + s + "'");
}

std::string to_string(LossScope s) { return s == LossScope::masked_only ? "masked_only" : "all"; }

LossScope loss_scope_from_string(const std::string& s) {
  if (s == "masked_only") return LossScope::masked_only;
  if (s == "all") return LossScope::all;
  fail(ErrorCode::InvalidConfig, "unknown loss scope '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(lr > 0.0)) fail(ErrorCode::NegativeLearningRate, "learning rate must be positive");
  if (batch_size < 1) fail(ErrorCode::InvalidConfig, "batch size must be at least 1");
  if (eval_every < 1) fail(ErrorCode::InvalidConfig, "eval_every must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"lr", c.lr},
       {"batch_size", c.batch_size},
       {"epochs", c.epochs},
       {"optimizer", to_string(c.optimizer)},
       {"seed", c.seed},
       {"loss_scope", to_string(c.loss_scope)},
       {"eval_every", c.eval_every}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  const TrainConfig d = c;
  c.lr = j.value("lr", d.lr);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.epochs = j.value("epochs", d.epochs);
  c.optimizer = optimizer_from_string(j.value("optimizer", to_string(d.optimizer)));
  c.seed = j.value("seed", d.seed);
  c.loss_scope = loss_scope_from_string(j.value("loss_scope", to_string(d.loss_scope)));
  c.eval_every = j.value("eval_every", d.eval_every);
}

nlohmann::json score_json(const SplitScore& s) {
  nlohmann::json j = {{"rmse", number_or_null(s.rmse)}, {"r2", number_or_null(s.r2)}};
  if (s.target_rmse) j["target_rmse"] = pair_json(*s.target_rmse);
  if (s.target_r2) j["target_r2"] = pair_json(*s.target_r2);
  return j;
}

std::string metrics_jsonl(const Metrics& m) {
  std::string out;
  for (const auto& r : m.records) {
    nlohmann::json j = {{"type", "epoch"}, {"task", m.task}, {"epoch", r.epoch}, {"split", r.split}};
    j.update(score_json(r.score));
    if (r.split == "train") j["loss"] = number_or_null(r.loss);
    out += j.dump() + '\n';
  }
  nlohmann::json s = {{"type", "summary"}, {"task", m.task}, {"optimizer", m.optimizer}};
  if (m.summary) {
    const auto train = score_json(m.summary->train);
    const auto test = score_json(m.summary->test);
    s["train_rmse"] = train["rmse"];
    s["test_rmse"] = test["rmse"];
    s["train_r2"] = train["r2"];
    s["test_r2"] = test["r2"];
    s["train"] = train;
    s["test"] = test;
  }
  out += s.dump() + '\n';
  return out;
}

std::string timing_jsonl(const Metrics& m) {
  std::string out;
  for (const auto& r : m.records)
    out += nlohmann::json({{"epoch", r.epoch}, {"split", r.split}, {"wall_time", r.wall_time}}).dump() + '\n';
  return out;
}

SplitScore evaluate_ssl(const Model& model, const std::vector<MaskedSample>& samples) {
  SplitScore score;
  if (samples.empty()) return score;
  std::vector<double> pred, target, all_pred, all_target;
  for (const auto& s : samples) {
    const auto out = model.forward_ssl(s.input);
    const auto rt = make_restoration_target<double>(model.config(), s.target, s.mask);
    for (auto i : rt.mask) {
      pred.push_back(out[i]);
      target.push_back(rt.values[i]);
    }
    if (pred.empty()) {
      all_pred.insert(all_pred.end(), out.begin(), out.end());
      all_target.insert(all_target.end(), rt.values.data().begin(), rt.values.data().end());
    }
  }
  // No masked voxels at all (rate 0): score every voxel instead.
  if (pred.empty()) {
    pred = std::move(all_pred);
    target = std::move(all_target);
  }
  score.rmse = rmse(pred, target);
  score.r2 = r2_or_undefined(pred, target);
  return score;
}

SplitScore evaluate_supervised(const Model& model, const std::vector<SupervisedSample>& samples) {
  SplitScore score;
  if (samples.empty()) return score;
  std::array<std::vector<double>, 2> pred, target;
  for (const auto& s : samples) {
    const auto y = model.forward_supervised(s.input);
    for (std::size_t t = 0; t < 2; ++t) {
      pred[t].push_back(y[t]);
      target[t].push_back(s.target[t]);
    }
  }
  std::array<double, 2> tr{}, t2{};
  for (std::size_t t = 0; t < 2; ++t) {
    tr[t] = rmse(pred[t], target[t]);
    t2[t] = r2_or_undefined(pred[t], target[t]);
  }
  score.target_rmse = tr;
  score.target_r2 = t2;
  score.rmse = 0.5 * (tr[0] + tr[1]);
  score.r2 = 0.5 * (t2[0] + t2[1]);
  return score;
}

TrainResult pretrain(Model model, const std::vector<MaskedSample>& train, const std::vector<MaskedSample>& test,
                     const TrainConfig& config) {
  if (model.config().head != HeadKind::ssl_restore) fail(ErrorCode::WrongHead, "pretraining needs an ssl_restore head");
  const ArchConfig arch = model.config();
  auto loss_of = [&](Graph<float>& g, const ParameterSet<float>& params, ParameterSet<float>& grads,
                     const MaskedSample& s) {
    const Var out = build_forward<float>(g, arch, params, &grads, s.input);
    const auto rt = make_restoration_target<float>(arch, s.target, s.mask);
    if (config.loss_scope == LossScope::masked_only && !rt.mask.empty())
      return mse(g, out, rt.values, std::span<const std::uint32_t>(rt.mask));
    return mse<float>(g, out, rt.values);
  };
  auto metrics = run_training(model, train, test, config, "pretrain", loss_of, evaluate_ssl);
  return {Checkpoint{std::move(model), {config.seed, config.epochs, config.lr, to_string(config.optimizer), "pretrain"}},
          std::move(metrics)};
}

TargetNorm compute_target_norm(const std::vector<SupervisedSample>& train) {
  if (train.empty()) fail(ErrorCode::EmptyInput, "cannot compute target stats of an empty set");
  TargetNorm norm;
  const auto n = static_cast<double>(train.size());
  for (std::size_t t = 0; t < 2; ++t) {
    double s = 0.0;
    for (const auto& x : train) s += x.target[t];
    const double mean = s / n;
    double s2 = 0.0;
    for (const auto& x : train) s2 += (x.target[t] - mean) * (x.target[t] - mean);
    const double sd = std::sqrt(s2 / n);
    norm.mean[t] = mean;
    norm.stddev[t] = sd > 1e-12 ? sd : 1.0;
  }
  return norm;
}

Model initial_finetune_model(const FinetuneInit& init, const std::vector<SupervisedSample>& train) {
  Model model;
  if (init.kind == FinetuneInit::Kind::pretrained) {
    if (!init.checkpoint) fail(ErrorCode::ConfigMismatch, "pretrained init needs a checkpoint");
    model = transfer_weights(*init.checkpoint, init.seed);
  } else {
    ArchConfig arch = init.arch;
    arch.head = HeadKind::regress2;
    arch.restore_edge = 0;
    model = Model::build(arch, init.seed);
  }
  if (!train.empty() && train.front().edge != model.config().edge)
    fail(ErrorCode::ConfigMismatch, "sample edge does not match the model");
  model.set_target_norm(compute_target_norm(train));
  return model;
}

TrainResult finetune(const std::vector<SupervisedSample>& train, const std::vector<SupervisedSample>& test,
                     const TrainConfig& config, const FinetuneInit& init) {
  Model model = initial_finetune_model(init, train);
  const ArchConfig arch = model.config();
  const TargetNorm norm = *model.target_norm();
  auto loss_of = [&](Graph<float>& g, const ParameterSet<float>& params, ParameterSet<float>& grads,
                     const SupervisedSample& s) {
    const Var out = build_forward<float>(g, arch, params, &grads, s.input);
    Tensor<float> z(Shape{2});
    for (std::size_t t = 0; t < 2; ++t)
      z[t] = static_cast<float>((s.target[t] - norm.mean[t]) / norm.stddev[t]);
    return mse(g, out, z);
  };
  auto metrics = run_training(model, train, test, config, "finetune", loss_of, evaluate_supervised);
  const std::string stage = init.kind == FinetuneInit::Kind::pretrained ? "finetune_pretrained" : "finetune_random";
  return {Checkpoint{std::move(model), {config.seed, config.epochs, config.lr, to_string(config.optimizer), stage}},
          std::move(metrics)};
}

std::vector<InitComparisonRow> compare_initializations(const std::vector<SupervisedSample>& train,
                                                       const std::vector<SupervisedSample>& test,
                                                       const TrainConfig& config, const Checkpoint& pretrained) {
  const std::uint64_t init_seed = derive_seed(config.seed, {stream::init});
  std::vector<InitComparisonRow> rows;
  for (const bool use_pretrained : {false, true}) {
    const auto init = use_pretrained ? FinetuneInit::pretrained(pretrained, init_seed)
                                     : FinetuneInit::random(pretrained.model.config(), init_seed);
    auto result = finetune(train, test, config, init);
    InitComparisonRow row{use_pretrained ? "pretrained" : "random", result.metrics.summary.value_or(MetricsSummary{}),
                          std::move(result.metrics)};
    rows.push_back(std::move(row));
  }
  return rows;
}

nlohmann::json comparison_json(const std::vector<InitComparisonRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    const auto train = score_json(r.summary.train);
    const auto test = score_json(r.summary.test);
    out.push_back({{"init", r.init},
                   {"train_rmse", train["rmse"]},
                   {"test_rmse", test["rmse"]},
                   {"train_r2", train["r2"]},
                   {"test_r2", test["r2"]},
                   {"train", train},
                   {"test", test}});
  }
  return out;
}

std::vector<std::vector<std::size_t>> kfold_partition(std::size_t n, std::size_t k, std::uint64_t seed) {
  if (k < 2) fail(ErrorCode::InvalidK, "cross-validation needs k >= 2");
  if (n < k) fail(ErrorCode::TooFewSamples, "fewer samples than folds");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> folds(k);
  std::size_t pos = 0;
  for (std::size_t f = 0; f < k; ++f) {
    const std::size_t size = n / k + (f < n % k ? 1 : 0);
    folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                    order.begin() + static_cast<std::ptrdiff_t>(pos + size));
    std::sort(folds[f].begin(), folds[f].end());
    pos += size;
  }
  return folds;
}

nlohmann::json cv_json(const CrossValidationResult& cv) {
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : cv.folds)
    folds.push_back({{"fold", f.fold},
                     {"train", score_json(f.train)},
                     {"validation", score_json(f.validation)},
                     {"diverged", f.diverged}});
  return {{"folds", folds},
          {"mean_rmse", number_or_null(cv.mean_rmse)},
          {"std_rmse", number_or_null(cv.std_rmse)},
          {"mean_r2", number_or_null(cv.mean_r2)},
          {"std_r2", number_or_null(cv.std_r2)},
          {"diverged", cv.diverged}};
}

CrossValidationResult cross_validate(const std::vector<MaskedSample>& data, const ArchConfig& arch,
                                     const TrainConfig& config, std::size_t k) {
  ArchConfig a = arch;
  a.head = HeadKind::ssl_restore;
  return cross_validate_impl(data, config, k, [&](const auto& train, const auto& val, const TrainConfig& fc) {
    return pretrain(Model::build(a, derive_seed(fc.seed, {stream::init})), train, val, fc).metrics;
  });
}

CrossValidationResult cross_validate(const std::vector<SupervisedSample>& data, const ArchConfig& arch,
                                     const TrainConfig& config, std::size_t k) {
  return cross_validate_impl(data, config, k, [&](const auto& train, const auto& val, const TrainConfig& fc) {
    return finetune(train, val, fc, FinetuneInit::random(arch, derive_seed(fc.seed, {stream::init}))).metrics;
  });
}

}  // namespace poroperm
