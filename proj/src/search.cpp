#include "poroperm/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "poroperm/random.hpp"

namespace poroperm {

namespace {

template <typename V>
const V& pick(const std::vector<V>& grid, Rng& rng) {
  return grid[rng.below(grid.size())];
}

CrossValidationResult holdout_eval(const std::vector<MaskedSample>& data, const ArchConfig& arch,
                                   const TrainConfig& config, double fraction) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(config.seed, {stream::split}));
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  if (n_train == 0 || n_train >= data.size()) fail(ErrorCode::TooFewSamples, "holdout split leaves a side empty");
  std::vector<MaskedSample> train, val;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? train : val).push_back(data[order[i]]);

  TrainConfig c = config;
  c.eval_every = std::max<std::size_t>(config.epochs, 1);
  ArchConfig a = arch;
  a.head = HeadKind::ssl_restore;
  CrossValidationResult cv;
  FoldResult fr;
  try {
    const auto result = pretrain(Model::build(a, derive_seed(c.seed, {stream::init})), train, val, c);
    if (result.metrics.summary) {
      fr.train = result.metrics.summary->train;
      fr.validation = result.metrics.summary->test;
    }
  } catch (const TrainingDiverged&) {
    fr.diverged = true;
    cv.diverged = true;
  }
  cv.folds.push_back(fr);
  cv.mean_rmse = cv.diverged ? std::numeric_limits<double>::infinity() : fr.validation.rmse;
  cv.mean_r2 = fr.validation.r2;
  cv.std_rmse = cv.std_r2 = 0.0;
  return cv;
}

}  // namespace

void SearchSpace::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidConfig, "search space: " + what); };
  if (learning_rates.empty() || batch_sizes.empty() || activations.empty() || fc_widths.empty())
    bad("every grid needs at least one value");
  if (min_layers < 1 || min_layers > max_layers || max_layers > 5) bad("layer range must lie within [1,5]");
  if (min_feature_maps < 2 || min_feature_maps > max_feature_maps || max_feature_maps > 64)
    bad("feature map range must lie within [2,64]");
  for (double lr : learning_rates)
    if (!(lr > 0.0)) bad("learning rates must be positive");
  for (auto b : batch_sizes)
    if (b == 0) bad("batch sizes must be positive");
}

void to_json(nlohmann::json& j, const SearchSpace& s) {
  std::vector<std::string> acts;
  for (auto a : s.activations) acts.push_back(to_string(a));
  j = {{"learning_rates", s.learning_rates}, {"batch_sizes", s.batch_sizes},
       {"min_layers", s.min_layers},         {"max_layers", s.max_layers},
       {"min_feature_maps", s.min_feature_maps}, {"max_feature_maps", s.max_feature_maps},
       {"activations", acts},                {"fc_widths", s.fc_widths}};
}

void from_json(const nlohmann::json& j, SearchSpace& s) {
  const SearchSpace d;
  s.learning_rates = j.value("learning_rates", d.learning_rates);
  s.batch_sizes = j.value("batch_sizes", d.batch_sizes);
  s.min_layers = j.value("min_layers", d.min_layers);
  s.max_layers = j.value("max_layers", d.max_layers);
  s.min_feature_maps = j.value("min_feature_maps", d.min_feature_maps);
  s.max_feature_maps = j.value("max_feature_maps", d.max_feature_maps);
  s.fc_widths = j.value("fc_widths", d.fc_widths);
  s.activations = d.activations;
  if (j.contains("activations")) {
    s.activations.clear();
    for (const auto& a : j.at("activations")) s.activations.push_back(activation_from_string(a.get<std::string>()));
  }
}

std::vector<TrialConfig> sample_trials(const SearchSpace& space, const TrialConfig& base, std::size_t count,
                                       std::uint64_t seed) {
  space.validate();
  std::vector<TrialConfig> out;
  out.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    Rng rng(derive_seed(seed, {stream::search, t}));
    auto layers = [&] {
      return static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(space.min_layers),
                                                  static_cast<std::int64_t>(space.max_layers)));
    };
    TrialConfig c = base;
    c.train.lr = pick(space.learning_rates, rng);
    c.train.batch_size = pick(space.batch_sizes, rng);
    c.arch.activation = pick(space.activations, rng);
    c.arch.feature_maps.assign(layers(), 0);
    for (auto& f : c.arch.feature_maps)
      f = static_cast<std::size_t>(rng.between(static_cast<std::int64_t>(space.min_feature_maps),
                                               static_cast<std::int64_t>(space.max_feature_maps)));
    c.arch.attn_layers = layers();
    c.arch.fc_widths.assign(layers() - 1, 0);
    for (auto& w : c.arch.fc_widths) w = pick(space.fc_widths, rng);
    c.train.seed = derive_seed(seed, {stream::search, t, 1});
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<TrialConfig> grid_trials(const SearchSpace& space, const TrialConfig& base, std::size_t limit) {
  space.validate();
  const std::size_t maps = base.arch.feature_maps.empty() ? 10 : base.arch.feature_maps.front();
  const std::size_t width = base.arch.fc_widths.empty() ? space.fc_widths.front() : base.arch.fc_widths.front();
  std::vector<TrialConfig> out;
  auto full = [&] { return limit > 0 && out.size() >= limit; };
  for (double lr : space.learning_rates)
    for (auto batch : space.batch_sizes)
      for (auto act : space.activations)
        for (std::size_t conv = space.min_layers; conv <= space.max_layers; ++conv)
          for (std::size_t attn = space.min_layers; attn <= space.max_layers; ++attn)
            for (std::size_t fc = space.min_layers; fc <= space.max_layers; ++fc) {
              if (full()) return out;
              TrialConfig c = base;
              c.train.lr = lr;
              c.train.batch_size = batch;
              c.arch.activation = act;
              c.arch.feature_maps.assign(conv, maps);
              c.arch.attn_layers = attn;
              c.arch.fc_widths.assign(fc - 1, width);
              out.push_back(std::move(c));
            }
  return out;
}

nlohmann::json trial_json(const TrialRecord& t) {
  const auto cv = cv_json(t.cv);
  return {{"trial", t.trial},
          {"config", {{"arch", t.config.arch}, {"train", t.config.train}}},
          {"fold_metrics", cv["folds"]},
          {"mean_rmse", cv["mean_rmse"]},
          {"std_rmse", cv["std_rmse"]},
          {"mean_r2", cv["mean_r2"]},
          {"status", t.status}};
}

std::vector<TrialRecord> random_search(const SearchSpace& space, std::size_t budget, const TrialConfig& base,
                                       const std::vector<MaskedSample>& data, std::uint64_t seed,
                                       const SearchOptions& options) {
  if (budget == 0) fail(ErrorCode::EmptyBudget, "search budget must be at least 1");
  const auto trials = options.grid ? grid_trials(space, base, budget) : sample_trials(space, base, budget, seed);
  std::vector<TrialRecord> records;
  records.reserve(trials.size());
  for (std::size_t t = 0; t < trials.size(); ++t) {
    TrialRecord r;
    r.trial = t;
    r.config = trials[t];
    if (options.grid) r.config.train.seed = derive_seed(seed, {stream::search, t, 1});
    r.cv = options.holdout ? holdout_eval(data, r.config.arch, r.config.train, options.holdout_fraction)
                           : cross_validate(data, r.config.arch, r.config.train, options.folds);
    r.mean_rmse = r.cv.mean_rmse;
    r.status = r.cv.diverged ? "diverged" : "ok";
    records.push_back(std::move(r));
  }
  std::stable_sort(records.begin(), records.end(), [](const TrialRecord& a, const TrialRecord& b) {
    const double x = std::isnan(a.mean_rmse) ? INFINITY : a.mean_rmse;
    const double y = std::isnan(b.mean_rmse) ? INFINITY : b.mean_rmse;
    return x < y;
  });
  return records;
}

}  // namespace poroperm
