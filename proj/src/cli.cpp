#include "poroperm/cli.hpp"

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "poroperm/model_check.hpp"
#include "poroperm/search.hpp"
#include "poroperm/training.hpp"

namespace poroperm::cli {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file '" + path + "'");
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw UsageError("config file '" + path + "' is not valid JSON: " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

// Collects typed flags and, after parsing, writes the ones the user actually
// passed into the run config at their JSON pointer.
class FlagBinder {
 public:
  explicit FlagBinder(CLI::App* app) : app_(app) {}

  template <typename V>
  CLI::Option* value(const std::string& flag, const std::string& pointer, const std::string& help) {
    auto storage = std::make_shared<V>();
    CLI::Option* opt = app_->add_option(flag, *storage, help);
    appliers_.push_back([=](json& cfg) {
      if (opt->count() > 0) cfg[json::json_pointer(pointer)] = *storage;
    });
    return opt;
  }

  CLI::Option* toggle(const std::string& flag, const std::string& pointer, bool value, const std::string& help) {
    CLI::Option* opt = app_->add_flag(flag, help);
    appliers_.push_back([=](json& cfg) {
      if (opt->count() > 0) cfg[json::json_pointer(pointer)] = value;
    });
    return opt;
  }

  void apply(json& cfg) const {
    for (const auto& a : appliers_) a(cfg);
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::vector<std::function<void(json&)>> appliers_;
};

void add_common(FlagBinder& b) {
  b.value<std::uint64_t>("--seed", "/seed", "Global seed; every random stream derives from it");
  b.value<std::string>("--out-dir", "/out_dir", "Directory for run_config.json and metrics.jsonl");
  b.app()->add_option("--config", "Run config JSON (e.g. a previous run_config.json)");
}

void add_arch_flags(FlagBinder& b) {
  b.app()->add_option("--arch", "Architecture JSON file");
  b.value<std::size_t>("--edge", "/arch/edge", "Sub-cube edge in voxels");
  b.value<std::vector<std::size_t>>("--feature-maps", "/arch/feature_maps", "Feature maps per conv layer");
  b.value<std::size_t>("--attn-layers", "/arch/attn_layers", "Attention layers");
  b.value<std::size_t>("--heads", "/arch/heads", "Attention heads");
  b.value<std::vector<std::size_t>>("--fc-widths", "/arch/fc_widths", "Hidden fully connected widths");
  b.value<std::string>("--activation", "/arch/activation", "relu | sigmoid | tanh");
  b.value<std::size_t>("--restore-edge", "/arch/restore_edge", "Edge of the restored cube (0 = full)");
  b.toggle("--no-layernorm", "/arch/use_layernorm", false, "Disable post-attention layer norm");
  b.toggle("--no-pos-embedding", "/arch/use_positional_embedding", false, "Disable positional embeddings");
}

void add_train_flags(FlagBinder& b) {
  b.value<std::size_t>("--epochs", "/train/epochs", "Training epochs");
  b.value<double>("--lr", "/train/lr", "Learning rate");
  b.value<std::size_t>("--batch-size", "/train/batch_size", "Minibatch size");
  b.value<std::string>("--optimizer", "/train/optimizer", "adam | sgd");
  b.value<std::string>("--loss-scope", "/train/loss_scope", "masked_only | all");
  b.value<std::size_t>("--eval-every", "/train/eval_every", "Evaluate every N epochs");
}

void add_mask_flags(FlagBinder& b) {
  b.value<std::vector<std::string>>("--volumes", "/volumes", "Raw volumes (each with a JSON sidecar)");
  b.value<std::size_t>("--per-volume", "/per_volume", "Sub-cubes drawn per volume");
  b.value<double>("--mask-rate", "/mask_rate", "Fraction of voxels masked");
  b.value<std::string>("--mask-mode", "/mask_mode", "voxel | patch");
  b.value<double>("--mask-value", "/mask_value", "Fill value of masked voxels");
  b.toggle("--invert", "/invert", true, "Swap pore and solid on load");
}

void add_core_flags(FlagBinder& b) {
  b.value<std::vector<std::string>>("--cores", "/cores", "Labeled raw volumes (each with a JSON sidecar)");
  b.value<std::size_t>("--per-core", "/per_core", "Sub-cubes drawn per core");
  b.value<std::string>("--split", "/split", "first:K | random:F");
  b.toggle("--invert", "/invert", true, "Swap pore and solid on load");
}

json defaults_for(const std::string& cmd) {
  json d = {{"command", cmd}, {"seed", 0}, {"out_dir", "."}};
  if (cmd == "synth") {
    d.update({{"dims", {32, 32, 32}}, {"porosity", 0.25}, {"corr_len", 2.0}, {"kozeny_c", 5.0}, {"out", ""}});
    d["out_dir"] = "";
  } else if (cmd == "ingest") {
    d.update({{"raw", ""}, {"dims", nullptr}, {"encoding", "u8_binary"}, {"invert", false}});
  } else if (cmd == "pretrain") {
    d.update({{"volumes", json::array()}, {"per_volume", 1000}, {"mask_rate", 0.2}, {"mask_mode", "voxel"},
              {"mask_value", 0.5}, {"split", 0.5}, {"invert", false}, {"arch", ArchConfig{}},
              {"train", TrainConfig{}}, {"out_ckpt", ""}, {"metrics", ""}});
  } else if (cmd == "finetune") {
    d.update({{"cores", json::array()}, {"per_core", 500}, {"split", "first:6"}, {"init", "random"},
              {"invert", false}, {"arch", ArchConfig{}}, {"train", TrainConfig::finetune_defaults()},
              {"out_ckpt", ""}, {"metrics", ""}});
  } else if (cmd == "eval") {
    d.update({{"ckpt", ""}, {"cores", json::array()}, {"per_core", 500}, {"split", "first:6"}, {"invert", false}});
  } else if (cmd == "gradcheck") {
    d.update({{"arch", "default"}, {"tol", 1e-4}, {"inputs", 10}, {"eps", 1e-5}, {"coords", 200}});
  } else if (cmd == "search") {
    TrainConfig t;
    t.epochs = 5;
    d.update({{"volumes", json::array()}, {"per_volume", 200}, {"mask_rate", 0.2}, {"mask_mode", "voxel"},
              {"mask_value", 0.5}, {"invert", false}, {"budget", 10}, {"space", nullptr}, {"cv", 5},
              {"holdout", false}, {"grid", false}, {"arch", ArchConfig{}}, {"train", t}, {"out", ""}});
  } else if (cmd == "compare") {
    d.update({{"ckpt", ""}, {"cores", json::array()}, {"per_core", 500}, {"split", "first:6"}, {"invert", false},
              {"train", TrainConfig::finetune_defaults()}});
  }
  return d;
}

// Finds `--flag VALUE` or `--flag=VALUE` in the raw arguments.
std::optional<std::string> raw_flag(const std::vector<std::string>& args, const std::string& flag) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == flag && i + 1 < args.size()) return args[i + 1];
    if (args[i].starts_with(flag + "=")) return args[i].substr(flag.size() + 1);
  }
  return std::nullopt;
}

void merge_into(json& base, const json& overlay) {
  for (auto it = overlay.begin(); it != overlay.end(); ++it) {
    if (it.value().is_object() && base.contains(it.key()) && base[it.key()].is_object())
      merge_into(base[it.key()], it.value());
    else
      base[it.key()] = it.value();
  }
}

template <typename V>
V typed(const json& cfg, const char* key) {
  try {
    return cfg.at(key).get<V>();
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad value for '") + key + "': " + e.what());
  }
}

ArchConfig arch_of(const json& cfg) {
  try {
    auto a = cfg.at("arch").get<ArchConfig>();
    a.validate();
    return a;
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad architecture: ") + e.what());
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

TrainConfig train_of(const json& cfg) {
  try {
    TrainConfig t = cfg.at("train").get<TrainConfig>();
    t.seed = cfg.at("seed").get<std::uint64_t>();
    t.validate();
    return t;
  } catch (const json::exception& e) {
    throw UsageError(std::string("bad training config: ") + e.what());
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

std::vector<LabeledVolume> load_all(const json& cfg, const char* key) {
  const auto paths = typed<std::vector<std::string>>(cfg, key);
  if (paths.empty()) throw UsageError(std::string("--") + key + " needs at least one path");
  std::vector<LabeledVolume> out;
  for (const auto& p : paths) out.push_back(load_volume(p, typed<bool>(cfg, "invert")));
  return out;
}

MaskSpec mask_of(const json& cfg) {
  MaskSpec m;
  m.rate = typed<double>(cfg, "mask_rate");
  m.mode = mask_mode_from_string(typed<std::string>(cfg, "mask_mode"));
  m.mask_value = static_cast<float>(typed<double>(cfg, "mask_value"));
  if (!(m.rate >= 0.0 && m.rate <= 1.0)) throw UsageError("--mask-rate must lie in [0,1]");
  return m;
}

SupervisedSplit split_of(const json& cfg) {
  try {
    return SupervisedSplit::parse(typed<std::string>(cfg, "split"));
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
}

fs::path out_dir_of(const json& cfg) { return fs::path(typed<std::string>(cfg, "out_dir")); }

fs::path path_or(const json& cfg, const char* key, const fs::path& fallback) {
  const auto v = typed<std::string>(cfg, key);
  return v.empty() ? fallback : fs::path(v);
}

void write_run_files(const json& cfg, const std::string& metrics, const std::optional<std::string>& timing = {}) {
  const fs::path dir = out_dir_of(cfg);
  write_text(dir / "run_config.json", cfg.dump(2) + "\n");
  write_text(dir / "metrics.jsonl", metrics);
  if (timing) write_text(dir / "timing.jsonl", *timing);
}

std::string summary_line(const json& j) { return j.dump() + "\n"; }

int cmd_synth(json& cfg, std::ostream& out) {
  auto dims_json = cfg.at("dims");
  if (dims_json.is_array() && dims_json.size() == 1) dims_json = dims_json[0];
  SynthSpec spec;
  try {
    spec.dims = dims_json.get<Dims>();
  } catch (const std::exception& e) {
    throw UsageError(std::string("--dims: ") + e.what());
  }
  spec.target_porosity = typed<double>(cfg, "porosity");
  spec.correlation_length = typed<double>(cfg, "corr_len");
  spec.kozeny_constant = typed<double>(cfg, "kozeny_c");
  spec.seed = typed<std::uint64_t>(cfg, "seed");
  const auto prefix = typed<std::string>(cfg, "out");
  if (prefix.empty()) throw UsageError("synth needs --out PREFIX");
  if (typed<std::string>(cfg, "out_dir").empty()) {
    const auto parent = fs::path(prefix).parent_path();
    cfg["out_dir"] = parent.empty() ? "." : parent.string();
  }

  SyntheticCore core;
  try {
    core = generate_synthetic(spec);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidSpec) throw UsageError(e.what());
    throw;
  }
  const fs::path raw = prefix + ".raw";
  if (raw.has_parent_path()) fs::create_directories(raw.parent_path());
  save_volume(raw, core.volume, core.labels, spec);

  const json summary = {{"type", "summary"},
                        {"task", "synth"},
                        {"raw", raw.string()},
                        {"porosity", core.labels.porosity},
                        {"permeability_mD", core.labels.permeability_md},
                        {"specific_surface", specific_surface(core.volume)}};
  write_run_files(cfg, summary_line(summary));
  out << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_ingest(json& cfg, std::ostream& out) {
  const auto raw = typed<std::string>(cfg, "raw");
  if (raw.empty()) throw UsageError("ingest needs --raw PATH");
  const auto enc_name = typed<std::string>(cfg, "encoding");
  if (enc_name != "u8_binary" && enc_name != "u8_grayscale") throw UsageError("--encoding must be u8_binary or u8_grayscale");
  const RawEncoding encoding = enc_name == "u8_binary" ? RawEncoding::u8_binary : RawEncoding::u8_grayscale;

  std::optional<VolumeMetadata> meta;
  if (fs::exists(sidecar_path(raw))) meta = read_sidecar(sidecar_path(raw));
  Dims dims;
  if (!cfg.at("dims").is_null()) {
    auto dj = cfg.at("dims");
    if (dj.is_array() && dj.size() == 1) dj = dj[0];
    dims = dj.get<Dims>();
    if (meta && !(meta->dims == dims)) fail(ErrorCode::InvalidSpec, "--dims disagrees with the sidecar");
  } else if (meta) {
    dims = meta->dims;
  } else {
    throw UsageError("ingest needs --dims when no sidecar exists");
  }
  auto volume = load_raw_volume(raw, dims, encoding);
  if (typed<bool>(cfg, "invert")) volume = volume.inverted();

  json summary = {{"type", "summary"},
                  {"task", "ingest"},
                  {"raw", raw},
                  {"dims", dims},
                  {"kind", volume.kind() == VolumeKind::binary ? "binary" : "grayscale"},
                  {"sidecar", meta.has_value()}};
  if (volume.kind() == VolumeKind::binary) {
    summary["porosity"] = porosity(volume);
    summary["specific_surface"] = specific_surface(volume);
  }
  if (meta && meta->labels) summary["labels"] = *meta->labels;
  write_run_files(cfg, summary_line(summary));
  out << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_pretrain(json& cfg, std::ostream& out) {
  const auto seed = typed<std::uint64_t>(cfg, "seed");
  ArchConfig arch = arch_of(cfg);
  arch.head = HeadKind::ssl_restore;
  cfg["arch"] = arch;
  const TrainConfig train = train_of(cfg);
  cfg["train"] = train;
  const MaskSpec mask = mask_of(cfg);
  const auto cores = load_all(cfg, "volumes");
  std::vector<Volume3D> volumes;
  for (const auto& c : cores) volumes.push_back(c.volume);

  const auto ds = build_ssl_dataset(volumes, typed<std::size_t>(cfg, "per_volume"), mask, typed<double>(cfg, "split"),
                                    seed, arch.edge);
  const fs::path dir = out_dir_of(cfg);
  const fs::path ckpt_path = path_or(cfg, "out_ckpt", dir / "pretrain.ckpt");
  try {
    auto result = pretrain(Model::build(arch, derive_seed(seed, {stream::init})), ds.train, ds.test, train);
    if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
    save_checkpoint(result.checkpoint, ckpt_path);
    const auto lines = metrics_jsonl(result.metrics);
    write_run_files(cfg, lines, timing_jsonl(result.metrics));
    if (const auto extra = typed<std::string>(cfg, "metrics"); !extra.empty()) write_text(extra, lines);
    out << lines;
    return kExitOk;
  } catch (const TrainingDiverged& e) {
    write_run_files(cfg, metrics_jsonl(e.partial()) + summary_line({{"type", "diverged"}, {"epoch", e.epoch()}}));
    throw;
  }
}

// Shared by finetune, eval and compare: the same seed and split always yield
// the same samples.
SupervisedDataset supervised_data(const json& cfg, std::size_t edge) {
  const auto cores = load_all(cfg, "cores");
  return build_supervised_dataset(cores, typed<std::size_t>(cfg, "per_core"), split_of(cfg),
                                  typed<std::uint64_t>(cfg, "seed"), edge);
}

int cmd_finetune(json& cfg, std::ostream& out) {
  const auto seed = typed<std::uint64_t>(cfg, "seed");
  const TrainConfig train = train_of(cfg);
  cfg["train"] = train;
  const auto init_text = typed<std::string>(cfg, "init");
  FinetuneInit init;
  if (init_text == "random") {
    ArchConfig arch = arch_of(cfg);
    arch.head = HeadKind::regress2;
    arch.restore_edge = 0;
    cfg["arch"] = arch;
    init = FinetuneInit::random(arch, derive_seed(seed, {stream::init}));
  } else if (init_text.starts_with("ckpt:")) {
    auto ckpt = load_checkpoint(init_text.substr(5));
    cfg["arch"] = ckpt.model.config();
    init = FinetuneInit::pretrained(std::move(ckpt), derive_seed(seed, {stream::init}));
  } else {
    throw UsageError("--init must be random or ckpt:PATH");
  }
  const auto ds = supervised_data(cfg, init.arch.edge);
  const fs::path dir = out_dir_of(cfg);
  const fs::path ckpt_path = path_or(cfg, "out_ckpt", dir / "finetune.ckpt");
  try {
    auto result = finetune(ds.train, ds.test, train, init);
    if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
    save_checkpoint(result.checkpoint, ckpt_path);
    const auto lines = metrics_jsonl(result.metrics);
    write_run_files(cfg, lines, timing_jsonl(result.metrics));
    if (const auto extra = typed<std::string>(cfg, "metrics"); !extra.empty()) write_text(extra, lines);
    out << lines;
    return kExitOk;
  } catch (const TrainingDiverged& e) {
    write_run_files(cfg, metrics_jsonl(e.partial()) + summary_line({{"type", "diverged"}, {"epoch", e.epoch()}}));
    throw;
  }
}

int cmd_eval(json& cfg, std::ostream& out) {
  const auto ckpt_path = typed<std::string>(cfg, "ckpt");
  if (ckpt_path.empty()) throw UsageError("eval needs --ckpt PATH");
  const auto ckpt = load_checkpoint(ckpt_path);
  if (ckpt.model.config().head != HeadKind::regress2) fail(ErrorCode::WrongHead, "eval needs a fine-tuned checkpoint");
  const auto ds = supervised_data(cfg, ckpt.model.config().edge);
  const auto train = score_json(evaluate_supervised(ckpt.model, ds.train));
  const auto test = score_json(evaluate_supervised(ckpt.model, ds.test));
  const json summary = {{"type", "summary"},     {"task", "eval"},          {"train_rmse", train["rmse"]},
                        {"test_rmse", test["rmse"]}, {"train_r2", train["r2"]}, {"test_r2", test["r2"]},
                        {"train", train},        {"test", test}};
  write_run_files(cfg, summary_line(summary));
  out << summary.dump(2) << "\n";
  return kExitOk;
}

int cmd_gradcheck(json& cfg, std::ostream& out) {
  ArchConfig arch;
  const auto arch_ref = typed<std::string>(cfg, "arch");
  if (arch_ref != "default") {
    try {
      arch = read_json_file(arch_ref).get<ArchConfig>();
      arch.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad architecture file: ") + e.what());
    }
  }
  ModelGradCheckOptions opts;
  opts.inputs = typed<std::size_t>(cfg, "inputs");
  opts.fd_epsilon = typed<double>(cfg, "eps");
  opts.coords_per_tensor = typed<std::size_t>(cfg, "coords");
  opts.seed = typed<std::uint64_t>(cfg, "seed");
  const double tol = typed<double>(cfg, "tol");
  try {
    const auto result = check_model_gradients(arch, opts);
    const bool pass = result.max_rel_error <= tol;
    const json summary = {{"type", "summary"},         {"task", "gradcheck"},
                          {"max_rel_error", result.max_rel_error}, {"tol", tol},
                          {"checked", result.checked}, {"skipped_kinks", result.skipped_kinks},
                          {"refined", result.refined},       {"pass", pass}};
    write_run_files(cfg, summary_line(summary));
    out << "max relative error: " << result.max_rel_error << " (tol " << tol << ", " << result.checked
        << " coordinates, " << result.skipped_kinks << " skipped at kinks)\n";
    return pass ? kExitOk : kExitFailed;
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidEpsilon) throw UsageError(e.what());
    throw;
  }
}

int cmd_search(json& cfg, std::ostream& out) {
  const auto seed = typed<std::uint64_t>(cfg, "seed");
  TrialConfig base{arch_of(cfg), train_of(cfg)};
  base.arch.head = HeadKind::ssl_restore;
  cfg["arch"] = base.arch;
  cfg["train"] = base.train;
  SearchSpace space;
  if (!cfg.at("space").is_null()) {
    try {
      space = read_json_file(cfg.at("space").get<std::string>()).get<SearchSpace>();
      space.validate();
    } catch (const Error& e) {
      throw UsageError(e.what());
    } catch (const json::exception& e) {
      throw UsageError(std::string("bad search space: ") + e.what());
    }
  }
  SearchOptions opts;
  opts.folds = typed<std::size_t>(cfg, "cv");
  opts.holdout = typed<bool>(cfg, "holdout");
  opts.grid = typed<bool>(cfg, "grid");
  const auto budget = typed<std::size_t>(cfg, "budget");
  if (budget == 0) throw UsageError("--budget must be at least 1");
  if (!opts.holdout && opts.folds < 2) throw UsageError("--cv must be at least 2");

  const auto cores = load_all(cfg, "volumes");
  std::vector<Volume3D> volumes;
  for (const auto& c : cores) volumes.push_back(c.volume);
  const auto ds = build_ssl_dataset(volumes, typed<std::size_t>(cfg, "per_volume"), mask_of(cfg), 1.0, seed,
                                    base.arch.edge);
  const auto trials = random_search(space, budget, base, ds.train, seed, opts);

  json arr = json::array();
  std::string lines;
  for (const auto& t : trials) {
    arr.push_back(trial_json(t));
    lines += summary_line({{"type", "trial"}, {"trial", t.trial}, {"mean_rmse", arr.back()["mean_rmse"]},
                           {"status", t.status}});
  }
  lines += summary_line({{"type", "summary"}, {"task", "search"}, {"trials", trials.size()},
                         {"best_trial", trials.front().trial}, {"best_mean_rmse", arr.front()["mean_rmse"]}});
  const fs::path trials_path = path_or(cfg, "out", out_dir_of(cfg) / "trials.json");
  write_text(trials_path, arr.dump(2) + "\n");
  write_run_files(cfg, lines);
  out << lines;
  return kExitOk;
}

int cmd_compare(json& cfg, std::ostream& out) {
  const auto ckpt_path = typed<std::string>(cfg, "ckpt");
  if (ckpt_path.empty()) throw UsageError("compare needs --ckpt PATH (a pretrained checkpoint)");
  const auto ckpt = load_checkpoint(ckpt_path);
  const TrainConfig train = train_of(cfg);
  cfg["train"] = train;
  const auto ds = supervised_data(cfg, ckpt.model.config().edge);
  const auto rows = compare_initializations(ds.train, ds.test, train, ckpt);
  const auto table = comparison_json(rows);
  std::string lines;
  for (const auto& r : table) {
    json line = r;
    line["type"] = "row";
    lines += summary_line(line);
  }
  write_text(out_dir_of(cfg) / "comparison.json", table.dump(2) + "\n");
  write_run_files(cfg, lines);
  out << lines;
  return kExitOk;
}

using Handler = int (*)(json&, std::ostream&);

struct Command {
  const char* name;
  const char* help;
  Handler handler;
  void (*flags)(FlagBinder&);
};

const Command kCommands[] = {
    {"synth", "Generate a labeled synthetic porous volume", cmd_synth,
     [](FlagBinder& b) {
       b.value<std::vector<std::size_t>>("--dims", "/dims", "Volume extent (one value or three)")->expected(1, 3);
       b.value<double>("--porosity", "/porosity", "Target pore fraction in (0,1)");
       b.value<double>("--corr-len", "/corr_len", "Smoothing radius in voxels");
       b.value<double>("--kozeny-c", "/kozeny_c", "Kozeny-Carman constant");
       b.value<std::string>("--out", "/out", "Output prefix; writes PREFIX.raw and PREFIX.json");
     }},
    {"ingest", "Validate a raw volume and its sidecar", cmd_ingest,
     [](FlagBinder& b) {
       b.value<std::string>("--raw", "/raw", "Raw u8 volume");
       b.value<std::vector<std::size_t>>("--dims", "/dims", "Volume extent (one value or three)")->expected(1, 3);
       b.value<std::string>("--encoding", "/encoding", "u8_binary | u8_grayscale");
       b.toggle("--invert", "/invert", true, "Swap pore and solid");
     }},
    {"pretrain", "Masked self-supervised pretraining", cmd_pretrain,
     [](FlagBinder& b) {
       add_mask_flags(b);
       b.value<double>("--split", "/split", "Train fraction of the pooled samples");
       add_arch_flags(b);
       add_train_flags(b);
       b.value<std::string>("--out-ckpt", "/out_ckpt", "Checkpoint path");
       b.value<std::string>("--metrics", "/metrics", "Extra copy of the metrics log");
     }},
    {"finetune", "Supervised porosity/permeability fine-tuning", cmd_finetune,
     [](FlagBinder& b) {
       add_core_flags(b);
       b.value<std::string>("--init", "/init", "random | ckpt:PATH");
       add_arch_flags(b);
       add_train_flags(b);
       b.value<std::string>("--out-ckpt", "/out_ckpt", "Checkpoint path");
       b.value<std::string>("--metrics", "/metrics", "Extra copy of the metrics log");
     }},
    {"eval", "Score a fine-tuned checkpoint", cmd_eval,
     [](FlagBinder& b) {
       b.value<std::string>("--ckpt", "/ckpt", "Fine-tuned checkpoint");
       add_core_flags(b);
     }},
    {"gradcheck", "Finite-difference gradient check of the model", cmd_gradcheck,
     [](FlagBinder& b) {
       b.value<std::string>("--arch", "/arch", "default | architecture JSON file");
       b.value<double>("--tol", "/tol", "Maximum relative error");
       b.value<std::size_t>("--inputs", "/inputs", "Random inputs per head");
       b.value<double>("--eps", "/eps", "Finite-difference step");
       b.value<std::size_t>("--coords", "/coords", "Coordinates checked per tensor");
     }},
    {"search", "Random hyperparameter search with cross-validation", cmd_search,
     [](FlagBinder& b) {
       add_mask_flags(b);
       b.value<std::size_t>("--budget", "/budget", "Number of trials");
       b.value<std::string>("--space", "/space", "Search space JSON file");
       b.value<std::size_t>("--cv", "/cv", "Folds");
       b.toggle("--holdout", "/holdout", true, "Single 80/20 split instead of k-fold");
       b.toggle("--grid", "/grid", true, "Enumerate the grid instead of sampling");
       add_arch_flags(b);
       add_train_flags(b);
       b.value<std::string>("--out", "/out", "Trial log path");
     }},
    {"compare", "Fine-tune from random and pretrained init side by side", cmd_compare,
     [](FlagBinder& b) {
       b.value<std::string>("--ckpt", "/ckpt", "Pretrained checkpoint");
       add_core_flags(b);
       add_train_flags(b);
     }},
};

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"poroperm: masked pretraining and porosity/permeability regression on voxel volumes", "poroperm"};
  app.require_subcommand(1);
  app.fallthrough(false);

  std::vector<std::unique_ptr<FlagBinder>> binders;
  for (const auto& c : kCommands) {
    auto* sub = app.add_subcommand(c.name, c.help);
    binders.push_back(std::make_unique<FlagBinder>(sub));
    add_common(*binders.back());
    c.flags(*binders.back());
  }

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return e.get_exit_code() == 0 ? kExitOk : kExitUsage;
  }

  for (std::size_t i = 0; i < std::size(kCommands); ++i) {
    CLI::App* sub = binders[i]->app();
    if (!sub->parsed()) continue;
    const std::string name = kCommands[i].name;
    try {
      json cfg = defaults_for(name);
      if (const auto path = raw_flag(args, "--config")) {
        json loaded = read_json_file(*path);
        loaded.erase("command");
        merge_into(cfg, loaded);
      }
      if (name != "gradcheck")
        if (const auto arch_path = raw_flag(args, "--arch")) cfg["arch"] = read_json_file(*arch_path);
      binders[i]->apply(cfg);
      cfg["command"] = name;
      const fs::path dir = typed<std::string>(cfg, "out_dir");
      if (!dir.empty()) fs::create_directories(dir);
      return kCommands[i].handler(cfg, out);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << "\n\n" << sub->help();
      return kExitUsage;
    } catch (const TrainingDiverged& e) {
      err << "error: " << e.what() << "\n";
      return kExitFailed;
    } catch (const Error& e) {
      err << "error: " << e.what() << "\n";
      return kExitFailed;
    } catch (const std::exception& e) {
      err << "error: " << e.what() << "\n";
      return kExitFailed;
    }
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) { return dispatch(args, out, err); }

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace poroperm::cli
