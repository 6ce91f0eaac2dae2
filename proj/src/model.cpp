#include "poroperm/model.hpp"

#include <cmath>
#include <numeric>

#include "poroperm/random.hpp"

namespace poroperm {

namespace {

std::string conv_name(std::size_t i, const char* what) { return "conv" + std::to_string(i) + "." + what; }
std::string attn_name(std::size_t i, const char* what) { return "attn" + std::to_string(i) + "." + what; }
std::string norm_name(std::size_t i, const char* what) { return "norm" + std::to_string(i) + "." + what; }
std::string fc_name(std::size_t i, const char* what) { return "fc" + std::to_string(i) + "." + what; }

constexpr const char* kAttnWeights[] = {"wq", "wk", "wv", "wo"};
constexpr const char* kAttnBiases[] = {"bq", "bk", "bv", "bo"};

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-limit, limit));
  return t;
}

// Adds a weight with fan-in scaled uniform init and a zero bias.
template <typename T>
void add_affine(ParameterSet<T>& ps, const std::string& weight, const std::string& bias, Shape wshape, std::size_t fan_in,
                std::size_t outputs, std::uint64_t seed) {
  Rng rng(seed);
  ps.add(weight, uniform_tensor<T>(std::move(wshape), 1.0 / std::sqrt(static_cast<double>(fan_in)), rng));
  ps.add(bias, Tensor<T>(Shape{outputs}));
}

}  // namespace

std::string to_string(HeadKind h) { return h == HeadKind::ssl_restore ? "ssl_restore" : "regress2"; }

HeadKind head_from_string(const std::string& s) {
  if (s == "ssl_restore") return HeadKind::ssl_restore;
  if (s == "regress2") return HeadKind::regress2;
  fail(ErrorCode::InvalidConfig, "unknown head '" + s + "'");
}

std::size_t ArchConfig::trunk_width() const {
  return fc_widths.empty() ? token_count() * token_dim() : fc_widths.back();
}

std::size_t ArchConfig::head_outputs() const {
  if (head == HeadKind::regress2) return 2;
  const std::size_t r = effective_restore_edge();
  return r * r * r;
}

void ArchConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidConfig, what); };
  if (edge < 1) bad("edge must be positive");
  if (feature_maps.empty() || feature_maps.size() > 5) bad("conv layer count must lie in [1,5]");
  for (auto f : feature_maps)
    if (f < 2 || f > 64) bad("feature maps per conv layer must lie in [2,64]");
  if (kernel % 2 == 0) bad("kernel extent must be odd");
  if (attn_layers < 1 || attn_layers > 5) bad("attention layer count must lie in [1,5]");
  if (fc_widths.size() > 4) bad("fc layer count (hidden + head) must lie in [1,5]");
  for (auto w : fc_widths)
    if (w == 0) bad("fc widths must be positive");
  if (heads == 0 || token_dim() % heads != 0)
    bad("token width " + std::to_string(token_dim()) + " is not divisible by " + std::to_string(heads) + " heads");
  if (effective_restore_edge() > edge || edge % effective_restore_edge() != 0)
    bad("restore edge must divide the cube edge");
}

void to_json(nlohmann::json& j, const ArchConfig& c) {
  j = {{"edge", c.edge},
       {"feature_maps", c.feature_maps},
       {"kernel", c.kernel},
       {"attn_layers", c.attn_layers},
       {"heads", c.heads},
       {"fc_widths", c.fc_widths},
       {"activation", to_string(c.activation)},
       {"use_layernorm", c.use_layernorm},
       {"use_positional_embedding", c.use_positional_embedding},
       {"head", to_string(c.head)},
       {"restore_edge", c.restore_edge}};
}

void from_json(const nlohmann::json& j, ArchConfig& c) {
  const ArchConfig d;
  c.edge = j.value("edge", d.edge);
  c.feature_maps = j.value("feature_maps", d.feature_maps);
  c.kernel = j.value("kernel", d.kernel);
  c.attn_layers = j.value("attn_layers", d.attn_layers);
  c.heads = j.value("heads", d.heads);
  c.fc_widths = j.value("fc_widths", d.fc_widths);
  c.activation = activation_from_string(j.value("activation", to_string(d.activation)));
  c.use_layernorm = j.value("use_layernorm", d.use_layernorm);
  c.use_positional_embedding = j.value("use_positional_embedding", d.use_positional_embedding);
  c.head = head_from_string(j.value("head", to_string(d.head)));
  c.restore_edge = j.value("restore_edge", d.restore_edge);
}

void to_json(nlohmann::json& j, const TargetNorm& n) { j = {{"mean", n.mean}, {"std", n.stddev}}; }

void from_json(const nlohmann::json& j, TargetNorm& n) {
  n.mean = j.at("mean").get<std::array<double, 2>>();
  n.stddev = j.at("std").get<std::array<double, 2>>();
}

bool is_head_parameter(const std::string& name) { return name.starts_with("head."); }

template <typename T>
ParameterSet<T> init_head(const ArchConfig& config, std::uint64_t seed) {
  ParameterSet<T> ps;
  const std::size_t in = config.trunk_width();
  const std::size_t out = config.head_outputs();
  add_affine(ps, "head.weight", "head.bias", {out, in}, in, out, derive_seed(seed, {stream::head}));
  return ps;
}

template <typename T>
ParameterSet<T> init_parameters(const ArchConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterSet<T> ps;
  std::uint64_t slot = 0;
  auto next_seed = [&] { return derive_seed(seed, {stream::init, slot++}); };

  std::size_t channels = config.edge;
  const std::size_t k = config.kernel;
  for (std::size_t i = 0; i < config.conv_layers(); ++i) {
    const std::size_t f = config.feature_maps[i];
    add_affine(ps, conv_name(i, "weight"), conv_name(i, "bias"), {f, channels, k, k}, channels * k * k, f, next_seed());
    channels = f;
  }
  const std::size_t tokens = config.token_count();
  const std::size_t d = config.token_dim();
  if (config.use_positional_embedding) {
    Rng rng(next_seed());
    ps.add("pos_embedding", uniform_tensor<T>({tokens, d}, 1.0 / std::sqrt(static_cast<double>(d)), rng));
  }
  for (std::size_t i = 0; i < config.attn_layers; ++i) {
    for (std::size_t w = 0; w < 4; ++w)
      add_affine(ps, attn_name(i, kAttnWeights[w]), attn_name(i, kAttnBiases[w]), {d, d}, d, d, next_seed());
    if (config.use_layernorm) {
      ps.add(norm_name(i, "gain"), Tensor<T>(Shape{d}, T{1}));
      ps.add(norm_name(i, "offset"), Tensor<T>(Shape{d}));
    }
  }
  std::size_t width = tokens * d;
  for (std::size_t i = 0; i < config.fc_widths.size(); ++i) {
    const std::size_t out = config.fc_widths[i];
    add_affine(ps, fc_name(i, "weight"), fc_name(i, "bias"), {out, width}, width, out, next_seed());
    width = out;
  }
  for (auto& e : init_head<T>(config, next_seed())) ps.add(e.name, std::move(e.tensor));
  return ps;
}

template <typename T>
Var build_forward(Graph<T>& g, const ArchConfig& config, const ParameterSet<T>& params, ParameterSet<T>* grads,
                  std::span<const T> input, const ForwardOptions& options, ForwardTrace<T>* trace) {
  const std::size_t e = config.edge;
  if (input.size() != e * e * e)
    fail(ErrorCode::ShapeMismatch, "input has " + std::to_string(input.size()) + " values, expected " +
                                       std::to_string(e * e * e));
  auto param = [&](const std::string& name) {
    return g.parameter(params.at(name), grads ? &grads->at(name) : nullptr);
  };

  // x-fastest voxel order is already z-major channels of row-major slices.
  Var x = g.constant(Tensor<T>({e, e, e}, std::vector<T>(input.begin(), input.end())));
  for (std::size_t i = 0; i < config.conv_layers(); ++i)
    x = activate(g, conv2d(g, x, param(conv_name(i, "weight")), param(conv_name(i, "bias"))), config.activation);

  const std::size_t tokens = config.token_count();
  const std::size_t d = config.token_dim();
  x = reshape(g, x, {tokens, d});
  if (!options.token_permutation.empty()) x = permute_rows(g, x, options.token_permutation);
  if (config.use_positional_embedding) x = add(g, x, param("pos_embedding"));
  if (trace) trace->tokens = g.value(x);

  for (std::size_t i = 0; i < config.attn_layers; ++i) {
    const AttentionParams ap{param(attn_name(i, "wq")), param(attn_name(i, "bq")), param(attn_name(i, "wk")),
                             param(attn_name(i, "bk")), param(attn_name(i, "wv")), param(attn_name(i, "bv")),
                             param(attn_name(i, "wo")), param(attn_name(i, "bo"))};
    AttentionProbe<T>* probe = nullptr;
    if (trace) probe = &trace->attention.emplace_back();
    x = add(g, x, multi_head_attention(g, x, ap, config.heads, probe));
    if (config.use_layernorm) x = layer_norm(g, x, param(norm_name(i, "gain")), param(norm_name(i, "offset")));
  }
  if (trace) trace->attention_out = g.value(x);

  x = reshape(g, x, {tokens * d});
  for (std::size_t i = 0; i < config.fc_widths.size(); ++i)
    x = dense(g, x, param(fc_name(i, "weight")), param(fc_name(i, "bias")), config.activation);
  if (trace) trace->trunk = g.value(x);

  const Activation out_act = config.head == HeadKind::ssl_restore ? Activation::sigmoid : Activation::linear;
  return dense(g, x, param("head.weight"), param("head.bias"), out_act);
}

template <typename T>
RestorationTarget<T> make_restoration_target(const ArchConfig& config, std::span<const float> target,
                                             std::span<const std::uint32_t> mask) {
  const std::size_t e = config.edge;
  const std::size_t r = config.effective_restore_edge();
  if (target.size() != e * e * e) fail(ErrorCode::LengthMismatch, "target does not match the cube edge");
  RestorationTarget<T> out;
  if (r == e) {
    out.values = Tensor<T>({target.size()}, std::vector<T>(target.begin(), target.end()));
    out.mask.assign(mask.begin(), mask.end());
    return out;
  }
  const std::size_t f = e / r;
  std::vector<T> pooled(r * r * r, T{0});
  std::vector<bool> hit(r * r * r, false);
  auto cell_of = [&](std::size_t i) {
    const std::size_t x = i % e, y = (i / e) % e, z = i / (e * e);
    return x / f + r * (y / f + r * (z / f));
  };
  for (std::size_t i = 0; i < target.size(); ++i) pooled[cell_of(i)] += static_cast<T>(target[i]);
  const T inv = T{1} / static_cast<T>(f * f * f);
  for (auto& v : pooled) v *= inv;
  for (auto i : mask) hit[cell_of(i)] = true;
  for (std::size_t c = 0; c < hit.size(); ++c)
    if (hit[c]) out.mask.push_back(static_cast<std::uint32_t>(c));
  const std::size_t cells = pooled.size();
  out.values = Tensor<T>({cells}, std::move(pooled));
  return out;
}

Model::Model(ArchConfig config, ParameterSet<float> params, std::optional<TargetNorm> norm)
    : config_(std::move(config)), params_(std::move(params)), norm_(norm) {
  config_.validate();
  const auto expected = init_parameters<float>(config_, 0);
  if (expected.size() != params_.size())
    fail(ErrorCode::ConfigMismatch, "parameter set does not match the architecture");
  for (std::size_t i = 0; i < expected.size(); ++i)
    if (expected[i].name != params_[i].name || expected[i].tensor.shape() != params_[i].tensor.shape())
      fail(ErrorCode::ConfigMismatch, "parameter '" + params_[i].name + "' does not match the architecture");
}

Model Model::build(const ArchConfig& config, std::uint64_t seed) {
  return Model(config, init_parameters<float>(config, seed));
}

ForwardTrace<float> Model::trace(std::span<const float> input, const ForwardOptions& options) const {
  Graph<float> g;
  ForwardTrace<float> t;
  build_forward<float>(g, config_, params_, nullptr, input, options, &t);
  return t;
}

std::vector<float> Model::forward_ssl(std::span<const float> masked_input) const {
  if (config_.head != HeadKind::ssl_restore) fail(ErrorCode::WrongHead, "forward_ssl needs an ssl_restore head");
  Graph<float> g;
  const Var out = build_forward<float>(g, config_, params_, nullptr, masked_input);
  return g.value(out).values();
}

std::array<double, 2> Model::forward_standardized(std::span<const float> input) const {
  if (config_.head != HeadKind::regress2) fail(ErrorCode::WrongHead, "supervised forward needs a regress2 head");
  Graph<float> g;
  const Var out = build_forward<float>(g, config_, params_, nullptr, input);
  const auto& v = g.value(out);
  return {static_cast<double>(v[0]), static_cast<double>(v[1])};
}

std::array<double, 2> Model::forward_supervised(std::span<const float> input) const {
  if (config_.head != HeadKind::regress2) fail(ErrorCode::WrongHead, "forward_supervised needs a regress2 head");
  if (!norm_) fail(ErrorCode::MissingNormStats, "model has no target normalization stats");
  const auto z = forward_standardized(input);
  return {z[0] * norm_->stddev[0] + norm_->mean[0], z[1] * norm_->stddev[1] + norm_->mean[1]};
}

std::vector<float> Model::trunk_activations(std::span<const float> input) const { return trace(input).trunk.values(); }

void to_json(nlohmann::json& j, const Provenance& p) {
  j = {{"seed", p.seed}, {"epochs", p.epochs}, {"lr", p.lr}, {"optimizer", p.optimizer}, {"stage", p.stage}};
}

void from_json(const nlohmann::json& j, Provenance& p) {
  p.seed = j.value("seed", std::uint64_t{0});
  p.epochs = j.value("epochs", std::uint64_t{0});
  p.lr = j.value("lr", 0.0);
  p.optimizer = j.value("optimizer", std::string("adam"));
  p.stage = j.value("stage", std::string("init"));
}

Model transfer_weights(const Checkpoint& pretrained, std::uint64_t head_seed) {
  const Model& src = pretrained.model;
  if (src.config().head != HeadKind::ssl_restore)
    fail(ErrorCode::ConfigMismatch, "transfer needs a checkpoint with an ssl_restore head");
  ArchConfig cfg = src.config();
  cfg.head = HeadKind::regress2;
  cfg.restore_edge = 0;

  ParameterSet<float> params;
  for (const auto& e : src.parameters())
    if (!is_head_parameter(e.name)) params.add(e.name, e.tensor);
  for (auto& e : init_head<float>(cfg, head_seed)) params.add(e.name, std::move(e.tensor));
  return Model(cfg, std::move(params));
}

template ParameterSet<float> init_parameters<float>(const ArchConfig&, std::uint64_t);
template ParameterSet<double> init_parameters<double>(const ArchConfig&, std::uint64_t);
template ParameterSet<float> init_head<float>(const ArchConfig&, std::uint64_t);
template ParameterSet<double> init_head<double>(const ArchConfig&, std::uint64_t);
template Var build_forward<float>(Graph<float>&, const ArchConfig&, const ParameterSet<float>&, ParameterSet<float>*,
                                  std::span<const float>, const ForwardOptions&, ForwardTrace<float>*);
template Var build_forward<double>(Graph<double>&, const ArchConfig&, const ParameterSet<double>&,
                                   ParameterSet<double>*, std::span<const double>, const ForwardOptions&,
                                   ForwardTrace<double>*);
template ParameterSet<long double> init_parameters<long double>(const ArchConfig&, std::uint64_t);
template Var build_forward<long double>(Graph<long double>&, const ArchConfig&, const ParameterSet<long double>&,
                                        ParameterSet<long double>*, std::span<const long double>,
                                        const ForwardOptions&, ForwardTrace<long double>*);
template RestorationTarget<long double> make_restoration_target<long double>(const ArchConfig&, std::span<const float>,
                                                                             std::span<const std::uint32_t>);
template RestorationTarget<float> make_restoration_target<float>(const ArchConfig&, std::span<const float>,
                                                                 std::span<const std::uint32_t>);
template RestorationTarget<double> make_restoration_target<double>(const ArchConfig&, std::span<const float>,
                                                                   std::span<const std::uint32_t>);

}  // namespace poroperm
