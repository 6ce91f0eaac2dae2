#include <cmath>
#include <random>

#include "poroperm/model.hpp"
#include "poroperm/model_check.hpp"
#include "test_support.hpp"

using namespace poroperm;
using testing_support::TempDir;

namespace {

// Frozen from the implementation for the default architecture.
constexpr std::size_t kDefaultParams = 172484;

std::vector<float> random_cube(std::size_t edge, unsigned seed) {
  std::mt19937 rng(seed);
  std::bernoulli_distribution pore(0.3);
  std::vector<float> v(edge * edge * edge);
  for (auto& x : v) x = pore(rng) ? 1.0f : 0.0f;
  return v;
}

ArchConfig small_arch(HeadKind head = HeadKind::ssl_restore) {
  ArchConfig a;
  a.edge = 6;
  a.feature_maps = {3};
  a.heads = 4;
  a.fc_widths = {8};
  a.head = head;
  return a;
}

}  // namespace

TEST(ArchConfig, DefaultIsFiveLayers) {
  const ArchConfig a;
  EXPECT_EQ(a.conv_layers(), 2u);
  EXPECT_EQ(a.attn_layers, 1u);
  EXPECT_EQ(a.fc_layers(), 2u);
  EXPECT_EQ(a.layer_count(), 5u);
  EXPECT_EQ(a.token_count(), 10u);
  EXPECT_EQ(a.token_dim(), 100u);
  EXPECT_EQ(a.head_outputs(), 1000u);
  EXPECT_NO_THROW(a.validate());
}

TEST(ArchConfig, InvalidConfigs) {
  ArchConfig a;
  a.heads = 7;
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  EXPECT_ERROR_CODE(Model::build(a, 1), ErrorCode::InvalidConfig);
  a = {};
  a.feature_maps = {};
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a.feature_maps = {10, 10, 10, 10, 10, 10};
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a = {};
  a.feature_maps = {1};
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a.feature_maps = {65};
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a = {};
  a.attn_layers = 0;
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a = {};
  a.fc_widths = {8, 8, 8, 8, 8};
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a = {};
  a.kernel = 2;
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
  a = {};
  a.restore_edge = 3;
  EXPECT_ERROR_CODE(a.validate(), ErrorCode::InvalidConfig);
}

TEST(ArchConfig, JsonRoundTrip) {
  ArchConfig a = small_arch();
  a.activation = Activation::tanh;
  a.use_layernorm = false;
  a.restore_edge = 3;
  const nlohmann::json j = a;
  EXPECT_EQ(j.get<ArchConfig>(), a);
}

TEST(Model, ParameterCountGolden) {
  EXPECT_EQ(Model::build(ArchConfig{}, 0).parameter_count(), kDefaultParams);
  ArchConfig r;
  r.head = HeadKind::regress2;
  EXPECT_EQ(Model::build(r, 0).parameter_count(), kDefaultParams - 65u * 1000u + 65u * 2u);
}

TEST(Model, ParameterShapesFollowConfig) {
  const auto m = Model::build(ArchConfig{}, 3);
  const auto& p = m.parameters();
  EXPECT_EQ(p.at("conv0.weight").shape(), (Shape{10, 10, 3, 3}));
  EXPECT_EQ(p.at("conv1.weight").shape(), (Shape{10, 10, 3, 3}));
  EXPECT_EQ(p.at("pos_embedding").shape(), (Shape{10, 100}));
  EXPECT_EQ(p.at("attn0.wq").shape(), (Shape{100, 100}));
  EXPECT_EQ(p.at("fc0.weight").shape(), (Shape{64, 1000}));
  EXPECT_EQ(p.at("head.weight").shape(), (Shape{1000, 64}));
  for (const auto& e : p)
    if (e.name.ends_with("bias") || e.name.starts_with("attn0.b"))
      for (float v : e.tensor.data()) EXPECT_EQ(v, 0.0f) << e.name;
}

TEST(Model, BuildIsDeterministic) {
  EXPECT_EQ(Model::build(ArchConfig{}, 11), Model::build(ArchConfig{}, 11));
  EXPECT_FALSE(Model::build(ArchConfig{}, 11) == Model::build(ArchConfig{}, 12));
}

TEST(Model, ConstructorRejectsWrongParameters) {
  const auto m = Model::build(small_arch(), 1);
  auto params = m.parameters();
  params.at("fc0.weight") = Tensor<float>({3, 3});
  EXPECT_ERROR_CODE(Model(small_arch(), params), ErrorCode::ConfigMismatch);
}

TEST(ForwardSsl, ShapeAndRange) {
  const auto m = Model::build(ArchConfig{}, 2);
  const auto in = random_cube(10, 1);
  const auto out = m.forward_ssl(in);
  ASSERT_EQ(out.size(), in.size());
  for (float v : out) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  EXPECT_EQ(m.forward_ssl(in), out);
}

TEST(ForwardSsl, ShapeForEdgesAndLayerCounts) {
  for (std::size_t edge : {6, 8, 10})
    for (std::size_t layers = 1; layers <= 5; ++layers) {
      ArchConfig a;
      a.edge = edge;
      a.heads = 4;
      a.feature_maps.assign(layers, 4);
      a.attn_layers = layers;
      a.fc_widths.assign(layers - 1, 16);
      const auto out = Model::build(a, layers).forward_ssl(random_cube(edge, 3));
      EXPECT_EQ(out.size(), edge * edge * edge) << "edge " << edge << " layers " << layers;
    }
}

TEST(ForwardSsl, PooledRestorationVariant) {
  ArchConfig a;
  a.restore_edge = 5;
  const auto m = Model::build(a, 2);
  EXPECT_EQ(m.forward_ssl(random_cube(10, 4)).size(), 125u);
}

TEST(ForwardSsl, WrongHead) {
  const auto m = Model::build(small_arch(HeadKind::regress2), 1);
  EXPECT_ERROR_CODE(m.forward_ssl(random_cube(6, 1)), ErrorCode::WrongHead);
  const auto s = Model::build(small_arch(), 1);
  EXPECT_ERROR_CODE(s.forward_supervised(random_cube(6, 1)), ErrorCode::WrongHead);
}

TEST(ForwardSsl, InputLengthChecked) {
  const auto m = Model::build(small_arch(), 1);
  EXPECT_ERROR_CODE(m.forward_ssl(std::vector<float>(10)), ErrorCode::ShapeMismatch);
}

TEST(RestorationTarget, BlockAverages) {
  ArchConfig a;
  a.edge = 4;
  a.heads = 4;
  a.restore_edge = 2;
  std::vector<float> cube(64, 0.0f);
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) cube[x + 4 * (y + 4 * z)] = 1.0f;
  cube[3 + 4 * (3 + 4 * 3)] = 1.0f;
  const std::vector<std::uint32_t> mask{0, 63};
  const auto t = make_restoration_target<double>(a, cube, mask);
  ASSERT_EQ(t.values.size(), 8u);
  EXPECT_DOUBLE_EQ(t.values[0], 1.0);
  EXPECT_DOUBLE_EQ(t.values[7], 1.0 / 8.0);
  EXPECT_DOUBLE_EQ(t.values[1], 0.0);
  EXPECT_EQ(t.mask, (std::vector<std::uint32_t>{0, 7}));
}

TEST(ForwardSupervised, ZeroHeadGivesMean) {
  auto m = Model::build(small_arch(HeadKind::regress2), 5);
  m.parameters().at("head.weight").fill(0.0f);
  m.parameters().at("head.bias").fill(0.0f);
  EXPECT_ERROR_CODE(m.forward_supervised(random_cube(6, 1)), ErrorCode::MissingNormStats);
  m.set_target_norm(TargetNorm{{0.21, 120.0}, {0.03, 40.0}});
  const auto y = m.forward_supervised(random_cube(6, 1));
  EXPECT_DOUBLE_EQ(y[0], 0.21);
  EXPECT_DOUBLE_EQ(y[1], 120.0);
}

TEST(ForwardSupervised, DeStandardizes) {
  auto m = Model::build(small_arch(HeadKind::regress2), 5);
  m.set_target_norm(TargetNorm{{1.0, -2.0}, {3.0, 0.5}});
  const auto in = random_cube(6, 2);
  const auto z = m.forward_standardized(in);
  const auto y = m.forward_supervised(in);
  EXPECT_NEAR(y[0], z[0] * 3.0 + 1.0, 1e-12);
  EXPECT_NEAR(y[1], z[1] * 0.5 - 2.0, 1e-12);
}

TEST(Model, TrunkSharedAcrossHeads) {
  const auto ssl = Model::build(ArchConfig{}, 9);
  const auto sup = transfer_weights(Checkpoint{ssl, {}}, 4);
  const auto in = random_cube(10, 5);
  EXPECT_EQ(ssl.trunk_activations(in), sup.trunk_activations(in));
  EXPECT_EQ(sup.trunk_activations(in).size(), 64u);
}

TEST(Model, TokenPermutationEquivarianceWithoutPositions) {
  ArchConfig a;
  a.use_positional_embedding = false;
  const auto m = Model::build(a, 6);
  const auto in = random_cube(10, 6);
  const std::vector<std::size_t> perm{3, 1, 4, 0, 9, 2, 6, 5, 8, 7};
  const auto plain = m.trace(in);
  const auto permuted = m.trace(in, ForwardOptions{perm});
  const std::size_t d = a.token_dim();
  for (std::size_t r = 0; r < perm.size(); ++r)
    for (std::size_t c = 0; c < d; ++c)
      EXPECT_NEAR(permuted.attention_out[r * d + c], plain.attention_out[perm[r] * d + c], 1e-5);
}

TEST(Model, PositionsBreakEquivariance) {
  const auto m = Model::build(ArchConfig{}, 6);
  const auto in = random_cube(10, 6);
  const std::vector<std::size_t> perm{1, 0, 2, 3, 4, 5, 6, 7, 8, 9};
  const auto plain = m.trace(in);
  const auto permuted = m.trace(in, ForwardOptions{perm});
  double diff = 0.0;
  for (std::size_t c = 0; c < 100; ++c) diff += std::abs(permuted.attention_out[c] - plain.attention_out[100 + c]);
  EXPECT_GT(diff, 1e-4);
}

TEST(Transfer, TrunkBitExactFreshHead) {
  const auto ssl = Model::build(ArchConfig{}, 21);
  const Checkpoint ckpt{ssl, Provenance{21, 3, 1e-3, "adam", "pretrain"}};
  const auto sup = transfer_weights(ckpt, 77);
  EXPECT_EQ(sup.config().head, HeadKind::regress2);
  EXPECT_EQ(sup.parameters().at("head.weight").shape(), (Shape{2, 64}));
  EXPECT_EQ(sup.parameters().at("head.bias").shape(), (Shape{2}));
  for (const auto& e : ssl.parameters()) {
    if (is_head_parameter(e.name)) continue;
    EXPECT_EQ(sup.parameters().at(e.name).values(), e.tensor.values()) << e.name;
  }
  EXPECT_EQ(transfer_weights(ckpt, 77), sup);
}

TEST(Transfer, PooledHeadAlsoReplaced) {
  ArchConfig a;
  a.restore_edge = 5;
  const auto sup = transfer_weights(Checkpoint{Model::build(a, 1), {}}, 2);
  EXPECT_EQ(sup.parameters().at("head.weight").shape(), (Shape{2, 64}));
}

TEST(Transfer, RejectsRegressionCheckpoint) {
  const auto sup = Model::build(small_arch(HeadKind::regress2), 1);
  EXPECT_ERROR_CODE(transfer_weights(Checkpoint{sup, {}}, 2), ErrorCode::ConfigMismatch);
}

TEST(Checkpoint, RoundTripBitExact) {
  TempDir dir;
  auto m = transfer_weights(Checkpoint{Model::build(ArchConfig{}, 8), {}}, 3);
  m.set_target_norm(TargetNorm{{0.2, 50.0}, {0.04, 12.5}});
  const Checkpoint ckpt{m, Provenance{8, 30, 1e-5, "adam", "finetune"}};
  save_checkpoint(ckpt, dir / "m.ckpt");
  const auto back = load_checkpoint(dir / "m.ckpt");
  EXPECT_EQ(back, ckpt);
  for (unsigned s = 0; s < 5; ++s) {
    const auto in = random_cube(10, s);
    EXPECT_EQ(back.model.forward_supervised(in), m.forward_supervised(in));
  }
  const auto bytes = testing_support::read_text(dir / "m.ckpt");
  EXPECT_EQ(bytes.substr(0, 4), "GEOC");
  EXPECT_EQ(static_cast<unsigned char>(bytes[4]), kCheckpointVersion);
}

TEST(Checkpoint, Errors) {
  const auto bytes = encode_checkpoint(Checkpoint{Model::build(small_arch(), 1), {}});
  auto bad = bytes;
  std::copy_n("XXXX", 4, bad.begin());
  EXPECT_ERROR_CODE(decode_checkpoint(bad), ErrorCode::BadMagic);
  bad = bytes;
  bad[4] = 9;
  EXPECT_ERROR_CODE(decode_checkpoint(bad), ErrorCode::UnsupportedVersion);
  for (std::size_t cut : {std::size_t{6}, bytes.size() / 2, bytes.size() - 1})
    EXPECT_ERROR_CODE(decode_checkpoint(std::span<const char>(bytes.data(), cut)), ErrorCode::CorruptCheckpoint);
  bad = bytes;
  bad.push_back(0);
  EXPECT_ERROR_CODE(decode_checkpoint(bad), ErrorCode::CorruptCheckpoint);
  TempDir dir;
  EXPECT_ERROR_CODE(load_checkpoint(dir / "missing.ckpt"), ErrorCode::IoError);
}

TEST(ModelGradCheck, SmallArchitectureBothHeads) {
  ArchConfig a = small_arch();
  a.feature_maps = {3, 2};
  a.attn_layers = 2;
  ModelGradCheckOptions o;
  o.inputs = 2;
  const auto r = check_model_gradients(a, o);
  EXPECT_EQ(r.reports.size(), 4u);
  EXPECT_LE(r.max_rel_error, 1e-4);
}

TEST(ModelGradCheck, SmoothActivationsAndNoNorm) {
  for (Activation act : {Activation::sigmoid, Activation::tanh}) {
    ArchConfig a = small_arch();
    a.activation = act;
    a.use_layernorm = false;
    a.restore_edge = 3;
    ModelGradCheckOptions o;
    o.inputs = 1;
    const auto r = check_model_gradients(a, o);
    EXPECT_LE(r.max_rel_error, 1e-4) << to_string(act);
    EXPECT_EQ(r.skipped_kinks, 0u);
  }
}
