#include <cmath>

#include <nlohmann/json.hpp>

#include "poroperm/volume.hpp"
#include "test_support.hpp"

using namespace poroperm;
using testing_support::binary_volume;
using testing_support::random_binary;
using testing_support::TempDir;

namespace {

Volume3D filled(Dims d, float v) { return binary_volume(d, std::vector<float>(d.count(), v)); }

Volume3D pore_box_with_solids(std::initializer_list<std::array<std::size_t, 3>> solids) {
  const Dims d{3, 3, 3};
  std::vector<float> v(d.count(), 1.0f);
  for (const auto& s : solids) v[s[0] + 3 * (s[1] + 3 * s[2])] = 0.0f;
  return binary_volume(d, std::move(v));
}

}  // namespace

TEST(LoadRaw, BinaryBytesMapToZeroOne) {
  TempDir dir;
  testing_support::write_bytes(dir / "a.raw", {0, 255, 0, 255, 0, 255, 0, 255});
  const auto v = load_raw_volume(dir / "a.raw", {2, 2, 2}, RawEncoding::u8_binary);
  EXPECT_EQ(v.kind(), VolumeKind::binary);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(v.data()[i], i % 2 ? 1.0f : 0.0f);
  EXPECT_DOUBLE_EQ(porosity(v), 0.5);
}

TEST(LoadRaw, AnyNonzeroByteIsPore) {
  TempDir dir;
  testing_support::write_bytes(dir / "a.raw", {0, 1, 7, 200, 0, 0, 0, 0});
  const auto v = load_raw_volume(dir / "a.raw", {2, 2, 2}, RawEncoding::u8_binary);
  EXPECT_DOUBLE_EQ(porosity(v), 3.0 / 8.0);
}

TEST(LoadRaw, GrayscaleScalesBy255) {
  TempDir dir;
  testing_support::write_bytes(dir / "g.raw", {128, 0, 255, 1, 2, 3, 4, 5});
  const auto v = load_raw_volume(dir / "g.raw", {2, 2, 2}, RawEncoding::u8_grayscale);
  EXPECT_EQ(v.kind(), VolumeKind::grayscale);
  EXPECT_NEAR(v.data()[0], 0.50196, 1e-5);
  EXPECT_EQ(v.data()[2], 1.0f);
}

TEST(LoadRaw, XFastestOrder) {
  TempDir dir;
  std::vector<unsigned char> bytes(24, 0);
  bytes[1 + 2 * (2 + 3 * 1)] = 1;  // x=1, y=2, z=1 in a 2x3x4 volume
  testing_support::write_bytes(dir / "o.raw", bytes);
  const auto v = load_raw_volume(dir / "o.raw", {2, 3, 4}, RawEncoding::u8_binary);
  EXPECT_EQ(v.at(1, 2, 1), 1.0f);
  EXPECT_DOUBLE_EQ(porosity(v), 1.0 / 24.0);
}

TEST(LoadRaw, SizeMismatch) {
  TempDir dir;
  testing_support::write_bytes(dir / "s.raw", {0, 1, 0, 1, 0, 1, 0});
  EXPECT_ERROR_CODE(load_raw_volume(dir / "s.raw", {2, 2, 2}, RawEncoding::u8_binary), ErrorCode::FileSizeMismatch);
}

TEST(LoadRaw, MissingFile) {
  TempDir dir;
  EXPECT_ERROR_CODE(load_raw_volume(dir / "none.raw", {2, 2, 2}, RawEncoding::u8_binary), ErrorCode::IoError);
}

TEST(LoadRaw, WriteThenLoadIsIdentity) {
  TempDir dir;
  const auto v = random_binary({5, 6, 7}, 0.4, 3);
  write_raw_volume(dir / "r.raw", v);
  const auto back = load_raw_volume(dir / "r.raw", v.dims(), RawEncoding::u8_binary);
  EXPECT_TRUE(std::equal(v.data().begin(), v.data().end(), back.data().begin()));
}

TEST(Porosity, Oracles) {
  EXPECT_DOUBLE_EQ(porosity(filled({4, 4, 4}, 1.0f)), 1.0);
  EXPECT_DOUBLE_EQ(porosity(filled({4, 4, 4}, 0.0f)), 0.0);
  std::vector<float> v(8, 0.0f);
  v[0] = v[5] = 1.0f;
  EXPECT_DOUBLE_EQ(porosity(binary_volume({2, 2, 2}, v)), 0.25);
}

TEST(Porosity, RejectsGrayscale) {
  Volume3D g({2, 2, 2}, std::vector<float>(8, 0.3f), VolumeKind::grayscale);
  EXPECT_ERROR_CODE(porosity(g), ErrorCode::NotBinary);
  EXPECT_ERROR_CODE(specific_surface(g), ErrorCode::NotBinary);
}

TEST(Volume, RejectsNonBinaryValuesInBinaryVolume) {
  EXPECT_ERROR_CODE(binary_volume({2, 2, 2}, std::vector<float>(8, 0.5f)), ErrorCode::NotBinary);
}

TEST(SpecificSurface, Oracles) {
  EXPECT_DOUBLE_EQ(specific_surface(filled({3, 3, 3}, 1.0f)), 0.0);
  EXPECT_NEAR(specific_surface(pore_box_with_solids({{1, 1, 1}})), 6.0 / 27.0, 1e-12);
  // The second solid sits on the +x boundary: 5 + 4 interior pore faces.
  EXPECT_NEAR(specific_surface(pore_box_with_solids({{1, 1, 1}, {2, 1, 1}})), 9.0 / 27.0, 1e-12);
}

TEST(SpecificSurface, BoundaryFacesNotCounted) {
  // A solid corner voxel has three interior neighbours.
  EXPECT_NEAR(specific_surface(pore_box_with_solids({{0, 0, 0}})), 3.0 / 27.0, 1e-12);
}

TEST(SpecificSurface, InvariantUnderPermutationAndInversion) {
  for (unsigned seed = 0; seed < 10; ++seed) {
    const auto v = random_binary({5, 7, 9}, 0.3, seed);
    const double s = specific_surface(v);
    EXPECT_DOUBLE_EQ(specific_surface(v.inverted()), s);
    for (auto order : {std::array<int, 3>{1, 0, 2}, {2, 1, 0}, {1, 2, 0}, {0, 2, 1}}) {
      const auto p = v.permuted(order);
      EXPECT_DOUBLE_EQ(specific_surface(p), s);
      EXPECT_DOUBLE_EQ(porosity(p), porosity(v));
    }
  }
}

TEST(Volume, PermutedMovesAxes) {
  const auto v = random_binary({2, 3, 4}, 0.5, 1);
  const auto p = v.permuted({2, 0, 1});  // new x = old z, new y = old x, new z = old y
  EXPECT_EQ(p.dims(), (Dims{4, 2, 3}));
  for (std::size_t x = 0; x < 2; ++x)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t z = 0; z < 4; ++z) EXPECT_EQ(p.at(z, x, y), v.at(x, y, z));
}

TEST(Volume, InvertedComplementsPorosity) {
  const auto v = random_binary({6, 6, 6}, 0.3, 9);
  EXPECT_NEAR(porosity(v.inverted()), 1.0 - porosity(v), 1e-12);
}

TEST(KozenyCarman, Oracles) {
  EXPECT_DOUBLE_EQ(kozeny_carman(0.0, 0.3, 5.0), 0.0);
  EXPECT_DOUBLE_EQ(kozeny_carman(0.0, 0.0, 5.0), 0.0);
  EXPECT_NEAR(kozeny_carman(0.2, 0.1, 5.0), 0.25, 1e-12);
}

TEST(KozenyCarman, Errors) {
  EXPECT_ERROR_CODE(kozeny_carman(0.5, 0.0, 5.0), ErrorCode::ZeroSurface);
  EXPECT_ERROR_CODE(kozeny_carman(1.0, 0.1, 5.0), ErrorCode::InvalidPorosity);
  EXPECT_ERROR_CODE(kozeny_carman(-0.1, 0.1, 5.0), ErrorCode::InvalidPorosity);
}

TEST(KozenyCarman, IncreasingInPorosity) {
  double prev = 0.0;
  for (int i = 1; i < 100; ++i) {
    const double k = kozeny_carman(i / 100.0, 0.2, 5.0);
    EXPECT_GT(k, prev);
    prev = k;
  }
}

TEST(Synthetic, HitsTargetPorosity) {
  SynthSpec spec;
  spec.dims = {32, 32, 32};
  spec.target_porosity = 0.25;
  spec.seed = 7;
  const auto core = generate_synthetic(spec);
  EXPECT_LE(std::abs(porosity(core.volume) - 0.25), 0.01);
  EXPECT_EQ(porosity(core.volume), core.labels.porosity);
  EXPECT_NEAR(core.labels.permeability_md,
              kPseudoMdScale * kozeny_carman(core.labels.porosity, specific_surface(core.volume), 5.0), 1e-9);
}

TEST(Synthetic, WhiteNoiseStillMatchesTarget) {
  SynthSpec spec;
  spec.dims = {16, 16, 16};
  spec.correlation_length = 0.0;
  for (double target : {0.1, 0.33, 0.7}) {
    spec.target_porosity = target;
    const auto core = generate_synthetic(spec);
    EXPECT_LE(std::abs(core.labels.porosity - target), 1.0 / 4096.0 + 1e-12);
  }
}

TEST(Synthetic, DeterministicPerSeed) {
  SynthSpec spec;
  spec.dims = {12, 10, 8};
  spec.seed = 42;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  EXPECT_TRUE(std::equal(a.volume.data().begin(), a.volume.data().end(), b.volume.data().begin()));
  spec.seed = 43;
  const auto c = generate_synthetic(spec);
  EXPECT_FALSE(std::equal(a.volume.data().begin(), a.volume.data().end(), c.volume.data().begin()));
}

TEST(Synthetic, LongerCorrelationMeansLessSurface) {
  SynthSpec spec;
  spec.dims = {24, 24, 24};
  spec.correlation_length = 0.0;
  const double s0 = specific_surface(generate_synthetic(spec).volume);
  spec.correlation_length = 3.0;
  const double s3 = specific_surface(generate_synthetic(spec).volume);
  EXPECT_LT(s3, s0);
}

TEST(Synthetic, InvalidSpecs) {
  SynthSpec spec;
  spec.target_porosity = 0.0;
  EXPECT_ERROR_CODE(generate_synthetic(spec), ErrorCode::InvalidSpec);
  spec.target_porosity = 1.0;
  EXPECT_ERROR_CODE(generate_synthetic(spec), ErrorCode::InvalidSpec);
  spec = {};
  spec.correlation_length = -1.0;
  EXPECT_ERROR_CODE(generate_synthetic(spec), ErrorCode::InvalidSpec);
  spec = {};
  spec.dims = {7, 32, 32};
  EXPECT_ERROR_CODE(generate_synthetic(spec), ErrorCode::InvalidSpec);
}

TEST(Sidecar, SaveAndLoadRoundTrip) {
  TempDir dir;
  SynthSpec spec;
  spec.dims = {10, 11, 12};
  const auto core = generate_synthetic(spec);
  save_volume(dir / "c.raw", core.volume, core.labels, spec);
  EXPECT_TRUE(std::filesystem::exists(dir / "c.json"));
  const auto meta = read_sidecar(dir / "c.json");
  EXPECT_EQ(meta.dims, spec.dims);
  ASSERT_TRUE(meta.labels);
  EXPECT_DOUBLE_EQ(meta.labels->porosity, core.labels.porosity);
  ASSERT_TRUE(meta.generator);
  EXPECT_EQ(meta.generator->seed, spec.seed);

  const auto loaded = load_volume(dir / "c.raw");
  EXPECT_TRUE(std::equal(loaded.volume.data().begin(), loaded.volume.data().end(), core.volume.data().begin()));
  ASSERT_TRUE(loaded.labels);
  EXPECT_DOUBLE_EQ(loaded.labels->permeability_md, core.labels.permeability_md);

  const auto inverted = load_volume(dir / "c.raw", true);
  EXPECT_NEAR(porosity(inverted.volume), 1.0 - core.labels.porosity, 1e-12);
}

TEST(Sidecar, DimsAcceptScalarOrTriple) {
  EXPECT_EQ(nlohmann::json(32).get<Dims>(), (Dims{32, 32, 32}));
  EXPECT_EQ(nlohmann::json::parse("[4,5,6]").get<Dims>(), (Dims{4, 5, 6}));
  EXPECT_ERROR_CODE(nlohmann::json::parse("[4,5]").get<Dims>(), ErrorCode::InvalidSpec);
}
