#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "poroperm/volume.hpp"

namespace poroperm {

inline constexpr std::size_t kDefaultEdge = 10;

struct Origin {
  std::size_t x = 0, y = 0, z = 0;
  bool operator==(const Origin&) const = default;
};

/// edge³ voxels copied out of a volume, x-fastest.
struct SubCube {
  std::size_t edge = kDefaultEdge;
  std::vector<float> values;
  Origin origin;
  std::uint32_t core_id = 0;
};

enum class MaskMode { voxel, patch };

std::string to_string(MaskMode m);
MaskMode mask_mode_from_string(const std::string& s);

struct MaskSpec {
  double rate = 0.2;
  MaskMode mode = MaskMode::voxel;
  float mask_value = 0.5f;
  std::uint64_t seed = 0;
};

struct MaskedSample {
  std::size_t edge = kDefaultEdge;
  std::vector<float> input;
  std::vector<float> target;
  /// Sorted, distinct voxel indices.
  std::vector<std::uint32_t> mask;
  std::uint32_t core_id = 0;
};

struct SupervisedSample {
  std::size_t edge = kDefaultEdge;
  std::vector<float> input;
  /// (porosity fraction, permeability mD).
  std::array<double, 2> target{};
  std::uint32_t core_id = 0;
};

/// Number of voxels masked at `rate` out of `voxels`.
std::size_t mask_quota(double rate, std::size_t voxels);

SubCube extract_subcube(const Volume3D& volume, Origin origin, std::size_t edge, std::uint32_t core_id = 0);

/// `count` sub-cubes with origins drawn uniformly, with replacement.
std::vector<SubCube> sample_subcubes(const Volume3D& volume, std::size_t count, std::size_t edge, std::uint64_t seed,
                                     std::uint32_t core_id = 0);

MaskedSample apply_mask(const SubCube& sub, const MaskSpec& spec);

struct SslDataset {
  std::vector<MaskedSample> train;
  std::vector<MaskedSample> test;
};

/// Samples `per_volume` sub-cubes from each volume, masks them, and splits the
/// pooled samples at random with `train_fraction` going to train. Mask seeds
/// are derived from `seed`; `spec.seed` is ignored here.
SslDataset build_ssl_dataset(std::span<const Volume3D> volumes, std::size_t per_volume, const MaskSpec& spec,
                             double train_fraction, std::uint64_t seed, std::size_t edge = kDefaultEdge);

/// `first:K` puts whole cores [0, K) in train and the rest in test;
/// `random:F` splits pooled samples with fraction F in train.
struct SupervisedSplit {
  enum class Kind { first_k, random };
  Kind kind = Kind::first_k;
  std::size_t k = 6;
  double fraction = 0.5;

  static SupervisedSplit first(std::size_t k) { return {Kind::first_k, k, 0.5}; }
  static SupervisedSplit random(double fraction) { return {Kind::random, 0, fraction}; }
  static SupervisedSplit parse(const std::string& text);
  std::string to_string() const;
};

struct SupervisedDataset {
  std::vector<SupervisedSample> train;
  std::vector<SupervisedSample> test;
};

SupervisedDataset build_supervised_dataset(std::span<const LabeledVolume> cores, std::size_t per_core,
                                           const SupervisedSplit& split, std::uint64_t seed,
                                           std::size_t edge = kDefaultEdge);

/// Dataset cache files ("CTDS"). SSL caches require a uniform mask count.
void write_dataset_cache(const std::filesystem::path& path, std::span<const MaskedSample> samples, float mask_value);
void write_dataset_cache(const std::filesystem::path& path, std::span<const SupervisedSample> samples);
std::vector<MaskedSample> read_ssl_cache(const std::filesystem::path& path);
std::vector<SupervisedSample> read_supervised_cache(const std::filesystem::path& path);

}  // namespace poroperm
