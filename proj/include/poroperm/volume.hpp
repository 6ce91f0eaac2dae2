#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace poroperm {

/// Voxel counts along x, y, z.
struct Dims {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t count() const noexcept { return nx * ny * nz; }
  std::size_t min_extent() const noexcept;
  bool operator==(const Dims&) const = default;
};

enum class VolumeKind { binary, grayscale };
enum class RawEncoding { u8_binary, u8_grayscale };

/// Dense voxel grid, x-fastest. Convention: 1.0 is pore, 0.0 is solid.
class Volume3D {
 public:
  Volume3D() = default;
  Volume3D(Dims dims, std::vector<float> data, VolumeKind kind, double voxel_size = 1.0);

  const Dims& dims() const noexcept { return dims_; }
  VolumeKind kind() const noexcept { return kind_; }
  double voxel_size() const noexcept { return voxel_size_; }
  std::span<const float> data() const noexcept { return data_; }

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  float at(std::size_t x, std::size_t y, std::size_t z) const noexcept { return data_[index(x, y, z)]; }

  /// Swaps pore and solid (v -> 1 - v).
  Volume3D inverted() const;

  /// Reorders axes; `order[i]` names the source axis that becomes axis i.
  Volume3D permuted(std::array<int, 3> order) const;

 private:
  Dims dims_;
  std::vector<float> data_;
  VolumeKind kind_ = VolumeKind::binary;
  double voxel_size_ = 1.0;
};

/// Porosity as a fraction and permeability in millidarcy (pseudo-mD for
/// synthetic volumes).
struct CoreLabels {
  double porosity = 0.0;
  double permeability_md = 0.0;
};

struct SynthSpec {
  Dims dims{32, 32, 32};
  double correlation_length = 2.0;
  double target_porosity = 0.25;
  std::uint64_t seed = 0;
  double kozeny_constant = 5.0;
};

/// Factor converting the Kozeny-Carman proxy (voxel^2) into pseudo-mD.
inline constexpr double kPseudoMdScale = 1000.0;

Volume3D load_raw_volume(const std::filesystem::path& path, Dims dims, RawEncoding encoding);
void write_raw_volume(const std::filesystem::path& path, const Volume3D& volume);

double porosity(const Volume3D& volume);
double specific_surface(const Volume3D& volume);

/// k = phi^3 / (c S^2 (1 - phi)^2), in voxel^2.
double kozeny_carman(double porosity, double surface, double c);

struct SyntheticCore {
  Volume3D volume;
  CoreLabels labels;
};

SyntheticCore generate_synthetic(const SynthSpec& spec);

/// Sidecar metadata stored next to `X.raw` as `X.json`.
struct VolumeMetadata {
  Dims dims;
  VolumeKind kind = VolumeKind::binary;
  double voxel_size = 1.0;
  std::optional<CoreLabels> labels;
  std::optional<SynthSpec> generator;
};

struct LabeledVolume {
  Volume3D volume;
  std::optional<CoreLabels> labels;
};

std::filesystem::path sidecar_path(const std::filesystem::path& raw_path);

void save_volume(const std::filesystem::path& raw_path, const Volume3D& volume,
                 const std::optional<CoreLabels>& labels, const std::optional<SynthSpec>& generator);
VolumeMetadata read_sidecar(const std::filesystem::path& json_path);
/// Loads `X.raw` using the dims and kind recorded in `X.json`.
LabeledVolume load_volume(const std::filesystem::path& raw_path, bool invert = false);

void to_json(nlohmann::json& j, const Dims& d);
void from_json(const nlohmann::json& j, Dims& d);
void to_json(nlohmann::json& j, const CoreLabels& l);
void from_json(const nlohmann::json& j, CoreLabels& l);
void to_json(nlohmann::json& j, const SynthSpec& s);
void from_json(const nlohmann::json& j, SynthSpec& s);
void to_json(nlohmann::json& j, const VolumeMetadata& m);
void from_json(const nlohmann::json& j, VolumeMetadata& m);

}  // namespace poroperm
