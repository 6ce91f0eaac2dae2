#include "poroperm/volume.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

#include "poroperm/error.hpp"
#include "poroperm/random.hpp"

namespace poroperm {

namespace {

void require_binary(const Volume3D& volume) {
  if (volume.kind() != VolumeKind::binary) fail(ErrorCode::NotBinary, "operation needs a binary volume");
}

// Periodic box average of radius r along one axis, in place.
void box_filter_axis(std::vector<double>& field, const Dims& d, int axis, std::size_t r) {
  const std::size_t n = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
  const std::size_t stride = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
  const std::size_t lines = d.count() / n;
  const double window = static_cast<double>(2 * r + 1);
  std::vector<double> line(n);
  for (std::size_t l = 0; l < lines; ++l) {
    // base offset of line l, enumerating the two orthogonal axes
    std::size_t base = 0;
    if (axis == 0) {
      base = l * d.nx;
    } else if (axis == 1) {
      base = (l % d.nx) + (l / d.nx) * d.nx * d.ny;
    } else {
      base = l;
    }
    for (std::size_t i = 0; i < n; ++i) line[i] = field[base + i * stride];
    for (std::size_t i = 0; i < n; ++i) {
      double acc = 0.0;
      for (std::size_t k = 0; k < 2 * r + 1; ++k) {
        const std::size_t j = (i + n * (r / n + 1) + k - r) % n;
        acc += line[j];
      }
      field[base + i * stride] = acc / window;
    }
  }
}

std::string kind_name(VolumeKind k) { return k == VolumeKind::binary ? "binary" : "grayscale"; }

}  // namespace

std::size_t Dims::min_extent() const noexcept { return std::min({nx, ny, nz}); }

Volume3D::Volume3D(Dims dims, std::vector<float> data, VolumeKind kind, double voxel_size)
    : dims_(dims), data_(std::move(data)), kind_(kind), voxel_size_(voxel_size) {
  if (data_.size() != dims_.count()) fail(ErrorCode::ShapeMismatch, "voxel count does not match dims");
  for (float v : data_) {
    if (!(v >= 0.0f && v <= 1.0f)) fail(ErrorCode::InvalidSpec, "voxel value outside [0,1]");
    if (kind_ == VolumeKind::binary && v != 0.0f && v != 1.0f)
      fail(ErrorCode::NotBinary, "binary volume holds a non-binary value");
  }
}

Volume3D Volume3D::inverted() const {
  std::vector<float> out(data_.size());
  std::transform(data_.begin(), data_.end(), out.begin(), [](float v) { return 1.0f - v; });
  return Volume3D(dims_, std::move(out), kind_, voxel_size_);
}

Volume3D Volume3D::permuted(std::array<int, 3> order) const {
  const std::array<std::size_t, 3> src{dims_.nx, dims_.ny, dims_.nz};
  const Dims out_dims{src[order[0]], src[order[1]], src[order[2]]};
  std::vector<float> out(data_.size());
  std::array<std::size_t, 3> p{};
  for (std::size_t z = 0; z < out_dims.nz; ++z)
    for (std::size_t y = 0; y < out_dims.ny; ++y)
      for (std::size_t x = 0; x < out_dims.nx; ++x) {
        p[order[0]] = x;
        p[order[1]] = y;
        p[order[2]] = z;
        out[x + out_dims.nx * (y + out_dims.ny * z)] = at(p[0], p[1], p[2]);
      }
  return Volume3D(out_dims, std::move(out), kind_, voxel_size_);
}

Volume3D load_raw_volume(const std::filesystem::path& path, Dims dims, RawEncoding encoding) {
  std::error_code ec;
  const auto size = std::filesystem::file_size(path, ec);
  if (ec) fail(ErrorCode::IoError, "cannot stat " + path.string() + ": " + ec.message());
  if (size != dims.count())
    fail(ErrorCode::FileSizeMismatch, path.string() + " has " + std::to_string(size) + " bytes, expected " +
                                          std::to_string(dims.count()));
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<unsigned char> bytes(size);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(size));
  if (!in) fail(ErrorCode::IoError, "short read from " + path.string());

  std::vector<float> data(size);
  if (encoding == RawEncoding::u8_binary) {
    std::transform(bytes.begin(), bytes.end(), data.begin(), [](unsigned char b) { return b ? 1.0f : 0.0f; });
    return Volume3D(dims, std::move(data), VolumeKind::binary);
  }
  std::transform(bytes.begin(), bytes.end(), data.begin(),
                 [](unsigned char b) { return static_cast<float>(b) / 255.0f; });
  return Volume3D(dims, std::move(data), VolumeKind::grayscale);
}

void write_raw_volume(const std::filesystem::path& path, const Volume3D& volume) {
  std::vector<unsigned char> bytes(volume.data().size());
  std::transform(volume.data().begin(), volume.data().end(), bytes.begin(),
                 [](float v) { return static_cast<unsigned char>(std::lround(v * 255.0f)); });
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

double porosity(const Volume3D& volume) {
  require_binary(volume);
  const auto data = volume.data();
  if (data.empty()) return 0.0;
  const auto pores = std::count(data.begin(), data.end(), 1.0f);
  return static_cast<double>(pores) / static_cast<double>(data.size());
}

double specific_surface(const Volume3D& volume) {
  require_binary(volume);
  const Dims& d = volume.dims();
  if (d.count() == 0) return 0.0;
  std::size_t faces = 0;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const float v = volume.at(x, y, z);
        if (x + 1 < d.nx && volume.at(x + 1, y, z) != v) ++faces;
        if (y + 1 < d.ny && volume.at(x, y + 1, z) != v) ++faces;
        if (z + 1 < d.nz && volume.at(x, y, z + 1) != v) ++faces;
      }
  return static_cast<double>(faces) / static_cast<double>(d.count());
}

double kozeny_carman(double phi, double surface, double c) {
  if (!(phi >= 0.0 && phi < 1.0)) fail(ErrorCode::InvalidPorosity, "porosity must lie in [0,1)");
  if (!(c > 0.0)) fail(ErrorCode::InvalidSpec, "Kozeny constant must be positive");
  if (phi == 0.0) return 0.0;
  if (!(surface > 0.0)) fail(ErrorCode::ZeroSurface, "specific surface must be positive");
  const double solid = 1.0 - phi;
  return phi * phi * phi / (c * surface * surface * solid * solid);
}

SyntheticCore generate_synthetic(const SynthSpec& spec) {
  const Dims& d = spec.dims;
  if (d.nx < 8 || d.ny < 8 || d.nz < 8) fail(ErrorCode::InvalidSpec, "every dimension must be at least 8");
  if (!(spec.target_porosity > 0.0 && spec.target_porosity < 1.0))
    fail(ErrorCode::InvalidSpec, "target porosity must lie strictly inside (0,1)");
  if (!(spec.correlation_length >= 0.0)) fail(ErrorCode::InvalidSpec, "correlation length must be >= 0");
  if (!(spec.kozeny_constant > 0.0)) fail(ErrorCode::InvalidSpec, "Kozeny constant must be positive");

  const std::size_t n = d.count();
  Rng rng(derive_seed(spec.seed, {stream::synth}));
  std::vector<double> field(n);
  for (auto& v : field) v = rng.normal();

  const auto radius = static_cast<std::size_t>(std::lround(spec.correlation_length));
  if (radius > 0)
    for (int axis = 0; axis < 3; ++axis) box_filter_axis(field, d, axis, radius);

  // The k largest field values become pore; ties broken by index so the
  // selected set is unique.
  const auto k = static_cast<std::size_t>(std::llround(spec.target_porosity * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto greater = [&](std::size_t a, std::size_t b) {
    return field[a] > field[b] || (field[a] == field[b] && a < b);
  };
  if (k > 0 && k < n) std::nth_element(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), greater);
  std::vector<float> data(n, 0.0f);
  for (std::size_t i = 0; i < k; ++i) data[order[i]] = 1.0f;

  SyntheticCore core{Volume3D(d, std::move(data), VolumeKind::binary), {}};
  const double phi = porosity(core.volume);
  const double surface = specific_surface(core.volume);
  core.labels = {phi, kPseudoMdScale * kozeny_carman(phi, surface, spec.kozeny_constant)};
  return core;
}

std::filesystem::path sidecar_path(const std::filesystem::path& raw_path) {
  auto p = raw_path;
  p.replace_extension(".json");
  return p;
}

void to_json(nlohmann::json& j, const Dims& d) { j = nlohmann::json::array({d.nx, d.ny, d.nz}); }

void from_json(const nlohmann::json& j, Dims& d) {
  if (j.is_number_integer()) {
    d.nx = d.ny = d.nz = j.get<std::size_t>();
    return;
  }
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::InvalidSpec, "dims must be an integer or a 3-element array");
  d = {j[0].get<std::size_t>(), j[1].get<std::size_t>(), j[2].get<std::size_t>()};
}

void to_json(nlohmann::json& j, const CoreLabels& l) {
  j = {{"porosity", l.porosity}, {"permeability_mD", l.permeability_md}};
}

void from_json(const nlohmann::json& j, CoreLabels& l) {
  l.porosity = j.at("porosity").get<double>();
  l.permeability_md = j.at("permeability_mD").get<double>();
}

void to_json(nlohmann::json& j, const SynthSpec& s) {
  j = {{"dims", s.dims},
       {"correlation_length", s.correlation_length},
       {"target_porosity", s.target_porosity},
       {"seed", s.seed},
       {"kozeny_constant", s.kozeny_constant}};
}

void from_json(const nlohmann::json& j, SynthSpec& s) {
  s.dims = j.at("dims").get<Dims>();
  s.correlation_length = j.value("correlation_length", s.correlation_length);
  s.target_porosity = j.value("target_porosity", s.target_porosity);
  s.seed = j.value("seed", s.seed);
  s.kozeny_constant = j.value("kozeny_constant", s.kozeny_constant);
}

void to_json(nlohmann::json& j, const VolumeMetadata& m) {
  j = {{"dims", m.dims}, {"kind", kind_name(m.kind)}, {"voxel_size", m.voxel_size}};
  if (m.labels) j["labels"] = *m.labels;
  if (m.generator) j["generator"] = *m.generator;
}

void from_json(const nlohmann::json& j, VolumeMetadata& m) {
  m.dims = j.at("dims").get<Dims>();
  const auto kind = j.value("kind", std::string("binary"));
  if (kind != "binary" && kind != "grayscale") fail(ErrorCode::InvalidSpec, "unknown volume kind '" + kind + "'");
  m.kind = kind == "binary" ? VolumeKind::binary : VolumeKind::grayscale;
  m.voxel_size = j.value("voxel_size", 1.0);
  if (j.contains("labels")) m.labels = j.at("labels").get<CoreLabels>();
  if (j.contains("generator")) m.generator = j.at("generator").get<SynthSpec>();
}

void save_volume(const std::filesystem::path& raw_path, const Volume3D& volume,
                 const std::optional<CoreLabels>& labels, const std::optional<SynthSpec>& generator) {
  write_raw_volume(raw_path, volume);
  const VolumeMetadata meta{volume.dims(), volume.kind(), volume.voxel_size(), labels, generator};
  std::ofstream out(sidecar_path(raw_path), std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + sidecar_path(raw_path).string());
  out << nlohmann::json(meta).dump(2) << '\n';
}

VolumeMetadata read_sidecar(const std::filesystem::path& json_path) {
  std::ifstream in(json_path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + json_path.string());
  try {
    return nlohmann::json::parse(in).get<VolumeMetadata>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidSpec, json_path.string() + ": " + e.what());
  }
}

LabeledVolume load_volume(const std::filesystem::path& raw_path, bool invert) {
  const auto meta = read_sidecar(sidecar_path(raw_path));
  const auto encoding = meta.kind == VolumeKind::binary ? RawEncoding::u8_binary : RawEncoding::u8_grayscale;
  auto volume = load_raw_volume(raw_path, meta.dims, encoding);
  if (invert) volume = volume.inverted();
  volume = Volume3D(volume.dims(), {volume.data().begin(), volume.data().end()}, volume.kind(), meta.voxel_size);
  return {std::move(volume), meta.labels};
}

}  // namespace poroperm
