#include "poroperm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "poroperm/binary_io.hpp"
#include "poroperm/random.hpp"

namespace poroperm {

namespace {

constexpr char kCacheMagic[4] = {'C', 'T', 'D', 'S'};
constexpr std::uint32_t kCacheVersion = 1;
constexpr std::uint8_t kSslRecord = 1;
constexpr std::uint8_t kSupervisedRecord = 2;

std::size_t cube(std::size_t edge) { return edge * edge * edge; }

template <typename Sample>
void split_pooled(std::vector<Sample> pooled, double fraction, std::uint64_t seed, std::vector<Sample>& train,
                  std::vector<Sample>& test) {
  if (!(fraction >= 0.0 && fraction <= 1.0)) fail(ErrorCode::InvalidSplit, "train fraction must lie in [0,1]");
  std::vector<std::size_t> order(pooled.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {stream::split}));
  rng.shuffle(order.begin(), order.end());
  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(pooled.size())));
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_train ? train : test).push_back(std::move(pooled[order[i]]));
}

struct CacheHeader {
  std::uint64_t count = 0;
  std::uint32_t edge = 0;
  std::uint8_t kind = 0;
};

void put_header(io::ByteWriter& w, std::uint64_t count, std::size_t edge, std::uint8_t kind) {
  w.put_bytes({kCacheMagic, 4});
  w.put(kCacheVersion);
  w.put(count);
  w.put(static_cast<std::uint32_t>(edge));
  w.put(kind);
}

CacheHeader get_header(io::ByteReader& r, std::uint8_t expected_kind) {
  if (r.get_bytes(4) != std::string(kCacheMagic, 4)) fail(ErrorCode::BadMagic, "not a dataset cache");
  if (r.get<std::uint32_t>() != kCacheVersion) fail(ErrorCode::UnsupportedVersion, "unknown dataset cache version");
  CacheHeader h;
  h.count = r.get<std::uint64_t>();
  h.edge = r.get<std::uint32_t>();
  h.kind = r.get<std::uint8_t>();
  if (h.kind != expected_kind) fail(ErrorCode::InvalidSpec, "dataset cache holds a different record kind");
  return h;
}

}  // namespace

std::string to_string(MaskMode m) { return m == MaskMode::voxel ? "voxel" : "patch"; }

MaskMode mask_mode_from_string(const std::string& s) {
  if (s == "voxel") return MaskMode::voxel;
  if (s == "patch") return MaskMode::patch;
  fail(ErrorCode::InvalidSpec, "unknown mask mode '" + s + "'");
}

std::size_t mask_quota(double rate, std::size_t voxels) {
  return static_cast<std::size_t>(std::llround(rate * static_cast<double>(voxels)));
}

SubCube extract_subcube(const Volume3D& volume, Origin o, std::size_t edge, std::uint32_t core_id) {
  const Dims& d = volume.dims();
  if (edge == 0 || edge > d.min_extent())
    fail(ErrorCode::EdgeTooLarge, "edge " + std::to_string(edge) + " exceeds the smallest volume extent");
  if (o.x + edge > d.nx || o.y + edge > d.ny || o.z + edge > d.nz)
    fail(ErrorCode::EdgeTooLarge, "sub-cube leaves the volume");
  SubCube sub{edge, std::vector<float>(cube(edge)), o, core_id};
  const auto data = volume.data();
  for (std::size_t z = 0; z < edge; ++z)
    for (std::size_t y = 0; y < edge; ++y) {
      const auto src = data.begin() + static_cast<std::ptrdiff_t>(volume.index(o.x, o.y + y, o.z + z));
      std::copy_n(src, edge, sub.values.begin() + static_cast<std::ptrdiff_t>(edge * (y + edge * z)));
    }
  return sub;
}

std::vector<SubCube> sample_subcubes(const Volume3D& volume, std::size_t count, std::size_t edge, std::uint64_t seed,
                                     std::uint32_t core_id) {
  const Dims& d = volume.dims();
  if (edge == 0 || edge > d.min_extent())
    fail(ErrorCode::EdgeTooLarge, "edge " + std::to_string(edge) + " exceeds the smallest volume extent");
  Rng rng(seed);
  std::vector<SubCube> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Origin o;
    o.x = rng.below(d.nx - edge + 1);
    o.y = rng.below(d.ny - edge + 1);
    o.z = rng.below(d.nz - edge + 1);
    out.push_back(extract_subcube(volume, o, edge, core_id));
  }
  return out;
}

MaskedSample apply_mask(const SubCube& sub, const MaskSpec& spec) {
  if (!(spec.rate >= 0.0 && spec.rate <= 1.0)) fail(ErrorCode::InvalidSpec, "mask rate must lie in [0,1]");
  if (!(spec.mask_value >= 0.0f && spec.mask_value <= 1.0f)) fail(ErrorCode::InvalidSpec, "mask value must lie in [0,1]");
  const std::size_t n = sub.values.size();
  const std::size_t quota = mask_quota(spec.rate, n);
  Rng rng(spec.seed);

  MaskedSample out{sub.edge, sub.values, sub.values, {}, sub.core_id};
  out.mask.reserve(quota);
  if (spec.mode == MaskMode::voxel) {
    // partial Fisher-Yates
    std::vector<std::uint32_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::uint32_t{0});
    for (std::size_t i = 0; i < quota; ++i) {
      const std::size_t j = i + rng.below(n - i);
      std::swap(idx[i], idx[j]);
    }
    out.mask.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(quota));
  } else {
    // Random rectangles on random z-slices until the quota is met; the last
    // rectangle is cut short.
    const std::size_t e = sub.edge;
    std::vector<bool> taken(n, false);
    std::size_t filled = 0;
    while (filled < quota) {
      const std::size_t z = rng.below(e);
      const std::size_t w = 1 + rng.below(e);
      const std::size_t h = 1 + rng.below(e);
      const std::size_t x0 = rng.below(e - w + 1);
      const std::size_t y0 = rng.below(e - h + 1);
      for (std::size_t y = y0; y < y0 + h && filled < quota; ++y)
        for (std::size_t x = x0; x < x0 + w && filled < quota; ++x) {
          const std::size_t i = x + e * (y + e * z);
          if (taken[i]) continue;
          taken[i] = true;
          out.mask.push_back(static_cast<std::uint32_t>(i));
          ++filled;
        }
    }
  }
  std::sort(out.mask.begin(), out.mask.end());
  for (auto i : out.mask) out.input[i] = spec.mask_value;
  return out;
}

SslDataset build_ssl_dataset(std::span<const Volume3D> volumes, std::size_t per_volume, const MaskSpec& spec,
                             double train_fraction, std::uint64_t seed, std::size_t edge) {
  if (volumes.empty()) fail(ErrorCode::EmptyInput, "no volumes given");
  if (per_volume == 0) fail(ErrorCode::EmptyInput, "per-volume sample count must be at least 1");
  std::vector<MaskedSample> pooled;
  pooled.reserve(volumes.size() * per_volume);
  for (std::size_t v = 0; v < volumes.size(); ++v) {
    const auto subs = sample_subcubes(volumes[v], per_volume, edge, derive_seed(seed, {stream::sample, v}),
                                      static_cast<std::uint32_t>(v));
    for (std::size_t i = 0; i < subs.size(); ++i) {
      MaskSpec s = spec;
      s.seed = derive_seed(seed, {stream::mask, v, i});
      pooled.push_back(apply_mask(subs[i], s));
    }
  }
  SslDataset ds;
  split_pooled(std::move(pooled), train_fraction, seed, ds.train, ds.test);
  return ds;
}

SupervisedSplit SupervisedSplit::parse(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) fail(ErrorCode::InvalidSplit, "split must be first:K or random:F, got '" + text + "'");
  const auto kind = text.substr(0, colon);
  const auto arg = text.substr(colon + 1);
  try {
    std::size_t used = 0;
    if (kind == "first") {
      const auto k = std::stoul(arg, &used);
      if (used == arg.size()) return first(k);
    } else if (kind == "random") {
      const double f = std::stod(arg, &used);
      if (used == arg.size()) return random(f);
    }
  } catch (const std::exception&) {
  }
  fail(ErrorCode::InvalidSplit, "split must be first:K or random:F, got '" + text + "'");
}

std::string SupervisedSplit::to_string() const {
  if (kind == Kind::first_k) return "first:" + std::to_string(k);
  std::string f = std::to_string(fraction);
  while (f.size() > 1 && f.back() == '0') f.pop_back();
  if (f.back() == '.') f.pop_back();
  return "random:" + f;
}

SupervisedDataset build_supervised_dataset(std::span<const LabeledVolume> cores, std::size_t per_core,
                                           const SupervisedSplit& split, std::uint64_t seed, std::size_t edge) {
  if (cores.empty()) fail(ErrorCode::EmptyInput, "no cores given");
  if (per_core == 0) fail(ErrorCode::EmptyInput, "per-core sample count must be at least 1");
  for (std::size_t c = 0; c < cores.size(); ++c)
    if (!cores[c].labels) fail(ErrorCode::MissingLabels, "core " + std::to_string(c) + " has no labels");
  if (split.kind == SupervisedSplit::Kind::first_k && (split.k == 0 || split.k >= cores.size()))
    fail(ErrorCode::InvalidSplit, "first:" + std::to_string(split.k) + " needs at least one core on each side of " +
                                      std::to_string(cores.size()));

  std::vector<SupervisedSample> pooled;
  pooled.reserve(cores.size() * per_core);
  for (std::size_t c = 0; c < cores.size(); ++c) {
    const CoreLabels& l = *cores[c].labels;
    if (!std::isfinite(l.porosity) || !std::isfinite(l.permeability_md) || l.porosity < 0.0 || l.porosity > 1.0)
      fail(ErrorCode::MissingLabels, "core " + std::to_string(c) + " has invalid labels");
    for (auto& sub : sample_subcubes(cores[c].volume, per_core, edge, derive_seed(seed, {stream::sample, c}),
                                     static_cast<std::uint32_t>(c)))
      pooled.push_back({edge, std::move(sub.values), {l.porosity, l.permeability_md}, static_cast<std::uint32_t>(c)});
  }

  SupervisedDataset ds;
  if (split.kind == SupervisedSplit::Kind::first_k) {
    for (auto& s : pooled) (s.core_id < split.k ? ds.train : ds.test).push_back(std::move(s));
  } else {
    split_pooled(std::move(pooled), split.fraction, seed, ds.train, ds.test);
  }
  return ds;
}

void write_dataset_cache(const std::filesystem::path& path, std::span<const MaskedSample> samples, float mask_value) {
  const std::size_t edge = samples.empty() ? kDefaultEdge : samples.front().edge;
  const std::size_t quota = samples.empty() ? 0 : samples.front().mask.size();
  io::ByteWriter w;
  put_header(w, samples.size(), edge, kSslRecord);
  w.put(static_cast<std::uint32_t>(quota));
  w.put(mask_value);
  for (const auto& s : samples) {
    if (s.edge != edge || s.mask.size() != quota)
      fail(ErrorCode::InvalidSpec, "dataset cache records must share edge and mask count");
    w.put_array<float>(s.target);
    w.put_array<std::uint32_t>(s.mask);
    w.put(s.core_id);
  }
  io::write_file(path, w.bytes());
}

void write_dataset_cache(const std::filesystem::path& path, std::span<const SupervisedSample> samples) {
  const std::size_t edge = samples.empty() ? kDefaultEdge : samples.front().edge;
  io::ByteWriter w;
  put_header(w, samples.size(), edge, kSupervisedRecord);
  for (const auto& s : samples) {
    if (s.edge != edge) fail(ErrorCode::InvalidSpec, "dataset cache records must share an edge");
    w.put_array<float>(s.input);
    w.put(static_cast<float>(s.target[0]));
    w.put(static_cast<float>(s.target[1]));
    w.put(s.core_id);
  }
  io::write_file(path, w.bytes());
}

std::vector<MaskedSample> read_ssl_cache(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, ErrorCode::IoError);
  const auto h = get_header(r, kSslRecord);
  const auto quota = r.get<std::uint32_t>();
  const auto mask_value = r.get<float>();
  const std::size_t n = cube(h.edge);
  std::vector<MaskedSample> out(h.count);
  for (auto& s : out) {
    s.edge = h.edge;
    s.target.resize(n);
    s.mask.resize(quota);
    r.get_array<float>(s.target);
    r.get_array<std::uint32_t>(s.mask);
    s.core_id = r.get<std::uint32_t>();
    s.input = s.target;
    for (auto i : s.mask) {
      if (i >= n) fail(ErrorCode::IoError, "mask index out of range in dataset cache");
      s.input[i] = mask_value;
    }
  }
  return out;
}

std::vector<SupervisedSample> read_supervised_cache(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  io::ByteReader r(bytes, ErrorCode::IoError);
  const auto h = get_header(r, kSupervisedRecord);
  std::vector<SupervisedSample> out(h.count);
  for (auto& s : out) {
    s.edge = h.edge;
    s.input.resize(cube(h.edge));
    r.get_array<float>(s.input);
    s.target[0] = r.get<float>();
    s.target[1] = r.get<float>();
    s.core_id = r.get<std::uint32_t>();
  }
  return out;
}

}  // namespace poroperm
