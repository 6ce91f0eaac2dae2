#include <string>

#include "poroperm/binary_io.hpp"
#include "poroperm/model.hpp"

namespace poroperm {

namespace {
constexpr char kMagic[4] = {'G', 'E', 'O', 'C'};
}

std::vector<char> encode_checkpoint(const Checkpoint& ckpt) {
  nlohmann::json meta = {{"arch", ckpt.model.config()}, {"provenance", ckpt.provenance}};
  if (ckpt.model.target_norm()) meta["target_norm"] = *ckpt.model.target_norm();

  io::ByteWriter w;
  w.put_bytes({kMagic, 4});
  w.put(kCheckpointVersion);
  w.put_string(meta.dump());
  const auto& params = ckpt.model.parameters();
  w.put(static_cast<std::uint32_t>(params.size()));
  for (const auto& e : params) {
    w.put_string(e.name);
    w.put(static_cast<std::uint32_t>(e.tensor.rank()));
    for (auto extent : e.tensor.shape()) w.put(static_cast<std::uint64_t>(extent));
    w.put_array<float>(e.tensor.data());
  }
  return w.bytes();
}

Checkpoint decode_checkpoint(std::span<const char> bytes) {
  io::ByteReader r(bytes, ErrorCode::CorruptCheckpoint);
  if (r.get_bytes(4) != std::string(kMagic, 4)) fail(ErrorCode::BadMagic, "not a checkpoint file");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion)
    fail(ErrorCode::UnsupportedVersion, "checkpoint version " + std::to_string(version) + " is not supported");

  Checkpoint ckpt;
  ArchConfig arch;
  std::optional<TargetNorm> norm;
  try {
    const auto meta = nlohmann::json::parse(r.get_string());
    arch = meta.at("arch").get<ArchConfig>();
    ckpt.provenance = meta.value("provenance", nlohmann::json::object()).get<Provenance>();
    if (meta.contains("target_norm")) norm = meta.at("target_norm").get<TargetNorm>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::CorruptCheckpoint, std::string("bad config block: ") + e.what());
  }

  ParameterSet<float> params;
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    auto name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) fail(ErrorCode::CorruptCheckpoint, "implausible tensor rank");
    Shape shape(rank);
    for (auto& extent : shape) extent = static_cast<std::size_t>(r.get<std::uint64_t>());
    const auto n = shape_size(shape);
    if (n * sizeof(float) > r.remaining()) fail(ErrorCode::CorruptCheckpoint, "tensor data truncated");
    std::vector<float> data(n);
    r.get_array<float>(data);
    params.add(std::move(name), Tensor<float>(std::move(shape), std::move(data)));
  }
  if (r.remaining() != 0) fail(ErrorCode::CorruptCheckpoint, "trailing bytes after the last tensor");
  try {
    ckpt.model = Model(arch, std::move(params), norm);
  } catch (const Error& e) {
    fail(ErrorCode::CorruptCheckpoint, e.what());
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  io::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace poroperm
