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

#include "poroperm/graph.hpp"
#include "poroperm/ops.hpp"
#include "poroperm/parameters.hpp"

namespace poroperm {

enum class HeadKind { ssl_restore, regress2 };

std::string to_string(HeadKind h);
HeadKind head_from_string(const std::string& s);

/// Architecture of the CNN → attention → MLP model.
///
/// The cube is read as `edge` channels (z-slices) of edge×edge images. Each
/// conv layer keeps the spatial extent; after the last one every feature map
/// becomes one token of width edge², so the attention stack sees
/// `feature_maps.back()` tokens. The flattened tokens feed the hidden fc
/// layers and finally the head, which is the last fully connected layer.
struct ArchConfig {
  std::size_t edge = 10;
  /// One entry per conv layer.
  std::vector<std::size_t> feature_maps{10, 10};
  std::size_t kernel = 3;
  std::size_t attn_layers = 1;
  std::size_t heads = 10;
  /// Hidden fully connected widths; the head is not listed here.
  std::vector<std::size_t> fc_widths{64};
  Activation activation = Activation::relu;
  /// Post-norm after each residual attention sublayer.
  bool use_layernorm = true;
  bool use_positional_embedding = true;
  HeadKind head = HeadKind::ssl_restore;
  /// Edge of the restored cube; 0 means `edge`. Smaller values restore a
  /// block-averaged cube (e.g. 5 gives the 125-unit variant).
  std::size_t restore_edge = 0;

  std::size_t conv_layers() const noexcept { return feature_maps.size(); }
  std::size_t fc_layers() const noexcept { return fc_widths.size() + 1; }
  std::size_t layer_count() const noexcept { return conv_layers() + attn_layers + fc_layers(); }
  std::size_t token_count() const { return feature_maps.back(); }
  std::size_t token_dim() const noexcept { return edge * edge; }
  std::size_t effective_restore_edge() const noexcept { return restore_edge == 0 ? edge : restore_edge; }
  /// Width of the representation the head reads.
  std::size_t trunk_width() const;
  std::size_t head_outputs() const;

  /// Throws InvalidConfig (HeadsDontDivide-style conditions included).
  void validate() const;

  bool operator==(const ArchConfig&) const = default;
};

void to_json(nlohmann::json& j, const ArchConfig& c);
void from_json(const nlohmann::json& j, ArchConfig& c);

/// Per-target standardization stats for the regression head, in original
/// units: index 0 porosity, index 1 permeability.
struct TargetNorm {
  std::array<double, 2> mean{0.0, 0.0};
  std::array<double, 2> stddev{1.0, 1.0};
  bool operator==(const TargetNorm&) const = default;
};

void to_json(nlohmann::json& j, const TargetNorm& n);
void from_json(const nlohmann::json& j, TargetNorm& n);

/// Parameters named "head.*" form the head; everything else is the trunk.
bool is_head_parameter(const std::string& name);

/// Freshly initialized parameters for `config`: fan-in scaled uniform weights,
/// zero biases, unit layer-norm gains.
template <typename T>
ParameterSet<T> init_parameters(const ArchConfig& config, std::uint64_t seed);

/// Head parameters only, drawn from `seed`.
template <typename T>
ParameterSet<T> init_head(const ArchConfig& config, std::uint64_t seed);

/// Intermediate activations captured during a forward pass.
template <typename T>
struct ForwardTrace {
  Tensor<T> tokens;          // tokens after positional embedding, before attention
  Tensor<T> attention_out;   // output of the attention stack
  Tensor<T> trunk;           // input to the head
  std::vector<AttentionProbe<T>> attention;
};

struct ForwardOptions {
  /// Row permutation applied to the tokens right after tokenization.
  std::span<const std::size_t> token_permutation;
};

/// Records the full forward pass on `g` and returns the head output: the
/// sigmoid restoration for ssl_restore, standardized targets for regress2.
/// Gradients flow into `grads` when it is non-null.
template <typename T>
Var build_forward(Graph<T>& g, const ArchConfig& config, const ParameterSet<T>& params, ParameterSet<T>* grads,
                  std::span<const T> input, const ForwardOptions& options = {}, ForwardTrace<T>* trace = nullptr);

/// What the restoration head is scored against.
template <typename T>
struct RestorationTarget {
  Tensor<T> values;
  std::vector<std::uint32_t> mask;
};

/// Identity when the restore edge equals the cube edge; otherwise block
/// averages, with a pooled cell masked when it contains any masked voxel.
template <typename T>
RestorationTarget<T> make_restoration_target(const ArchConfig& config, std::span<const float> target,
                                             std::span<const std::uint32_t> mask);

/// Inference-side model: single-precision parameters plus target stats.
class Model {
 public:
  Model() = default;
  Model(ArchConfig config, ParameterSet<float> params, std::optional<TargetNorm> norm = std::nullopt);

  static Model build(const ArchConfig& config, std::uint64_t seed);

  const ArchConfig& config() const noexcept { return config_; }
  const ParameterSet<float>& parameters() const noexcept { return params_; }
  ParameterSet<float>& parameters() noexcept { return params_; }
  const std::optional<TargetNorm>& target_norm() const noexcept { return norm_; }
  void set_target_norm(std::optional<TargetNorm> norm) { norm_ = norm; }

  std::size_t parameter_count() const { return params_.element_count(); }

  /// edge³ restoration values in (0,1) (restore_edge³ for pooled variants).
  std::vector<float> forward_ssl(std::span<const float> masked_input) const;

  /// (porosity, permeability) in original units.
  std::array<double, 2> forward_supervised(std::span<const float> input) const;

  /// Standardized regression output before de-standardization.
  std::array<double, 2> forward_standardized(std::span<const float> input) const;

  /// Activations the head reads (exposed for shared-trunk checks).
  std::vector<float> trunk_activations(std::span<const float> input) const;

  ForwardTrace<float> trace(std::span<const float> input, const ForwardOptions& options = {}) const;

  bool operator==(const Model&) const = default;

 private:
  ArchConfig config_;
  ParameterSet<float> params_;
  std::optional<TargetNorm> norm_;
};

struct Provenance {
  std::uint64_t seed = 0;
  std::uint64_t epochs = 0;
  double lr = 0.0;
  std::string optimizer = "adam";
  std::string stage = "init";
  bool operator==(const Provenance&) const = default;
};

void to_json(nlohmann::json& j, const Provenance& p);
void from_json(const nlohmann::json& j, Provenance& p);

struct Checkpoint {
  Model model;
  Provenance provenance;
  bool operator==(const Checkpoint&) const = default;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const char> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Supervised model whose trunk is copied bit-exactly from an SSL checkpoint
/// and whose 2-output head is freshly drawn from `head_seed`.
Model transfer_weights(const Checkpoint& pretrained, std::uint64_t head_seed);

}  // namespace poroperm
