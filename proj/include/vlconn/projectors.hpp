#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlconn/grad_check.hpp"
#include "vlconn/random.hpp"
#include "vlconn/tensor.hpp"

namespace vlc {

// Vision-encoder output: N = height*width region features of width D_v.
struct FeatureMap {
  Tensor features;  // [N, D_v]
  std::size_t height = 0;
  std::size_t width = 0;

  FeatureMap() = default;
  FeatureMap(Tensor features, std::size_t height, std::size_t width);

  std::size_t count() const { return height * width; }
  std::size_t channels() const { return features.size(1); }
};

struct VisualTokens {
  Tensor tokens;  // [M, D_t]
  std::size_t count() const { return tokens.size(0); }
};

enum class ProjectorKind { linear, mlp, resampler, c_abstractor, d_abstractor };
enum class ConvBlockKind { resnet, convnext, standard };

std::string to_string(ProjectorKind kind);
ProjectorKind projector_kind_from_string(const std::string& name);
std::string to_string(ConvBlockKind kind);
ConvBlockKind conv_block_from_string(const std::string& name);

struct ProjectorSpec {
  ProjectorKind kind = ProjectorKind::c_abstractor;
  std::size_t num_tokens = 144;     // M
  std::size_t vision_width = 32;    // D_v
  std::size_t text_width = 64;      // D_t
  std::size_t mlp_layers = 2;       // mlp only, 2..6
  // Blocks per stage (c_abstractor), deformable blocks (d_abstractor) or
  // cross-attention layers (resampler). 0 picks the kind's default: 3, 6, 6.
  std::size_t depth = 0;
  std::size_t heads = 2;            // resampler attention and d_abstractor self-attention
  std::size_t offsets = 4;          // K, d_abstractor sampling points per query
  std::size_t grid_height = 16;     // expected feature grid; sizes the resampler position table
  std::size_t grid_width = 16;
  bool pos_emb = false;             // resampler
  bool self_attn = false;           // d_abstractor
  bool pooled_queries = true;       // d_abstractor v-pooled-Q
  bool manual_ref_points = true;    // d_abstractor M-RP
  bool allow_upsample = false;      // c_abstractor / d_abstractor M > N
  ConvBlockKind conv_block = ConvBlockKind::resnet;
  std::uint64_t seed = 0;

  std::size_t resolved_depth() const;
  // Checks the construction-time invariants; throws std::invalid_argument.
  void validate() const;
};

void to_json(nlohmann::json& j, const ProjectorSpec& spec);
void from_json(const nlohmann::json& j, ProjectorSpec& spec);

// Attention mass over the feature grid, [layers, M, H, W].
struct AttentionTrace {
  std::size_t layers = 0, queries = 0, height = 0, width = 0;
  std::vector<double> mass;

  double& at(std::size_t l, std::size_t q, std::size_t i, std::size_t j) {
    return mass[((l * queries + q) * height + i) * width + j];
  }
  double at(std::size_t l, std::size_t q, std::size_t i, std::size_t j) const {
    return mass[((l * queries + q) * height + i) * width + j];
  }
  double slice_sum(std::size_t l, std::size_t q) const;
  Tensor as_tensor() const;
};

struct ProjectorOutput {
  VisualTokens tokens;
  std::optional<AttentionTrace> trace;  // resampler and d_abstractor only
};

// Affine map y = x W^T + b over rows.
struct Dense {
  Tensor weight;  // [out, in]
  Tensor bias;    // [out], may be undefined
  Tensor operator()(const Tensor& x) const;
};

// Layer norm over the last axis.
struct Norm {
  Tensor gain, bias;
  Tensor operator()(const Tensor& x) const;
};

struct ParameterGroup {
  std::string name;
  std::size_t count;
};

class Projector {
 public:
  explicit Projector(ProjectorSpec spec);
  virtual ~Projector() = default;
  Projector(const Projector&) = delete;
  Projector& operator=(const Projector&) = delete;

  const ProjectorSpec& spec() const { return spec_; }

  // Maps N features to M tokens. Throws std::invalid_argument when the feature
  // map is incompatible with the spec.
  virtual ProjectorOutput forward(const FeatureMap& fm, bool record_trace = false) const = 0;

  // Multiply-accumulate count of one forward pass, times two.
  virtual double forward_flops(std::size_t height, std::size_t width) const = 0;

  const std::vector<NamedTensor>& parameters() const { return params_; }
  Tensor parameter(const std::string& name) const;
  std::size_t parameter_count() const;
  // Counts aggregated by the leading name component ("blocks.0", "readout", ...).
  std::vector<ParameterGroup> parameter_report() const;
  void zero_grad();

 protected:
  Tensor add_parameter(const std::string& name, Shape shape, double init_bound);
  Tensor add_constant(const std::string& name, Shape shape, double value);
  Tensor add_parameter(const std::string& name, Shape shape, std::vector<double> values);
  // Weights uniform in +-1/sqrt(in), bias zero.
  Dense add_dense(const std::string& name, std::size_t in, std::size_t out, bool with_bias = true);
  Norm add_norm(const std::string& name, std::size_t dim);
  Rng& rng() { return rng_; }

  ProjectorSpec spec_;

 private:
  std::vector<NamedTensor> params_;
  Rng rng_;
};

std::unique_ptr<Projector> make_projector(const ProjectorSpec& spec);

// Named operations, one per family. Each checks the spec kind.
VisualTokens linear_project(const Projector& p, const FeatureMap& fm);
VisualTokens mlp_project(const Projector& p, const FeatureMap& fm);
std::pair<VisualTokens, AttentionTrace> resampler_project(const Projector& p, const FeatureMap& fm);
VisualTokens c_abstractor_project(const Projector& p, const FeatureMap& fm);
std::pair<VisualTokens, AttentionTrace> d_abstractor_project(const Projector& p, const FeatureMap& fm);

// M-RP reference points on the sqrt(M) x sqrt(M) cell-center grid, [M,2] (row, col).
std::vector<double> manual_reference_points(std::size_t num_tokens);

// Writes one binary PGM per (layer, query) plus an aggregate per layer, each
// min-max normalized. Returns the written paths.
std::vector<std::string> export_attention_trace(const AttentionTrace& trace, const std::string& directory);

// Flat binary checkpoint: magic, version, spec echo (JSON text), named tensors.
struct Checkpoint {
  std::string spec_echo;
  std::vector<NamedTensor> tensors;
};
void save_checkpoint(const std::string& path, const std::string& spec_echo, const std::vector<NamedTensor>& tensors);
Checkpoint load_checkpoint(const std::string& path);
// Copies checkpoint values into same-named, same-shaped targets. Throws on any
// missing name or shape mismatch.
void restore_parameters(const Checkpoint& ckpt, const std::vector<NamedTensor>& targets);

std::uint64_t parameter_checksum(const std::vector<NamedTensor>& params);

}  // namespace vlc
