#pragma once

#include <vector>

#include "vlconn/projectors.hpp"

namespace vlc::detail {

std::size_t isqrt(std::size_t n);
bool perfect_square(std::size_t n);

// [N,C] rows <-> [1,C,H,W] grid.
Tensor to_grid(const Tensor& rows, std::size_t height, std::size_t width);
Tensor from_grid(const Tensor& grid);
// Layer norm across the channel axis of a [1,C,H,W] grid.
Tensor layer_norm_channels(const Tensor& grid, const Norm& norm);

void require_width(const FeatureMap& fm, std::size_t expected);

class LinearProjector final : public Projector {
 public:
  explicit LinearProjector(const ProjectorSpec& spec);
  ProjectorOutput forward(const FeatureMap& fm, bool record_trace) const override;
  double forward_flops(std::size_t height, std::size_t width) const override;

 private:
  Dense proj_;
};

class MlpProjector final : public Projector {
 public:
  explicit MlpProjector(const ProjectorSpec& spec);
  ProjectorOutput forward(const FeatureMap& fm, bool record_trace) const override;
  double forward_flops(std::size_t height, std::size_t width) const override;

 private:
  std::vector<Dense> layers_;
};

class Resampler final : public Projector {
 public:
  explicit Resampler(const ProjectorSpec& spec);
  ProjectorOutput forward(const FeatureMap& fm, bool record_trace) const override;
  double forward_flops(std::size_t height, std::size_t width) const override;

 private:
  struct Block {
    Norm attn_norm;
    Dense q, k, v, o;
    Norm ffn_norm;
    Dense up, down;
  };
  Dense input_;
  Tensor queries_;
  Tensor pos_;
  std::vector<Block> blocks_;
  Dense readout_;
};

// One residual stage element of the C-Abstractor.
struct ConvBlock {
  ConvBlockKind kind;
  // resnet: conv_a 1x1 reduce, conv_b 3x3, se_*, conv_c 1x1 expand (zero-init).
  // convnext: conv_a depthwise 7x7, norm_a, pw_up/pw_down pointwise (down zero-init).
  // standard: conv_a 3x3, norm_a.
  Tensor conv_a, conv_a_bias, conv_b, conv_c;
  Norm norm_a, norm_b;
  Dense se_reduce, se_expand, pw_up, pw_down;
  std::size_t width = 0, mid = 0, se = 0;

  Tensor forward(const Tensor& grid) const;
  double flops(std::size_t height, std::size_t width) const;
};

class CAbstractor final : public Projector {
 public:
  explicit CAbstractor(const ProjectorSpec& spec);
  ProjectorOutput forward(const FeatureMap& fm, bool record_trace) const override;
  double forward_flops(std::size_t height, std::size_t width) const override;

 private:
  ConvBlock make_block(const std::string& name);
  std::vector<ConvBlock> stage1_, stage2_;
  Dense readout_;
};

class DAbstractor final : public Projector {
 public:
  explicit DAbstractor(const ProjectorSpec& spec);
  ProjectorOutput forward(const FeatureMap& fm, bool record_trace) const override;
  double forward_flops(std::size_t height, std::size_t width) const override;

 private:
  struct Block {
    Norm sa_norm;
    Dense sa_q, sa_k, sa_v, sa_o;
    Norm norm;
    Dense offsets, weights, value;
    Norm ffn_norm;
    Dense up, down;
  };
  Dense query_proj_;
  Tensor queries_;
  Dense ref_proj_;
  Tensor ref_points_;
  std::vector<Block> blocks_;
  Dense readout_;
};

}  // namespace vlc::detail
