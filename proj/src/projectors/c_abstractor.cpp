#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "internal.hpp"
#include "vlconn/ops.hpp"

namespace vlc::detail {

Tensor ConvBlock::forward(const Tensor& x) const {
  switch (kind) {
    case ConvBlockKind::resnet: {
      Tensor h = silu(layer_norm_channels(conv2d(x, conv_a, 1, 0), norm_a));
      h = silu(layer_norm_channels(conv2d(h, conv_b, 1, 1), norm_b));
      // squeeze-excitation over the bottleneck channels
      Tensor squeezed = reshape(adaptive_avg_pool2d(h, 1, 1), {1, mid});
      Tensor gate = sigmoid(se_expand(silu(se_reduce(squeezed))));
      h = scale_channels(h, gate);
      return add(x, conv2d(h, conv_c, 1, 0));
    }
    case ConvBlockKind::convnext: {
      Tensor h = conv2d(x, conv_a, conv_a_bias, 1, 3, width);
      h = layer_norm_channels(h, norm_a);
      const std::size_t hh = x.size(2), ww = x.size(3);
      Tensor rows = pw_down(gelu(pw_up(from_grid(h))));
      return add(x, to_grid(rows, hh, ww));
    }
    case ConvBlockKind::standard:
      return silu(layer_norm_channels(conv2d(x, conv_a, conv_a_bias, 1, 1), norm_a));
  }
  throw std::logic_error("unhandled conv block");
}

double ConvBlock::flops(std::size_t h, std::size_t w) const {
  const double hw = double(h * w), c = double(width), m = double(mid);
  switch (kind) {
    case ConvBlockKind::resnet:
      return 2.0 * hw * (c * m + 9.0 * m * m + m * c) + 2.0 * 2.0 * m * double(se);
    case ConvBlockKind::convnext:
      return 2.0 * hw * (49.0 * c + 2.0 * 4.0 * c * c);
    case ConvBlockKind::standard:
      return 2.0 * hw * 9.0 * c * c;
  }
  return 0.0;
}

ConvBlock CAbstractor::make_block(const std::string& p) {
  ConvBlock b;
  b.kind = spec_.conv_block;
  b.width = spec_.vision_width;
  const std::size_t c = b.width;
  switch (b.kind) {
    case ConvBlockKind::resnet:
      // bottleneck expansion 4, squeeze-excitation reduction 16
      b.mid = std::max<std::size_t>(1, c / 4);
      b.se = std::max<std::size_t>(1, c / 16);
      b.conv_a = add_parameter(p + "conv_a.weight", {b.mid, c, 1, 1}, 1.0 / std::sqrt(double(c)));
      b.norm_a = add_norm(p + "norm_a", b.mid);
      b.conv_b = add_parameter(p + "conv_b.weight", {b.mid, b.mid, 3, 3}, 1.0 / std::sqrt(9.0 * double(b.mid)));
      b.norm_b = add_norm(p + "norm_b", b.mid);
      b.se_reduce = add_dense(p + "se.reduce", b.mid, b.se);
      b.se_expand = add_dense(p + "se.expand", b.se, b.mid);
      b.conv_c = add_parameter(p + "conv_c.weight", {c, b.mid, 1, 1}, 0.0);
      break;
    case ConvBlockKind::convnext:
      b.mid = 4 * c;
      b.conv_a = add_parameter(p + "dwconv.weight", {c, 1, 7, 7}, 1.0 / 7.0);
      b.conv_a_bias = add_constant(p + "dwconv.bias", {c}, 0.0);
      b.norm_a = add_norm(p + "norm", c);
      b.pw_up = add_dense(p + "pw.up", c, 4 * c);
      b.pw_down = add_dense(p + "pw.down", 4 * c, c);
      for (auto& v : b.pw_down.weight.mutable_data()) v = 0.0;
      break;
    case ConvBlockKind::standard:
      b.mid = c;
      b.conv_a = add_parameter(p + "conv.weight", {c, c, 3, 3}, 1.0 / std::sqrt(9.0 * double(c)));
      b.conv_a_bias = add_constant(p + "conv.bias", {c}, 0.0);
      b.norm_a = add_norm(p + "norm", c);
      break;
  }
  return b;
}

CAbstractor::CAbstractor(const ProjectorSpec& spec) : Projector(spec) {
  const std::size_t depth = spec_.resolved_depth();
  for (std::size_t l = 0; l < depth; ++l) stage1_.push_back(make_block("stage1." + std::to_string(l) + "."));
  for (std::size_t l = 0; l < depth; ++l) stage2_.push_back(make_block("stage2." + std::to_string(l) + "."));
  readout_ = add_dense("readout", spec_.vision_width, spec_.text_width);
}

ProjectorOutput CAbstractor::forward(const FeatureMap& fm, bool) const {
  require_width(fm, spec_.vision_width);
  const std::size_t side = isqrt(spec_.num_tokens);
  if ((side > fm.height || side > fm.width) && !spec_.allow_upsample) {
    throw std::invalid_argument("c_abstractor: M=" + std::to_string(spec_.num_tokens) + " exceeds the " +
                                std::to_string(fm.height) + "x" + std::to_string(fm.width) +
                                " feature grid; set allow_upsample");
  }
  Tensor x = to_grid(fm.features, fm.height, fm.width);
  for (const auto& b : stage1_) x = b.forward(x);
  x = adaptive_avg_pool2d(x, side, side, spec_.allow_upsample);
  for (const auto& b : stage2_) x = b.forward(x);
  return {VisualTokens{readout_(from_grid(x))}, std::nullopt};
}

double CAbstractor::forward_flops(std::size_t height, std::size_t width) const {
  const std::size_t side = isqrt(spec_.num_tokens);
  double f = 0.0;
  for (const auto& b : stage1_) f += b.flops(height, width);
  f += double(std::max(height * width, spec_.num_tokens)) * double(spec_.vision_width);  // pooling
  for (const auto& b : stage2_) f += b.flops(side, side);
  f += 2.0 * double(spec_.num_tokens) * double(spec_.vision_width) * double(spec_.text_width);
  return f;
}

}  // namespace vlc::detail
