#include <stdexcept>

#include "internal.hpp"
#include "vlconn/ops.hpp"

namespace vlc::detail {

void require_width(const FeatureMap& fm, std::size_t expected) {
  if (fm.channels() != expected) {
    throw std::invalid_argument("feature width " + std::to_string(fm.channels()) + " does not match projector D_v " +
                                std::to_string(expected));
  }
}

namespace {
void require_one_to_one(const ProjectorSpec& spec, const FeatureMap& fm) {
  if (spec.num_tokens != fm.count()) {
    throw std::invalid_argument("linear projector is inflexible: requested M=" + std::to_string(spec.num_tokens) +
                                " but the feature map has N=" + std::to_string(fm.count()));
  }
}
}  // namespace

LinearProjector::LinearProjector(const ProjectorSpec& spec) : Projector(spec) {
  proj_ = add_dense("proj", spec_.vision_width, spec_.text_width);
}

ProjectorOutput LinearProjector::forward(const FeatureMap& fm, bool) const {
  require_one_to_one(spec_, fm);
  require_width(fm, spec_.vision_width);
  return {VisualTokens{proj_(fm.features)}, std::nullopt};
}

double LinearProjector::forward_flops(std::size_t height, std::size_t width) const {
  return 2.0 * double(height * width) * double(spec_.vision_width) * double(spec_.text_width);
}

MlpProjector::MlpProjector(const ProjectorSpec& spec) : Projector(spec) {
  std::size_t in = spec_.vision_width;
  for (std::size_t i = 0; i < spec_.mlp_layers; ++i) {
    layers_.push_back(add_dense("layers." + std::to_string(i), in, spec_.text_width));
    in = spec_.text_width;
  }
}

ProjectorOutput MlpProjector::forward(const FeatureMap& fm, bool) const {
  require_one_to_one(spec_, fm);
  require_width(fm, spec_.vision_width);
  Tensor x = fm.features;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i](x);
    if (i + 1 < layers_.size()) x = gelu(x);
  }
  return {VisualTokens{x}, std::nullopt};
}

double MlpProjector::forward_flops(std::size_t height, std::size_t width) const {
  const double n = double(height * width);
  double f = 2.0 * n * double(spec_.vision_width) * double(spec_.text_width);
  f += double(spec_.mlp_layers - 1) * 2.0 * n * double(spec_.text_width) * double(spec_.text_width);
  return f;
}

}  // namespace vlc::detail
