#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>

#include "internal.hpp"
#include "vlconn/ops.hpp"
#include "vlconn/projectors.hpp"

namespace vlc {

FeatureMap::FeatureMap(Tensor f, std::size_t h, std::size_t w) : features(std::move(f)), height(h), width(w) {
  if (features.rank() != 2) throw std::invalid_argument("feature map must be [N, D_v], got " + shape_str(features.shape()));
  if (h == 0 || w == 0 || features.size(0) != h * w) {
    throw std::invalid_argument("feature map has " + std::to_string(features.size(0)) + " features but grid " +
                                std::to_string(h) + "x" + std::to_string(w));
  }
}

std::string to_string(ProjectorKind kind) {
  switch (kind) {
    case ProjectorKind::linear: return "linear";
    case ProjectorKind::mlp: return "mlp";
    case ProjectorKind::resampler: return "resampler";
    case ProjectorKind::c_abstractor: return "c_abstractor";
    case ProjectorKind::d_abstractor: return "d_abstractor";
  }
  return "?";
}

ProjectorKind projector_kind_from_string(const std::string& name) {
  for (auto k : {ProjectorKind::linear, ProjectorKind::mlp, ProjectorKind::resampler, ProjectorKind::c_abstractor,
                 ProjectorKind::d_abstractor}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown projector kind '" + name + "'");
}

std::string to_string(ConvBlockKind kind) {
  switch (kind) {
    case ConvBlockKind::resnet: return "resnet";
    case ConvBlockKind::convnext: return "convnext";
    case ConvBlockKind::standard: return "standard";
  }
  return "?";
}

ConvBlockKind conv_block_from_string(const std::string& name) {
  for (auto k : {ConvBlockKind::resnet, ConvBlockKind::convnext, ConvBlockKind::standard}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown conv block '" + name + "'");
}

std::size_t ProjectorSpec::resolved_depth() const {
  if (depth) return depth;
  switch (kind) {
    case ProjectorKind::c_abstractor: return 3;
    case ProjectorKind::d_abstractor: return 6;
    case ProjectorKind::resampler: return 6;
    default: return 1;
  }
}

void ProjectorSpec::validate() const {
  if (num_tokens == 0) throw std::invalid_argument("projector needs M > 0");
  if (vision_width == 0 || text_width == 0) throw std::invalid_argument("projector widths must be positive");
  switch (kind) {
    case ProjectorKind::linear: break;
    case ProjectorKind::mlp:
      if (mlp_layers < 2 || mlp_layers > 6) {
        throw std::invalid_argument("mlp projector needs 2..6 layers, got " + std::to_string(mlp_layers));
      }
      break;
    case ProjectorKind::resampler:
      if (heads == 0 || vision_width % heads != 0) {
        throw std::invalid_argument("resampler head count " + std::to_string(heads) + " must divide width " +
                                    std::to_string(vision_width));
      }
      if (pos_emb && (grid_height == 0 || grid_width == 0)) throw std::invalid_argument("resampler pos_emb needs a grid");
      break;
    case ProjectorKind::c_abstractor:
      if (!detail::perfect_square(num_tokens)) {
        throw std::invalid_argument("c_abstractor needs a perfect-square M, got " + std::to_string(num_tokens));
      }
      break;
    case ProjectorKind::d_abstractor:
      if (!detail::perfect_square(num_tokens)) {
        throw std::invalid_argument("d_abstractor needs a perfect-square M, got " + std::to_string(num_tokens));
      }
      if (offsets == 0) throw std::invalid_argument("d_abstractor needs K >= 1 offsets");
      if (self_attn && (heads == 0 || vision_width % heads != 0)) {
        throw std::invalid_argument("d_abstractor self-attention heads must divide width");
      }
      break;
  }
}

void to_json(nlohmann::json& j, const ProjectorSpec& s) {
  j = nlohmann::json{{"kind", to_string(s.kind)},
                     {"num_tokens", s.num_tokens},
                     {"vision_width", s.vision_width},
                     {"text_width", s.text_width},
                     {"mlp_layers", s.mlp_layers},
                     {"depth", s.depth},
                     {"heads", s.heads},
                     {"offsets", s.offsets},
                     {"grid_height", s.grid_height},
                     {"grid_width", s.grid_width},
                     {"pos_emb", s.pos_emb},
                     {"self_attn", s.self_attn},
                     {"pooled_queries", s.pooled_queries},
                     {"manual_ref_points", s.manual_ref_points},
                     {"allow_upsample", s.allow_upsample},
                     {"conv_block", to_string(s.conv_block)},
                     {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, ProjectorSpec& s) {
  ProjectorSpec d;
  s.kind = projector_kind_from_string(j.value("kind", to_string(d.kind)));
  s.num_tokens = j.value("num_tokens", d.num_tokens);
  s.vision_width = j.value("vision_width", d.vision_width);
  s.text_width = j.value("text_width", d.text_width);
  s.mlp_layers = j.value("mlp_layers", d.mlp_layers);
  s.depth = j.value("depth", d.depth);
  s.heads = j.value("heads", d.heads);
  s.offsets = j.value("offsets", d.offsets);
  s.grid_height = j.value("grid_height", d.grid_height);
  s.grid_width = j.value("grid_width", d.grid_width);
  s.pos_emb = j.value("pos_emb", d.pos_emb);
  s.self_attn = j.value("self_attn", d.self_attn);
  s.pooled_queries = j.value("pooled_queries", d.pooled_queries);
  s.manual_ref_points = j.value("manual_ref_points", d.manual_ref_points);
  s.allow_upsample = j.value("allow_upsample", d.allow_upsample);
  s.conv_block = conv_block_from_string(j.value("conv_block", to_string(d.conv_block)));
  s.seed = j.value("seed", d.seed);
}

double AttentionTrace::slice_sum(std::size_t l, std::size_t q) const {
  double s = 0.0;
  for (std::size_t i = 0; i < height; ++i)
    for (std::size_t j = 0; j < width; ++j) s += at(l, q, i, j);
  return s;
}

Tensor AttentionTrace::as_tensor() const { return Tensor::from({layers, queries, height, width}, mass); }

Tensor Dense::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Tensor Norm::operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

Projector::Projector(ProjectorSpec spec) : spec_(std::move(spec)), rng_(spec_.seed ^ 0x5eedULL) { spec_.validate(); }

Tensor Projector::add_parameter(const std::string& name, Shape shape, double init_bound) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = init_bound == 0.0 ? 0.0 : rng_.uniform(-init_bound, init_bound);
  return add_parameter(name, std::move(shape), std::move(v));
}

Tensor Projector::add_constant(const std::string& name, Shape shape, double value) {
  return add_parameter(name, shape, std::vector<double>(shape_numel(shape), value));
}

Tensor Projector::add_parameter(const std::string& name, Shape shape, std::vector<double> values) {
  for (const auto& p : params_) {
    if (p.name == name) throw std::logic_error("duplicate parameter name " + name);
  }
  params_.push_back({name, Tensor::from(std::move(shape), std::move(values), true)});
  return params_.back().tensor;
}

Dense Projector::add_dense(const std::string& name, std::size_t in, std::size_t out, bool with_bias) {
  Dense d;
  d.weight = add_parameter(name + ".weight", {out, in}, 1.0 / std::sqrt(static_cast<double>(in)));
  if (with_bias) d.bias = add_constant(name + ".bias", {out}, 0.0);
  return d;
}

Norm Projector::add_norm(const std::string& name, std::size_t dim) {
  return Norm{add_constant(name + ".gain", {dim}, 1.0), add_constant(name + ".bias", {dim}, 0.0)};
}

Tensor Projector::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw std::out_of_range("no parameter named " + name);
}

std::size_t Projector::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::vector<ParameterGroup> Projector::parameter_report() const {
  std::vector<ParameterGroup> groups;
  for (const auto& p : params_) {
    // Group on everything before the last two dotted components of e.g. "blocks.0.ffn.up.weight".
    std::string key = p.name;
    const auto first = key.find('.');
    if (first != std::string::npos) {
      const auto second = key.find('.', first + 1);
      const bool indexed = second != std::string::npos && std::isdigit(static_cast<unsigned char>(key[first + 1]));
      key = key.substr(0, indexed ? second : first);
    }
    if (groups.empty() || groups.back().name != key) groups.push_back({key, 0});
    groups.back().count += p.tensor.numel();
  }
  return groups;
}

void Projector::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

std::unique_ptr<Projector> make_projector(const ProjectorSpec& spec) {
  switch (spec.kind) {
    case ProjectorKind::linear: return std::make_unique<detail::LinearProjector>(spec);
    case ProjectorKind::mlp: return std::make_unique<detail::MlpProjector>(spec);
    case ProjectorKind::resampler: return std::make_unique<detail::Resampler>(spec);
    case ProjectorKind::c_abstractor: return std::make_unique<detail::CAbstractor>(spec);
    case ProjectorKind::d_abstractor: return std::make_unique<detail::DAbstractor>(spec);
  }
  throw std::invalid_argument("unknown projector kind");
}

namespace {
void require_kind(const Projector& p, ProjectorKind kind) {
  if (p.spec().kind != kind) {
    throw std::invalid_argument("expected a " + to_string(kind) + " projector, got " + to_string(p.spec().kind));
  }
}
}  // namespace

VisualTokens linear_project(const Projector& p, const FeatureMap& fm) {
  require_kind(p, ProjectorKind::linear);
  return p.forward(fm).tokens;
}

VisualTokens mlp_project(const Projector& p, const FeatureMap& fm) {
  require_kind(p, ProjectorKind::mlp);
  return p.forward(fm).tokens;
}

std::pair<VisualTokens, AttentionTrace> resampler_project(const Projector& p, const FeatureMap& fm) {
  require_kind(p, ProjectorKind::resampler);
  auto out = p.forward(fm, true);
  return {out.tokens, std::move(*out.trace)};
}

VisualTokens c_abstractor_project(const Projector& p, const FeatureMap& fm) {
  require_kind(p, ProjectorKind::c_abstractor);
  return p.forward(fm).tokens;
}

std::pair<VisualTokens, AttentionTrace> d_abstractor_project(const Projector& p, const FeatureMap& fm) {
  require_kind(p, ProjectorKind::d_abstractor);
  auto out = p.forward(fm, true);
  return {out.tokens, std::move(*out.trace)};
}

std::vector<double> manual_reference_points(std::size_t num_tokens) {
  if (!detail::perfect_square(num_tokens)) {
    throw std::invalid_argument("reference grid needs a perfect-square M, got " + std::to_string(num_tokens));
  }
  const std::size_t side = detail::isqrt(num_tokens);
  std::vector<double> p;
  p.reserve(2 * num_tokens);
  for (std::size_t i = 0; i < side; ++i)
    for (std::size_t j = 0; j < side; ++j) {
      p.push_back((static_cast<double>(i) + 0.5) / static_cast<double>(side));
      p.push_back((static_cast<double>(j) + 0.5) / static_cast<double>(side));
    }
  return p;
}

namespace detail {

std::size_t isqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (r * r > n) --r;
  while ((r + 1) * (r + 1) <= n) ++r;
  return r;
}

bool perfect_square(std::size_t n) {
  const auto r = isqrt(n);
  return n > 0 && r * r == n;
}

Tensor to_grid(const Tensor& rows, std::size_t height, std::size_t width) {
  const std::size_t c = rows.size(1);
  return reshape(transpose(rows), {1, c, height, width});
}

Tensor from_grid(const Tensor& grid) {
  const std::size_t c = grid.size(1), hw = grid.size(2) * grid.size(3);
  return transpose(reshape(grid, {c, hw}));
}

Tensor layer_norm_channels(const Tensor& grid, const Norm& norm) {
  return permute(norm(permute(grid, {0, 2, 3, 1})), {0, 3, 1, 2});
}

}  // namespace detail

}  // namespace vlc
