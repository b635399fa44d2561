#pragma once

#include <algorithm>
#include <memory>
#include <string>

#include "vlconn/ops.hpp"
#include "vlconn/projectors.hpp"
#include "vlconn/random.hpp"

namespace fixtures {

inline vlc::FeatureMap random_features(std::size_t h, std::size_t w, std::size_t d, std::uint64_t seed) {
  vlc::Rng rng(seed);
  std::vector<double> v(h * w * d);
  for (auto& x : v) x = rng.uniform(-1.0, 1.0);
  return vlc::FeatureMap(vlc::Tensor::from({h * w, d}, std::move(v)), h, w);
}

inline void fill(vlc::Tensor t, double value) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), value);
}

// Square or rectangular identity on the leading min(out, in) diagonal.
inline void set_identity(vlc::Tensor w) {
  fill(w, 0.0);
  const std::size_t rows = w.size(0), cols = w.size(1);
  auto d = w.mutable_data();
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) d[i * cols + i] = 1.0;
}

// Perturbs every parameter so zero-initialized branches and unit norms carry
// signal; gains stay near one.
inline void randomize(vlc::Projector& p, std::uint64_t seed, double scale = 0.5) {
  vlc::Rng rng(seed);
  for (const auto& nt : p.parameters()) {
    const bool gain = nt.name.size() >= 5 && nt.name.compare(nt.name.size() - 5, 5, ".gain") == 0;
    for (auto& x : vlc::Tensor(nt.tensor).mutable_data()) {
      x = gain ? 1.0 + rng.uniform(-0.2, 0.2) : rng.uniform(-scale, scale);
    }
  }
}

// Fixed random-weighted sum: a scalar whose gradient reaches every output entry.
inline vlc::Tensor probe(const vlc::Tensor& out, std::uint64_t seed = 99) {
  vlc::Rng rng(seed);
  std::vector<double> w(out.numel());
  for (auto& x : w) x = rng.uniform(-1.0, 1.0);
  return vlc::sum(vlc::mul(out, vlc::Tensor::from(out.shape(), std::move(w))));
}

// D-Abstractor with zero offsets, identity value/query/readout maps and a
// silenced feed-forward: each block adds the feature at the reference point.
inline std::unique_ptr<vlc::Projector> zero_offset_d_abstractor(std::size_t m, std::size_t d, std::size_t depth,
                                                                std::size_t grid = 16) {
  vlc::ProjectorSpec spec;
  spec.kind = vlc::ProjectorKind::d_abstractor;
  spec.num_tokens = m;
  spec.vision_width = spec.text_width = d;
  spec.depth = depth;
  spec.grid_height = spec.grid_width = grid;
  auto p = vlc::make_projector(spec);
  set_identity(p->parameter("query_proj.weight"));
  set_identity(p->parameter("readout.weight"));
  for (std::size_t l = 0; l < depth; ++l) {
    const std::string pre = "blocks." + std::to_string(l) + ".";
    fill(p->parameter(pre + "offsets.weight"), 0.0);
    fill(p->parameter(pre + "offsets.bias"), 0.0);
    set_identity(p->parameter(pre + "value.weight"));
    fill(p->parameter(pre + "ffn.down.weight"), 0.0);
  }
  return p;
}

}  // namespace fixtures
