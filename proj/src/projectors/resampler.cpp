#include <cmath>
#include <stdexcept>

#include "internal.hpp"
#include "vlconn/ops.hpp"

namespace vlc::detail {

// Perceiver-style resampler: M learned queries cross-attend to the projected
// features; each layer is [cross-attention, feed-forward] with pre-norm residuals.
Resampler::Resampler(const ProjectorSpec& spec) : Projector(spec) {
  const std::size_t d = spec_.vision_width;
  input_ = add_dense("input", d, d);
  queries_ = add_parameter("queries", {spec_.num_tokens, d}, 1.0 / std::sqrt(double(d)));
  if (spec_.pos_emb) pos_ = add_parameter("pos_emb", {spec_.grid_height * spec_.grid_width, d}, 0.1);
  for (std::size_t l = 0; l < spec_.resolved_depth(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b;
    b.attn_norm = add_norm(p + "attn_norm", d);
    b.q = add_dense(p + "attn.q", d, d);
    // A key bias shifts every score of a query equally; softmax cancels it.
    b.k = add_dense(p + "attn.k", d, d, false);
    b.v = add_dense(p + "attn.v", d, d);
    b.o = add_dense(p + "attn.o", d, d);
    b.ffn_norm = add_norm(p + "ffn_norm", d);
    b.up = add_dense(p + "ffn.up", d, 4 * d);
    b.down = add_dense(p + "ffn.down", 4 * d, d);
    blocks_.push_back(b);
  }
  readout_ = add_dense("readout", d, spec_.text_width);
}

ProjectorOutput Resampler::forward(const FeatureMap& fm, bool record_trace) const {
  require_width(fm, spec_.vision_width);
  Tensor kv = input_(fm.features);
  if (spec_.pos_emb) {
    if (fm.height != spec_.grid_height || fm.width != spec_.grid_width) {
      throw std::invalid_argument("resampler position table is sized for a " + std::to_string(spec_.grid_height) + "x" +
                                  std::to_string(spec_.grid_width) + " grid");
    }
    kv = add(kv, pos_);
  }
  AttentionTrace trace;
  if (record_trace) {
    trace = {blocks_.size(), spec_.num_tokens, fm.height, fm.width, {}};
    trace.mass.assign(blocks_.size() * spec_.num_tokens * fm.count(), 0.0);
  }
  Tensor z = queries_;
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    auto attn = multi_head_attention(b.q(b.attn_norm(z)), b.k(kv), b.v(kv), spec_.heads, false, record_trace);
    z = add(z, b.o(attn.output));
    z = add(z, b.down(gelu(b.up(b.ffn_norm(z)))));
    if (record_trace) {
      std::copy(attn.weights.begin(), attn.weights.end(), trace.mass.begin() + l * spec_.num_tokens * fm.count());
    }
  }
  ProjectorOutput out{VisualTokens{readout_(z)}, std::nullopt};
  if (record_trace) out.trace = std::move(trace);
  return out;
}

double Resampler::forward_flops(std::size_t height, std::size_t width) const {
  const double n = double(height * width), m = double(spec_.num_tokens), d = double(spec_.vision_width);
  double f = 2.0 * n * d * d;
  const double per_block = 2.0 * m * d * d         // q
                           + 2.0 * 2.0 * n * d * d  // k, v
                           + 2.0 * 2.0 * m * n * d  // scores, weighted sum
                           + 2.0 * m * d * d        // o
                           + 2.0 * 2.0 * m * d * 4.0 * d;  // ffn
  f += double(blocks_.size()) * per_block;
  f += 2.0 * m * d * double(spec_.text_width);
  return f;
}

}  // namespace vlc::detail
