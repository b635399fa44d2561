#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "internal.hpp"
#include "vlconn/ops.hpp"

namespace vlc::detail {

// Deformable-attention abstractor. Each block, per query:
//   offsets, logits = heads(norm(z));  A = softmax(logits)
//   z += sum_k A_k * sample(value(X), p + offset_k / sqrt(M))
//   z += ffn(norm(z))
// with reference points p fixed for the whole stack.
DAbstractor::DAbstractor(const ProjectorSpec& spec) : Projector(spec) {
  const std::size_t d = spec_.vision_width, m = spec_.num_tokens, k = spec_.offsets;
  if (spec_.pooled_queries) {
    query_proj_ = add_dense("query_proj", d, d);
  } else {
    queries_ = add_parameter("queries", {m, d}, 1.0 / std::sqrt(double(d)));
  }
  if (spec_.manual_ref_points) {
    ref_points_ = Tensor::from({m, 2}, manual_reference_points(m));
  } else {
    // sigmoid(0) = 0.5: every query starts at the map center.
    ref_proj_ = add_dense("ref_proj", d, 2);
    for (auto& v : ref_proj_.weight.mutable_data()) v *= 0.1;
  }
  for (std::size_t l = 0; l < spec_.resolved_depth(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    Block b;
    if (spec_.self_attn) {
      b.sa_norm = add_norm(p + "self_attn_norm", d);
      b.sa_q = add_dense(p + "self_attn.q", d, d);
      b.sa_k = add_dense(p + "self_attn.k", d, d, false);  // bias would be softmax-invariant
      b.sa_v = add_dense(p + "self_attn.v", d, d);
      b.sa_o = add_dense(p + "self_attn.o", d, d);
    }
    b.norm = add_norm(p + "norm", d);
    b.offsets = add_dense(p + "offsets", d, 2 * k);
    // Offset k starts pointing along angle 2*pi*k/K, half a reference cell out.
    auto bias = b.offsets.bias.mutable_data();
    for (std::size_t j = 0; j < k; ++j) {
      const double angle = 2.0 * std::numbers::pi * double(j) / double(k);
      bias[2 * j] = 0.5 * std::sin(angle);
      bias[2 * j + 1] = 0.5 * std::cos(angle);
    }
    b.weights = add_dense(p + "weights", d, k);
    b.value = add_dense(p + "value", d, d);
    b.ffn_norm = add_norm(p + "ffn_norm", d);
    b.up = add_dense(p + "ffn.up", d, 4 * d);
    b.down = add_dense(p + "ffn.down", 4 * d, d);
    blocks_.push_back(b);
  }
  readout_ = add_dense("readout", d, spec_.text_width);
}

ProjectorOutput DAbstractor::forward(const FeatureMap& fm, bool record_trace) const {
  require_width(fm, spec_.vision_width);
  const std::size_t m = spec_.num_tokens, k = spec_.offsets, d = spec_.vision_width;
  const std::size_t side = isqrt(m);
  const std::size_t h = fm.height, w = fm.width;

  Tensor z;
  if (spec_.pooled_queries) {
    if ((side > h || side > w) && !spec_.allow_upsample) {
      throw std::invalid_argument("d_abstractor: M=" + std::to_string(m) + " exceeds the " + std::to_string(h) + "x" +
                                  std::to_string(w) + " feature grid; set allow_upsample");
    }
    Tensor pooled = adaptive_avg_pool2d(to_grid(fm.features, h, w), side, side, spec_.allow_upsample);
    z = query_proj_(from_grid(pooled));
  } else {
    z = queries_;
  }
  const Tensor ref = spec_.manual_ref_points ? ref_points_ : sigmoid(ref_proj_(z));
  const double offset_scale = 1.0 / std::sqrt(double(m));

  AttentionTrace trace;
  if (record_trace) {
    trace = {blocks_.size(), m, h, w, {}};
    trace.mass.assign(blocks_.size() * m * h * w, 0.0);
  }

  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const Block& b = blocks_[l];
    if (spec_.self_attn) {
      Tensor zn = b.sa_norm(z);
      z = add(z, b.sa_o(multi_head_attention(b.sa_q(zn), b.sa_k(zn), b.sa_v(zn), spec_.heads).output));
    }
    Tensor zn = b.norm(z);
    Tensor offsets = scale(b.offsets(zn), offset_scale);
    Tensor attn = softmax(b.weights(zn), 1);
    Tensor values = reshape(transpose(b.value(fm.features)), {d, h, w});
    Tensor gathered;
    for (std::size_t j = 0; j < k; ++j) {
      Tensor pts = add(ref, slice_cols(offsets, 2 * j, 2));
      Tensor sampled = mul_rows(bilinear_sample(values, pts), slice_cols(attn, j, 1));
      gathered = gathered.defined() ? add(gathered, sampled) : sampled;
      if (record_trace) {
        for (std::size_t q = 0; q < m; ++q) {
          const auto taps = bilinear_taps(pts.data()[2 * q], pts.data()[2 * q + 1], h, w);
          const double a = attn.data()[q * k + j];
          for (int t = 0; t < 4; ++t) trace.mass[(l * m + q) * h * w + taps.index[t]] += a * taps.weight[t];
        }
      }
    }
    z = add(z, gathered);
    z = add(z, b.down(gelu(b.up(b.ffn_norm(z)))));
  }
  ProjectorOutput out{VisualTokens{readout_(z)}, std::nullopt};
  if (record_trace) out.trace = std::move(trace);
  return out;
}

double DAbstractor::forward_flops(std::size_t height, std::size_t width) const {
  const double n = double(height * width), m = double(spec_.num_tokens), d = double(spec_.vision_width);
  const double k = double(spec_.offsets);
  double f = 0.0;
  if (spec_.pooled_queries) f += double(std::max<std::size_t>(height * width, spec_.num_tokens)) * d + 2.0 * m * d * d;
  if (!spec_.manual_ref_points) f += 2.0 * m * d * 2.0;
  double per_block = 2.0 * n * d * d           // value projection
                     + 2.0 * m * d * 3.0 * k    // offset and weight heads
                     + 2.0 * m * k * 4.0 * d    // bilinear taps
                     + 2.0 * 2.0 * m * d * 4.0 * d;  // ffn
  if (spec_.self_attn) per_block += 2.0 * 4.0 * m * d * d + 2.0 * 2.0 * m * m * d;
  f += double(blocks_.size()) * per_block;
  f += 2.0 * m * d * double(spec_.text_width);
  return f;
}

}  // namespace vlc::detail
