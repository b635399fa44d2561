#pragma once

#include <cstddef>
#include <vector>

#include "vlconn/tensor.hpp"

namespace vlc {

// Elementwise. Operands must have identical shapes; no broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }

// Exact (erf) GELU.
Tensor gelu(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// 2-D products.
Tensor matmul(const Tensor& a, const Tensor& b);     // [n,k] x [k,m]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [n,k] x [m,k]^T
Tensor transpose(const Tensor& a);                   // [n,m] -> [m,n]

// y = x W^T + b with x [n,in], W [out,in], b [out] (b may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims);

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows);

// x [m,d] scaled row-wise by w [m,1].
Tensor mul_rows(const Tensor& x, const Tensor& w);
// x [b,c,h,w] scaled per channel by s [b,c].
Tensor scale_channels(const Tensor& x, const Tensor& s);

// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);
// Row-wise softmax of a square [t,t] score matrix restricted to columns <= row.
Tensor causal_softmax(const Tensor& x);

// Normalizes over the last axis. gain/bias have the size of that axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);

// Mean negative log-likelihood of `targets` under row-wise softmax of logits [t,v].
Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets);

// Cross-correlation. x [b,c,h,w], weight [c_out, c/groups, k, k], bias [c_out] optional.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
              std::size_t padding, std::size_t groups = 1);
inline Tensor conv2d(const Tensor& x, const Tensor& weight, std::size_t stride, std::size_t padding) {
  return conv2d(x, weight, Tensor{}, stride, padding, 1);
}

// Floor/ceil window averaging to [out_h, out_w]. An axis whose target exceeds
// its input extent is bilinearly interpolated (cell-center convention), which
// must be requested with allow_upsample.
Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w,
                           bool allow_upsample = false);

// Samples x [c,h,w] at normalized points pts [q,2] (row, col) in [0,1]^2.
// Coordinate u maps to pixel position u*extent - 0.5; positions clamp to the
// border. Returns [q,c].
Tensor bilinear_sample(const Tensor& x, const Tensor& pts);

struct BilinearTaps {
  std::size_t index[4];  // flat h*w indices
  double weight[4];
};
// The four neighbor indices and blend weights bilinear_sample uses for one point.
BilinearTaps bilinear_taps(double row, double col, std::size_t height, std::size_t width);

struct AttentionOutput {
  Tensor output;                 // [mq, d]
  std::vector<double> weights;   // [mq, n], averaged over heads
};

// Scaled dot-product attention with `heads` equal slices of the width.
// q [mq,d], k [n,d], v [n,d]. No projections are applied here.
AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     std::size_t heads, bool causal = false,
                                     bool keep_weights = false);

}  // namespace vlc
