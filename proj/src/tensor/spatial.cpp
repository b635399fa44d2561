#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "vlconn/ops.hpp"

namespace vlc {

namespace {

using detail::Node;

const char* axis_name(std::size_t axis) {
  static const char* names[] = {"batch", "channel", "height", "width"};
  return axis < 4 ? names[axis] : "?";
}

// Dense per-axis resampling matrix [out, in]: floor/ceil window means when
// shrinking (or equal), cell-center bilinear weights when growing.
std::vector<double> axis_resampler(std::size_t in, std::size_t out) {
  std::vector<double> r(out * in, 0.0);
  if (out <= in) {
    for (std::size_t i = 0; i < out; ++i) {
      const std::size_t start = (i * in) / out;
      const std::size_t end = ((i + 1) * in + out - 1) / out;
      const double w = 1.0 / static_cast<double>(end - start);
      for (std::size_t a = start; a < end; ++a) r[i * in + a] = w;
    }
  } else {
    for (std::size_t i = 0; i < out; ++i) {
      double src = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto lo = static_cast<std::size_t>(std::floor(src));
      const std::size_t hi = std::min(lo + 1, in - 1);
      const double frac = src - static_cast<double>(lo);
      r[i * in + lo] += 1.0 - frac;
      r[i * in + hi] += frac;
    }
  }
  return r;
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride, std::size_t padding,
              std::size_t groups) {
  if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be [C',C/g,k,k], got " + shape_str(weight.shape()));
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  const std::size_t Co = weight.size(0), Cg = weight.size(1), k = weight.size(2);
  if (weight.size(3) != k) throw std::invalid_argument("conv2d: kernel must be square on the width axis");
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel extent must be odd, got " + std::to_string(k));
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  if (groups == 0 || C % groups != 0 || Co % groups != 0) {
    throw std::invalid_argument("conv2d: groups " + std::to_string(groups) + " must divide channel axis (" +
                                std::to_string(C) + " in, " + std::to_string(Co) + " out)");
  }
  if (Cg != C / groups) {
    throw std::invalid_argument(std::string("conv2d: ") + axis_name(1) + " axis mismatch: input has " + std::to_string(C) +
                                " channels, weight expects " + std::to_string(Cg * groups));
  }
  if (bias.defined() && bias.numel() != Co) throw std::invalid_argument("conv2d: bias must have " + std::to_string(Co) + " entries");
  for (std::size_t axis = 2; axis < 4; ++axis) {
    const std::size_t extent = x.size(axis);
    if (extent + 2 * padding < k || (extent + 2 * padding - k) % stride != 0) {
      throw std::invalid_argument(std::string("conv2d: ") + axis_name(axis) + " axis extent " + std::to_string(extent) +
                                  " with padding " + std::to_string(padding) + ", kernel " + std::to_string(k) +
                                  ", stride " + std::to_string(stride) + " gives a non-integral output");
    }
  }
  const std::size_t Ho = (H + 2 * padding - k) / stride + 1;
  const std::size_t Wo = (W + 2 * padding - k) / stride + 1;
  const std::size_t Cog = Co / groups;
  const auto in = x.data();
  const auto w = weight.data();
  std::vector<double> out(B * Co * Ho * Wo, 0.0);
  const auto pad = static_cast<long>(padding);

  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t co = 0; co < Co; ++co) {
      const std::size_t g = co / Cog;
      double* o = out.data() + ((b * Co + co) * Ho) * Wo;
      if (bias.defined()) std::fill(o, o + Ho * Wo, bias.data()[co]);
      for (std::size_t cg = 0; cg < Cg; ++cg) {
        const std::size_t ci = g * Cg + cg;
        const double* plane = in.data() + ((b * C + ci) * H) * W;
        for (std::size_t ky = 0; ky < k; ++ky) {
          for (std::size_t kx = 0; kx < k; ++kx) {
            const double wv = w[((co * Cg + cg) * k + ky) * k + kx];
            for (std::size_t oy = 0; oy < Ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - pad;
              if (iy < 0 || iy >= static_cast<long>(H)) continue;
              for (std::size_t ox = 0; ox < Wo; ++ox) {
                const long ix = static_cast<long>(ox * stride + kx) - pad;
                if (ix < 0 || ix >= static_cast<long>(W)) continue;
                o[oy * Wo + ox] += wv * plane[iy * static_cast<long>(W) + ix];
              }
            }
          }
        }
      }
    }
  }

  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result(
      {B, Co, Ho, Wo}, std::move(out), std::move(parents),
      [=](Node& n) {
        Node& px = *n.parents[0];
        Node& pw = *n.parents[1];
        double* gx = px.requires_grad ? px.grad_buffer().data() : nullptr;
        double* gw = pw.requires_grad ? pw.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b) {
          for (std::size_t co = 0; co < Co; ++co) {
            const std::size_t g = co / Cog;
            const double* go = n.grad.data() + ((b * Co + co) * Ho) * Wo;
            for (std::size_t cg = 0; cg < Cg; ++cg) {
              const std::size_t ci = g * Cg + cg;
              const std::size_t plane_off = ((b * C + ci) * H) * W;
              for (std::size_t ky = 0; ky < k; ++ky) {
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::size_t widx = ((co * Cg + cg) * k + ky) * k + kx;
                  const double wv = pw.data[widx];
                  double acc = 0.0;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy * stride + ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const long ix = static_cast<long>(ox * stride + kx) - pad;
                      if (ix < 0 || ix >= static_cast<long>(W)) continue;
                      const std::size_t at = plane_off + static_cast<std::size_t>(iy) * W + static_cast<std::size_t>(ix);
                      const double gv = go[oy * Wo + ox];
                      if (gx) gx[at] += gv * wv;
                      acc += gv * px.data[at];
                    }
                  }
                  if (gw) gw[widx] += acc;
                }
              }
            }
          }
        }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
          auto& gb = n.parents[2]->grad_buffer();
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t co = 0; co < Co; ++co)
              for (std::size_t i = 0; i < Ho * Wo; ++i) gb[co] += n.grad[(b * Co + co) * Ho * Wo + i];
        }
      });
}

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out_h, std::size_t out_w, bool allow_upsample) {
  if (x.rank() != 4) throw std::invalid_argument("adaptive_avg_pool2d: input must be [B,C,H,W], got " + shape_str(x.shape()));
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("adaptive_avg_pool2d: target extents must be positive");
  const std::size_t B = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
  if (!allow_upsample && (out_h > H || out_w > W)) {
    throw std::invalid_argument("adaptive_avg_pool2d: target " + std::to_string(out_h) + "x" + std::to_string(out_w) +
                                " exceeds input " + std::to_string(H) + "x" + std::to_string(W) +
                                " and upsampling was not requested");
  }
  const auto rh = axis_resampler(H, out_h);
  const auto rw = axis_resampler(W, out_w);
  const auto in = x.data();
  std::vector<double> out(B * C * out_h * out_w, 0.0);
  std::vector<double> tmp(out_h * W);
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* plane = in.data() + bc * H * W;
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t a = 0; a < H; ++a) {
        const double wa = rh[i * H + a];
        if (wa == 0.0) continue;
        for (std::size_t c = 0; c < W; ++c) tmp[i * W + c] += wa * plane[a * W + c];
      }
    double* o = out.data() + bc * out_h * out_w;
    for (std::size_t i = 0; i < out_h; ++i)
      for (std::size_t j = 0; j < out_w; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < W; ++c) acc += rw[j * W + c] * tmp[i * W + c];
        o[i * out_w + j] = acc;
      }
  }
  return Tensor::make_result({B, C, out_h, out_w}, std::move(out), {x},
                             [=](Node& n) {
                               Node& p = *n.parents[0];
                               if (!p.requires_grad) return;
                               auto& g = p.grad_buffer();
                               std::vector<double> t(out_h * W);
                               for (std::size_t bc = 0; bc < B * C; ++bc) {
                                 const double* go = n.grad.data() + bc * out_h * out_w;
                                 std::fill(t.begin(), t.end(), 0.0);
                                 for (std::size_t i = 0; i < out_h; ++i)
                                   for (std::size_t j = 0; j < out_w; ++j)
                                     for (std::size_t c = 0; c < W; ++c) t[i * W + c] += rw[j * W + c] * go[i * out_w + j];
                                 double* gp = g.data() + bc * H * W;
                                 for (std::size_t i = 0; i < out_h; ++i)
                                   for (std::size_t a = 0; a < H; ++a) {
                                     const double wa = rh[i * H + a];
                                     if (wa == 0.0) continue;
                                     for (std::size_t c = 0; c < W; ++c) gp[a * W + c] += wa * t[i * W + c];
                                   }
                               }
                             });
}

BilinearTaps bilinear_taps(double row, double col, std::size_t height, std::size_t width) {
  double y = std::clamp(row * static_cast<double>(height) - 0.5, 0.0, static_cast<double>(height - 1));
  double x = std::clamp(col * static_cast<double>(width) - 0.5, 0.0, static_cast<double>(width - 1));
  const auto y0 = static_cast<std::size_t>(std::floor(y));
  const auto x0 = static_cast<std::size_t>(std::floor(x));
  const std::size_t y1 = std::min(y0 + 1, height - 1);
  const std::size_t x1 = std::min(x0 + 1, width - 1);
  const double fy = y - static_cast<double>(y0);
  const double fx = x - static_cast<double>(x0);
  return BilinearTaps{{y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1},
                      {(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx}};
}

Tensor bilinear_sample(const Tensor& x, const Tensor& pts) {
  if (x.rank() != 3) throw std::invalid_argument("bilinear_sample: input must be [C,H,W], got " + shape_str(x.shape()));
  if (pts.rank() != 2 || pts.size(1) != 2) throw std::invalid_argument("bilinear_sample: points must be [Q,2], got " + shape_str(pts.shape()));
  const std::size_t C = x.size(0), H = x.size(1), W = x.size(2), Q = pts.size(0);
  const auto in = x.data();
  const auto p = pts.data();
  for (double v : p) {
    if (!std::isfinite(v)) throw std::invalid_argument("bilinear_sample: non-finite sample point");
  }
  std::vector<BilinearTaps> taps(Q);
  std::vector<double> out(Q * C);
  for (std::size_t q = 0; q < Q; ++q) {
    taps[q] = bilinear_taps(p[2 * q], p[2 * q + 1], H, W);
    for (std::size_t c = 0; c < C; ++c) {
      const double* plane = in.data() + c * H * W;
      double acc = 0.0;
      for (int t = 0; t < 4; ++t) acc += taps[q].weight[t] * plane[taps[q].index[t]];
      out[q * C + c] = acc;
    }
  }
  return Tensor::make_result({Q, C}, std::move(out), {x, pts}, [=, taps = std::move(taps)](Node& n) {
    Node& px = *n.parents[0];
    Node& pp = *n.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t q = 0; q < Q; ++q)
        for (std::size_t c = 0; c < C; ++c)
          for (int t = 0; t < 4; ++t) g[c * H * W + taps[q].index[t]] += taps[q].weight[t] * n.grad[q * C + c];
    }
    if (!pp.requires_grad) return;
    auto& g = pp.grad_buffer();
    for (std::size_t q = 0; q < Q; ++q) {
      const double y = pp.data[2 * q] * static_cast<double>(H) - 0.5;
      const double xx = pp.data[2 * q + 1] * static_cast<double>(W) - 0.5;
      // Clamped coordinates carry no gradient.
      const bool y_live = y > 0.0 && y < static_cast<double>(H - 1);
      const bool x_live = xx > 0.0 && xx < static_cast<double>(W - 1);
      const auto& tp = taps[q];
      // Recover fractional parts from the weights: w01+w11 = fx, w10+w11 = fy.
      const double fx = tp.weight[1] + tp.weight[3];
      const double fy = tp.weight[2] + tp.weight[3];
      double dy = 0.0, dx = 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        const double* plane = px.data.data() + c * H * W;
        const double v00 = plane[tp.index[0]], v01 = plane[tp.index[1]];
        const double v10 = plane[tp.index[2]], v11 = plane[tp.index[3]];
        const double go = n.grad[q * C + c];
        dy += go * ((1 - fx) * (v10 - v00) + fx * (v11 - v01));
        dx += go * ((1 - fy) * (v01 - v00) + fy * (v11 - v10));
      }
      if (y_live) g[2 * q] += dy * static_cast<double>(H);
      if (x_live) g[2 * q + 1] += dx * static_cast<double>(W);
    }
  });
}

}  // namespace vlc
