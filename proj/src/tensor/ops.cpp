#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "vlconn/ops.hpp"

namespace vlc {

namespace {

using detail::Node;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* what) {
  if (t.rank() != rank) {
    throw std::invalid_argument(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                                ", got " + shape_str(t.shape()));
  }
}

// C[n,m] += A[n,k] * B[k,m]
void mm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* crow = c + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[n,m] += A[n,k] * B[m,k]^T
void mm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * m + j] += acc;
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
void mm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * m;
      for (std::size_t j = 0; j < m; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class F, class DF>
Tensor unary(const Tensor& x, F f, DF df) {
  const auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [df](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * df(p.data[i], n.data[i]);
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    const double sign[2] = {1.0, -1.0};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    Node& pa = *n.parents[0];
    Node& pb = *n.parents[1];
    if (pa.requires_grad) {
      auto& g = pa.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.data[i];
    }
    if (pb.requires_grad) {
      auto& g = pb.grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.data[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary(
      x, [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& x) {
  return unary(
      x, [](double v) { return v / (1.0 + std::exp(-v)); },
      [](double v, double) {
        const double s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor relu(const Tensor& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor tanh(const Tensor& x) {
  return unary(
      x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  return Tensor::make_result({1}, {s}, {x}, [](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (auto& v : g) v += n.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul", "lhs");
  require_rank(b, 2, "matmul", "rhs");
  const std::size_t n = a.size(0), k = a.size(1), m = b.size(1);
  if (b.size(0) != k) {
    throw std::invalid_argument("matmul: inner extent mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  std::vector<double> out(n * m, 0.0);
  mm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
  return Tensor::make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& node) {
    Node& pa = *node.parents[0];
    Node& pb = *node.parents[1];
    if (pa.requires_grad) mm_nt(node.grad.data(), pb.data.data(), pa.grad_buffer().data(), n, m, k);
    if (pb.requires_grad) mm_tn(pa.data.data(), node.grad.data(), pb.grad_buffer().data(), n, k, m);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt", "lhs");
  require_rank(b, 2, "matmul_nt", "rhs");
  const std::size_t n = a.size(0), k = a.size(1), m = b.size(0);
  if (b.size(1) != k) {
    throw std::invalid_argument("matmul_nt: inner extent mismatch " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(n * m, 0.0);
  mm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
  return Tensor::make_result({n, m}, std::move(out), {a, b}, [n, k, m](Node& node) {
    Node& pa = *node.parents[0];
    Node& pb = *node.parents[1];
    // dA = dC B ; dB = dC^T A
    if (pa.requires_grad) mm_nn(node.grad.data(), pb.data.data(), pa.grad_buffer().data(), n, m, k);
    if (pb.requires_grad) mm_tn(node.grad.data(), pa.data.data(), pb.grad_buffer().data(), n, m, k);
  });
}

Tensor transpose(const Tensor& a) { return permute(a, {1, 0}); }

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require_rank(x, 2, "linear", "input");
  require_rank(weight, 2, "linear", "weight");
  const std::size_t n = x.size(0), in = x.size(1), out_dim = weight.size(0);
  if (weight.size(1) != in) {
    throw std::invalid_argument("linear: input width " + std::to_string(in) + " does not match weight " +
                                shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.size(0) != out_dim)) {
    throw std::invalid_argument("linear: bias must be [" + std::to_string(out_dim) + "], got " +
                                shape_str(bias.shape()));
  }
  std::vector<double> out(n * out_dim, 0.0);
  if (bias.defined()) {
    for (std::size_t i = 0; i < n; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * out_dim);
  }
  mm_nt(x.data().data(), weight.data().data(), out.data(), n, in, out_dim);
  std::vector<Tensor> parents{x, weight};
  if (bias.defined()) parents.push_back(bias);
  return Tensor::make_result({n, out_dim}, std::move(out), std::move(parents), [n, in, out_dim](Node& node) {
    Node& px = *node.parents[0];
    Node& pw = *node.parents[1];
    if (px.requires_grad) mm_nn(node.grad.data(), pw.data.data(), px.grad_buffer().data(), n, out_dim, in);
    if (pw.requires_grad) mm_tn(node.grad.data(), px.data.data(), pw.grad_buffer().data(), n, out_dim, in);
    if (node.parents.size() > 2 && node.parents[2]->requires_grad) {
      auto& g = node.parents[2]->grad_buffer();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < out_dim; ++j) g[j] += node.grad[i * out_dim + j];
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& dims) {
  const Shape& in_shape = x.shape();
  const std::size_t r = in_shape.size();
  if (dims.size() != r) throw std::invalid_argument("permute: expected " + std::to_string(r) + " axes");
  std::vector<bool> seen(r, false);
  for (auto d : dims) {
    if (d >= r || seen[d]) throw std::invalid_argument("permute: invalid axis order");
    seen[d] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = in_shape[dims[i]];
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];

  // map[out_flat] = in_flat
  const std::size_t total = x.numel();
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < total; ++o) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[dims[i]];
    map[o] = src;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<double> out(total);
  for (std::size_t o = 0; o < total; ++o) out[o] = x.data()[map[o]];
  return Tensor::make_result(std::move(out_shape), std::move(out), {x}, [map = std::move(map)](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t o = 0; o < map.size(); ++o) g[map[o]] += n.grad[o];
  });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_rows", "input");
  const std::size_t cols = x.size(1);
  if (count == 0 || start + count > x.size(0)) throw std::out_of_range("slice_rows: range outside " + shape_str(x.shape()));
  std::vector<double> out(x.data().begin() + start * cols, x.data().begin() + (start + count) * cols);
  return Tensor::make_result({count, cols}, std::move(out), {x}, [start, cols](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[start * cols + i] += n.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank(x, 2, "slice_cols", "input");
  const std::size_t rows = x.size(0), cols = x.size(1);
  if (count == 0 || start + count > cols) throw std::out_of_range("slice_cols: range outside " + shape_str(x.shape()));
  std::vector<double> out(rows * count);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < count; ++j) out[i * count + j] = x.data()[i * cols + start + j];
  return Tensor::make_result({rows, count}, std::move(out), {x}, [rows, cols, start, count](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < count; ++j) g[i * cols + start + j] += n.grad[i * count + j];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no inputs");
  const std::size_t cols = parts[0].size(1);
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_rows", "input");
    if (p.size(1) != cols) throw std::invalid_argument("concat_rows: column mismatch at " + shape_str(p.shape()));
    rows += p.size(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  return Tensor::make_result({rows, cols}, std::move(out), parts, [](Node& n) {
    std::size_t offset = 0;
    for (auto& p : n.parents) {
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[offset + i];
      }
      offset += p->data.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  const std::size_t rows = parts[0].size(0);
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank(p, 2, "concat_cols", "input");
    if (p.size(0) != rows) throw std::invalid_argument("concat_cols: row mismatch at " + shape_str(p.shape()));
    cols += p.size(1);
  }
  std::vector<double> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.size(1);
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < w; ++j) out[i * cols + offset + j] = p.data()[i * w + j];
    offset += w;
  }
  return Tensor::make_result({rows, cols}, std::move(out), parts, [rows, cols](Node& n) {
    std::size_t off = 0;
    for (auto& p : n.parents) {
      const std::size_t w = p->shape[1];
      if (p->requires_grad) {
        auto& g = p->grad_buffer();
        for (std::size_t i = 0; i < rows; ++i)
          for (std::size_t j = 0; j < w; ++j) g[i * w + j] += n.grad[i * cols + off + j];
      }
      off += w;
    }
  });
}

Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& rows) {
  require_rank(x, 2, "gather_rows", "input");
  if (rows.empty()) throw std::invalid_argument("gather_rows: empty index list");
  const std::size_t cols = x.size(1);
  std::vector<double> out(rows.size() * cols);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= x.size(0)) throw std::out_of_range("gather_rows: row " + std::to_string(rows[r]) + " out of range");
    std::copy_n(x.data().begin() + rows[r] * cols, cols, out.begin() + r * cols);
  }
  return Tensor::make_result({rows.size(), cols}, std::move(out), {x}, [rows, cols](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t r = 0; r < rows.size(); ++r)
      for (std::size_t j = 0; j < cols; ++j) g[rows[r] * cols + j] += n.grad[r * cols + j];
  });
}

Tensor mul_rows(const Tensor& x, const Tensor& w) {
  require_rank(x, 2, "mul_rows", "input");
  const std::size_t m = x.size(0), d = x.size(1);
  if (w.numel() != m) throw std::invalid_argument("mul_rows: weight needs " + std::to_string(m) + " entries");
  std::vector<double> out(m * d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] = x.data()[i * d + j] * w.data()[i];
  return Tensor::make_result({m, d}, std::move(out), {x, w}, [m, d](Node& n) {
    Node& px = *n.parents[0];
    Node& pw = *n.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < d; ++j) g[i * d + j] += n.grad[i * d + j] * pw.data[i];
    }
    if (pw.requires_grad) {
      auto& g = pw.grad_buffer();
      for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += n.grad[i * d + j] * px.data[i * d + j];
        g[i] += acc;
      }
    }
  });
}

Tensor scale_channels(const Tensor& x, const Tensor& s) {
  require_rank(x, 4, "scale_channels", "input");
  const std::size_t b = x.size(0), c = x.size(1), hw = x.size(2) * x.size(3);
  if (s.numel() != b * c) throw std::invalid_argument("scale_channels: scale must be [" + std::to_string(b) + ", " + std::to_string(c) + "]");
  std::vector<double> out(x.numel());
  for (std::size_t bc = 0; bc < b * c; ++bc)
    for (std::size_t i = 0; i < hw; ++i) out[bc * hw + i] = x.data()[bc * hw + i] * s.data()[bc];
  return Tensor::make_result(x.shape(), std::move(out), {x, s}, [b, c, hw](Node& n) {
    Node& px = *n.parents[0];
    Node& ps = *n.parents[1];
    if (px.requires_grad) {
      auto& g = px.grad_buffer();
      for (std::size_t bc = 0; bc < b * c; ++bc)
        for (std::size_t i = 0; i < hw; ++i) g[bc * hw + i] += n.grad[bc * hw + i] * ps.data[bc];
    }
    if (ps.requires_grad) {
      auto& g = ps.grad_buffer();
      for (std::size_t bc = 0; bc < b * c; ++bc) {
        double acc = 0.0;
        for (std::size_t i = 0; i < hw; ++i) acc += n.grad[bc * hw + i] * px.data[bc * hw + i];
        g[bc] += acc;
      }
    }
  });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
  const Shape& s = x.shape();
  if (axis >= s.size()) throw std::invalid_argument("softmax: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t len = s[axis];
  std::vector<double> out(x.numel());
  const auto in = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * len * inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= z;
    }
  }
  return Tensor::make_result(s, std::move(out), {x}, [outer, inner, len](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * len * inner + i;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += n.grad[base + k * inner] * n.data[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t at = base + k * inner;
          g[at] += n.data[at] * (n.grad[at] - dot);
        }
      }
    }
  });
}

Tensor causal_softmax(const Tensor& x) {
  require_rank(x, 2, "causal_softmax", "input");
  const std::size_t t = x.size(0);
  if (x.size(1) != t) throw std::invalid_argument("causal_softmax: scores must be square, got " + shape_str(x.shape()));
  std::vector<double> out(t * t, 0.0);
  const auto in = x.data();
  for (std::size_t i = 0; i < t; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j <= i; ++j) mx = std::max(mx, in[i * t + j]);
    double z = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      out[i * t + j] = std::exp(in[i * t + j] - mx);
      z += out[i * t + j];
    }
    for (std::size_t j = 0; j <= i; ++j) out[i * t + j] /= z;
  }
  return Tensor::make_result({t, t}, std::move(out), {x}, [t](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    for (std::size_t i = 0; i < t; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j <= i; ++j) dot += n.grad[i * t + j] * n.data[i * t + j];
      for (std::size_t j = 0; j <= i; ++j) g[i * t + j] += n.data[i * t + j] * (n.grad[i * t + j] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d || bias.numel() != d) {
    throw std::invalid_argument("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<double> out(x.numel());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  const auto in = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += in[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (in[r * d + j] - mu) * (in[r * d + j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (in[r * d + j] - mu) * inv_std[r];
      out[r * d + j] = xhat[r * d + j] * gain.data()[j] + bias.data()[j];
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& n) {
        Node& px = *n.parents[0];
        Node& pg = *n.parents[1];
        Node& pb = *n.parents[2];
        if (pg.requires_grad || pb.requires_grad) {
          auto* gg = pg.requires_grad ? pg.grad_buffer().data() : nullptr;
          auto* gb = pb.requires_grad ? pb.grad_buffer().data() : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < d; ++j) {
              if (gg) gg[j] += n.grad[r * d + j] * xhat[r * d + j];
              if (gb) gb[j] += n.grad[r * d + j];
            }
          }
        }
        if (!px.requires_grad) return;
        auto& g = px.grad_buffer();
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dxh = 0.0, mean_dxh_xh = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = n.grad[r * d + j] * pg.data[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xhat[r * d + j];
          }
          mean_dxh *= inv_d;
          mean_dxh_xh *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dxh = n.grad[r * d + j] * pg.data[j];
            g[r * d + j] += inv_std[r] * (dxh - mean_dxh - xhat[r * d + j] * mean_dxh_xh);
          }
        }
      });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<std::size_t>& targets) {
  require_rank(logits, 2, "cross_entropy", "logits");
  const std::size_t t = logits.size(0), v = logits.size(1);
  if (targets.size() != t) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                std::to_string(t) + " rows");
  }
  const auto in = logits.data();
  std::vector<double> probs(t * v);
  double loss = 0.0;
  for (std::size_t i = 0; i < t; ++i) {
    if (targets[i] >= v) throw std::out_of_range("cross_entropy: target id " + std::to_string(targets[i]) + " outside vocab");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, in[i * v + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < v; ++j) z += std::exp(in[i * v + j] - mx);
    const double log_z = mx + std::log(z);
    loss += log_z - in[i * v + targets[i]];
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] = std::exp(in[i * v + j] - log_z);
  }
  loss /= static_cast<double>(t);
  return Tensor::make_result({1}, {loss}, {logits}, [t, v, targets, probs = std::move(probs)](Node& n) {
    Node& p = *n.parents[0];
    if (!p.requires_grad) return;
    auto& g = p.grad_buffer();
    const double s = n.grad[0] / static_cast<double>(t);
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < v; ++j) g[i * v + j] += s * probs[i * v + j];
      g[i * v + targets[i]] -= s;
    }
  });
}

AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                                     bool causal, bool keep_weights) {
  require_rank(q, 2, "multi_head_attention", "q");
  require_rank(k, 2, "multi_head_attention", "k");
  require_rank(v, 2, "multi_head_attention", "v");
  const std::size_t d = q.size(1);
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("multi_head_attention: head count " + std::to_string(heads) +
                                " must divide width " + std::to_string(d));
  }
  if (k.size(1) != d || v.size(1) != d || k.size(0) != v.size(0)) {
    throw std::invalid_argument("multi_head_attention: q/k/v widths or key counts disagree");
  }
  if (causal && q.size(0) != k.size(0)) throw std::invalid_argument("multi_head_attention: causal needs square scores");
  const std::size_t dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  AttentionOutput result;
  if (keep_weights) result.weights.assign(q.size(0) * k.size(0), 0.0);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
    Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
    Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
    Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
    Tensor attn = causal ? causal_softmax(scores) : softmax(scores, 1);
    if (keep_weights) {
      for (std::size_t i = 0; i < result.weights.size(); ++i) result.weights[i] += attn.data()[i] / static_cast<double>(heads);
    }
    outs.push_back(matmul(attn, vh));
  }
  result.output = heads == 1 ? outs[0] : concat_cols(outs);
  return result;
}

}  // namespace vlc
