#pragma once

// Differentiable tensor primitives. Every op computes its forward value with a
// fixed loop order, so repeated evaluation is bit-identical, and registers a
// backward rule that accumulates into its inputs' gradient buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "ctscan/tensor.hpp"

namespace ctscan {

namespace kernel {

// C[m x n] += A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (std::size_t t = 0; t < k; ++t) {
      const T av = arow[t];
      if (av == T{0}) continue;
      const T* brow = b + t * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m x n] += A[r x m]^T * B[r x n]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t r, std::size_t m, std::size_t n) {
  for (std::size_t t = 0; t < r; ++t) {
    const T* arow = a + t * m;
    const T* brow = b + t * n;
    for (std::size_t i = 0; i < m; ++i) {
      const T av = arow[i];
      if (av == T{0}) continue;
      T* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <class T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = a[i * cols + j];
  return out;
}

// C[m x n] += A[m x k] * B[n x k]^T. B is transposed once so the inner loop
// stays a contiguous axpy.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n) {
  const std::vector<T> bt = transpose(b, n, k);
  gemm_nn(a, bt.data(), c, m, k, n);
}

}  // namespace kernel

namespace detail {

inline void require_rank(std::string_view op, const Shape& s, std::size_t rank) {
  if (s.size() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                         shape_str(s));
  }
}

inline void require_same_shape(std::string_view op, const Shape& a, const Shape& b) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
}

inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
  outer = 1;
  inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

inline std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) st[i - 1] = st[i] * s[i];
  return st;
}

}  // namespace detail

/// Elementwise a + b. `b` broadcasts against `a` numpy-style: right-aligned,
/// each of its dimensions equal to a's or 1.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  if (bs.size() > as.size()) {
    throw DimensionError("add: cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
  }
  const std::size_t offset = as.size() - bs.size();
  bool suffix = true;
  for (std::size_t i = 0; i < bs.size(); ++i) {
    if (bs[i] != as[offset + i]) {
      suffix = false;
      if (bs[i] != 1) {
        throw DimensionError("add: cannot broadcast " + shape_str(bs) + " onto " + shape_str(as));
      }
    }
  }
  // Map every element of a to its element of b.
  std::vector<std::size_t> bindex;
  const std::size_t n = a.numel();
  const std::size_t bn = b.numel();
  if (!suffix) {
    bindex.resize(n);
    const auto ast = detail::strides_of(as);
    const auto bst = detail::strides_of(bs);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t rem = i, bi = 0;
      for (std::size_t d = 0; d < as.size(); ++d) {
        const std::size_t coord = rem / ast[d];
        rem %= ast[d];
        if (d >= offset && bs[d - offset] != 1) bi += coord * bst[d - offset];
      }
      bindex[i] = bi;
    }
  }
  std::vector<T> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  if (suffix) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % bn];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[bindex[i]];
  }
  auto an = a.node_ptr();
  auto bnode = b.node_ptr();
  return detail::make_result<T>("add", as, std::move(out), {a, b},
                                [an, bnode, suffix, bn, bindex = std::move(bindex)](Node<T>& self) {
                                  if (auto* ga = detail::grad_sink(an)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i];
                                  }
                                  if (auto* gb = detail::grad_sink(bnode)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*gb)[suffix ? i % bn : bindex[i]] += self.grad[i];
                                  }
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a.shape(), b.shape());
  const std::size_t n = a.numel();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>("mul", a.shape(), std::move(out), {a, b}, [an, bn](Node<T>& self) {
    if (auto* ga = detail::grad_sink(an)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*ga)[i] += self.grad[i] * bn->value[i];
    }
    if (auto* gb = detail::grad_sink(bn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*gb)[i] += self.grad[i] * an->value[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  auto xn = x.node_ptr();
  return detail::make_result<T>("scale", x.shape(), std::move(out), {x}, [xn, factor](Node<T>& self) {
    if (auto* g = detail::grad_sink(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * factor;
    }
  });
}

/// y = x for x >= 0, slope * x otherwise. The subgradient at 0 is 1.
template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  if (!(slope > T{0} && slope <= T{1})) {
    throw ParameterError("leaky_relu: slope must lie in (0, 1], got " + std::to_string(slope));
  }
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] >= T{0} ? x[i] : slope * x[i];
  auto xn = x.node_ptr();
  return detail::make_result<T>("leaky_relu", x.shape(), std::move(out), {x}, [xn, slope](Node<T>& self) {
    if (auto* g = detail::grad_sink(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        (*g)[i] += xn->value[i] >= T{0} ? self.grad[i] : slope * self.grad[i];
    }
  });
}

/// C = A * B for A[m x k], B[k x n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_rank("matmul", a.shape(), 2);
  detail::require_rank("matmul", b.shape(), 2);
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " * " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n, T{0});
  kernel::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>("matmul", {m, n}, std::move(out), {a, b}, [an, bn, m, k, n](Node<T>& self) {
    if (auto* ga = detail::grad_sink(an)) {
      kernel::gemm_nt(self.grad.data(), bn->value.data(), ga->data(), m, n, k);
    }
    if (auto* gb = detail::grad_sink(bn)) {
      kernel::gemm_tn(an->value.data(), self.grad.data(), gb->data(), m, k, n);
    }
  });
}

/// Batched matmul: C[i] = A[i] * B[i] (or A[i] * B[i]^T when transpose_b)
/// for A[batch x m x k] and B[batch x k x n] (B[batch x n x k] transposed).
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  detail::require_rank("bmm", a.shape(), 3);
  detail::require_rank("bmm", b.shape(), 3);
  const std::size_t batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const std::size_t bk = transpose_b ? b.dim(2) : b.dim(1);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if (b.dim(0) != batch || bk != k) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  }
  std::vector<T> out(batch * m * n, T{0});
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    if (transpose_b) {
      kernel::gemm_nt(ap + i * m * k, bp + i * n * k, out.data() + i * m * n, m, k, n);
    } else {
      kernel::gemm_nn(ap + i * m * k, bp + i * k * n, out.data() + i * m * n, m, k, n);
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  return detail::make_result<T>(
      "bmm", {batch, m, n}, std::move(out), {a, b}, [an, bn, batch, m, k, n, transpose_b](Node<T>& self) {
        auto* ga = detail::grad_sink(an);
        auto* gb = detail::grad_sink(bn);
        for (std::size_t i = 0; i < batch; ++i) {
          const T* dc = self.grad.data() + i * m * n;
          const T* ai = an->value.data() + i * m * k;
          const T* bi = bn->value.data() + i * k * n;
          if (transpose_b) {
            // C = A B^T, B is n x k: dA = dC B, dB = dC^T A
            if (ga) kernel::gemm_nn(dc, bi, ga->data() + i * m * k, m, n, k);
            if (gb) kernel::gemm_tn(dc, ai, gb->data() + i * n * k, m, n, k);
          } else {
            if (ga) kernel::gemm_nt(dc, bi, ga->data() + i * m * k, m, n, k);
            if (gb) kernel::gemm_tn(ai, dc, gb->data() + i * k * n, m, k, n);
          }
        }
      });
}

/// Softmax along `axis`, computed with max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  }
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      T mx = xv[base];
      for (std::size_t j = 1; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total{0};
      for (std::size_t j = 0; j < len; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= total;
    }
  }
  auto xn = x.node_ptr();
  return detail::make_result<T>("softmax", x.shape(), std::move(out), {x},
                                [xn, outer, len, inner](Node<T>& self) {
                                  auto* g = detail::grad_sink(xn);
                                  if (!g) return;
                                  const auto& y = self.value;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < outer; ++o) {
                                    for (std::size_t in = 0; in < inner; ++in) {
                                      const std::size_t base = o * len * inner + in;
                                      T dot{0};
                                      for (std::size_t j = 0; j < len; ++j)
                                        dot += dy[base + j * inner] * y[base + j * inner];
                                      for (std::size_t j = 0; j < len; ++j) {
                                        const std::size_t idx = base + j * inner;
                                        (*g)[idx] += y[idx] * (dy[idx] - dot);
                                      }
                                    }
                                  }
                                });
}

/// Normalizes over the last axis (population variance), then y = gain * xhat + bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
  if (x.rank() < 1) throw DimensionError("layer_norm: rank-0 input");
  const std::size_t d = x.shape().back();
  if (d < 2) throw DimensionError("layer_norm: last axis must have length >= 2, got " + shape_str(x.shape()));
  if (gain.numel() != d || bias.numel() != d) {
    throw DimensionError("layer_norm: gain/bias must have " + std::to_string(d) + " entries");
  }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> rstd(rows);
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mean{0};
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<T>(d);
    T var{0};
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<T>(d);
    const T inv = T{1} / std::sqrt(var + eps);
    rstd[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const T h = (row[j] - mean) * inv;
      xhat[r * d + j] = h;
      out[r * d + j] = gain[j] * h + bias[j];
    }
  }
  auto xn = x.node_ptr();
  auto gn = gain.node_ptr();
  auto bn = bias.node_ptr();
  return detail::make_result<T>(
      "layer_norm", x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, rows, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node<T>& self) {
        auto* gx = detail::grad_sink(xn);
        auto* gg = detail::grad_sink(gn);
        auto* gb = detail::grad_sink(bn);
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* h = xhat.data() + r * d;
          if (gg) for (std::size_t j = 0; j < d; ++j) (*gg)[j] += dy[j] * h[j];
          if (gb) for (std::size_t j = 0; j < d; ++j) (*gb)[j] += dy[j];
          if (!gx) continue;
          T mean_dh{0}, mean_dh_h{0};
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = dy[j] * gn->value[j];
            mean_dh += dh[j];
            mean_dh_h += dh[j] * h[j];
          }
          mean_dh /= static_cast<T>(d);
          mean_dh_h /= static_cast<T>(d);
          for (std::size_t j = 0; j < d; ++j)
            (*gx)[r * d + j] += rstd[r] * (dh[j] - mean_dh - h[j] * mean_dh_h);
        }
      });
}

/// 2-D cross-correlation. x is [C_in x H x W] or [N x C_in x H x W], kernels
/// [C_out x C_in x k_h x k_w], bias [C_out] (may be undefined).
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernels, const Tensor<T>& bias, std::size_t stride,
                 std::size_t padding) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3) throw DimensionError("conv2d: input must be rank 3 or 4, got " + shape_str(x.shape()));
  detail::require_rank("conv2d kernels", kernels.shape(), 4);
  if (stride == 0) throw ParameterError("conv2d: stride must be positive");
  const std::size_t batch = batched ? x.dim(0) : 1;
  const std::size_t cin = x.dim(batched ? 1 : 0), h = x.dim(batched ? 2 : 1), w = x.dim(batched ? 3 : 2);
  const std::size_t cout = kernels.dim(0), kh = kernels.dim(2), kw = kernels.dim(3);
  if (kernels.dim(1) != cin) {
    throw DimensionError("conv2d: kernel expects " + std::to_string(kernels.dim(1)) + " input channels, got " +
                         std::to_string(cin));
  }
  if (kh > h + 2 * padding || kw > w + 2 * padding) {
    throw DimensionError("conv2d: kernel " + shape_str(kernels.shape()) + " larger than padded input " +
                         shape_str(x.shape()));
  }
  if (bias.defined() && bias.numel() != cout) throw DimensionError("conv2d: bias must have C_out entries");
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (w + 2 * padding - kw) / stride + 1;
  const std::size_t patch = cin * kh * kw;
  const std::size_t pixels = ho * wo;

  // im2col buffers are kept for the backward pass.
  std::vector<T> cols(batch * patch * pixels, T{0});
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* col = cols.data() + b * patch * pixels;
    const T* img = xv.data() + b * cin * h * w;
    for (std::size_t c = 0; c < cin; ++c)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          T* dst = col + ((c * kh + ky) * kw + kx) * pixels;
          for (std::size_t oy = 0; oy < ho; ++oy) {
            const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t ox = 0; ox < wo; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[oy * wo + ox] = img[(c * h + iy) * w + ix];
            }
          }
        }
  }
  std::vector<T> out(batch * cout * pixels, T{0});
  const T* kv = kernels.data().data();
  for (std::size_t b = 0; b < batch; ++b) {
    T* o = out.data() + b * cout * pixels;
    if (bias.defined()) {
      for (std::size_t co = 0; co < cout; ++co) std::fill(o + co * pixels, o + (co + 1) * pixels, bias[co]);
    }
    kernel::gemm_nn(kv, cols.data() + b * patch * pixels, o, cout, patch, pixels);
  }
  Shape out_shape = batched ? Shape{batch, cout, ho, wo} : Shape{cout, ho, wo};
  auto xn = x.node_ptr();
  auto kn = kernels.node_ptr();
  auto bn = bias.defined() ? bias.node_ptr() : nullptr;
  return detail::make_result<T>(
      "conv2d", std::move(out_shape), std::move(out), {x, kernels, bias},
      [xn, kn, bn, batch, cin, h, w, cout, kh, kw, ho, wo, stride, padding, patch, pixels,
       cols = std::move(cols)](Node<T>& self) {
        auto* gx = detail::grad_sink(xn);
        auto* gk = detail::grad_sink(kn);
        auto* gb = bn ? detail::grad_sink(bn) : nullptr;
        std::vector<T> dcol;
        for (std::size_t b = 0; b < batch; ++b) {
          const T* dout = self.grad.data() + b * cout * pixels;
          const T* col = cols.data() + b * patch * pixels;
          if (gb) {
            for (std::size_t co = 0; co < cout; ++co)
              for (std::size_t p = 0; p < pixels; ++p) (*gb)[co] += dout[co * pixels + p];
          }
          if (gk) kernel::gemm_nt(dout, col, gk->data(), cout, pixels, patch);
          if (!gx) continue;
          dcol.assign(patch * pixels, T{0});
          kernel::gemm_tn(kn->value.data(), dout, dcol.data(), cout, patch, pixels);
          T* dimg = gx->data() + b * cin * h * w;
          for (std::size_t c = 0; c < cin; ++c)
            for (std::size_t ky = 0; ky < kh; ++ky)
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const T* src = dcol.data() + ((c * kh + ky) * kw + kx) * pixels;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                  const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                  if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                  for (std::size_t ox = 0; ox < wo; ++ox) {
                    const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                    if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                    dimg[(c * h + iy) * w + ix] += src[oy * wo + ox];
                  }
                }
              }
        }
      });
}

/// Mean over one axis; the axis is removed from the result shape.
template <class T>
Tensor<T> mean(const Tensor<T>& x, std::size_t axis) {
  if (axis >= x.rank()) throw DimensionError("mean: axis out of range for " + shape_str(x.shape()));
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(outer * inner, T{0});
  const auto xv = x.data();
  const T inv = T{1} / static_cast<T>(len);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < len; ++j)
      for (std::size_t in = 0; in < inner; ++in) out[o * inner + in] += xv[(o * len + j) * inner + in];
  for (T& v : out) v *= inv;
  auto xn = x.node_ptr();
  return detail::make_result<T>("mean", std::move(out_shape), std::move(out), {x},
                                [xn, outer, len, inner, inv](Node<T>& self) {
                                  auto* g = detail::grad_sink(xn);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t j = 0; j < len; ++j)
                                      for (std::size_t in = 0; in < inner; ++in)
                                        (*g)[(o * len + j) * inner + in] += self.grad[o * inner + in] * inv;
                                });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T total{0};
  for (T v : x.data()) total += v;
  auto xn = x.node_ptr();
  return detail::make_result<T>("sum", {1}, {total}, {x}, [xn](Node<T>& self) {
    if (auto* g = detail::grad_sink(xn)) {
      for (T& v : *g) v += self.grad[0];
    }
  });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  auto xn = x.node_ptr();
  return detail::make_result<T>("reshape", std::move(shape), std::move(out), {x}, [xn](Node<T>& self) {
    if (auto* g = detail::grad_sink(xn)) {
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

/// Reorders axes: output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm) {
  const std::size_t r = x.rank();
  if (perm.size() != r) throw DimensionError("permute: permutation rank mismatch");
  std::vector<bool> used(r, false);
  for (std::size_t p : perm) {
    if (p >= r || used[p]) throw DimensionError("permute: invalid permutation");
    used[p] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = x.dim(perm[i]);
  const auto in_st = detail::strides_of(x.shape());
  const auto out_st = detail::strides_of(out_shape);
  const std::size_t n = x.numel();
  // source offset for every destination element
  std::vector<std::size_t> src(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, s = 0;
    for (std::size_t d = 0; d < r; ++d) {
      const std::size_t coord = rem / out_st[d];
      rem %= out_st[d];
      s += coord * in_st[perm[d]];
    }
    src[i] = s;
  }
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[src[i]];
  auto xn = x.node_ptr();
  return detail::make_result<T>("permute", std::move(out_shape), std::move(out), {x},
                                [xn, src = std::move(src)](Node<T>& self) {
                                  if (auto* g = detail::grad_sink(xn)) {
                                    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[src[i]] += self.grad[i];
                                  }
                                });
}

/// Contiguous sub-range [start, start + length) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw DimensionError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") invalid for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::size_t outer, len, inner;
  detail::split_axis(x.shape(), axis, outer, len, inner);
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::vector<T> out(outer * length * inner);
  const auto xv = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * len + start) * inner), length * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * length * inner));
  auto xn = x.node_ptr();
  return detail::make_result<T>("slice", std::move(out_shape), std::move(out), {x},
                                [xn, outer, len, inner, start, length](Node<T>& self) {
                                  auto* g = detail::grad_sink(xn);
                                  if (!g) return;
                                  for (std::size_t o = 0; o < outer; ++o)
                                    for (std::size_t i = 0; i < length * inner; ++i)
                                      (*g)[(o * len + start) * inner + i] += self.grad[o * length * inner + i];
                                });
}

/// Mean over rows of -log softmax(logits)[label]; logits are [n x classes].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  detail::require_rank("cross_entropy", logits.shape(), 2);
  const std::size_t n = logits.dim(0), k = logits.dim(1);
  if (labels.size() != n) throw DimensionError("cross_entropy: one label per row required");
  std::vector<T> probs(n * k);
  T loss{0};
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    }
    const T* row = logits.data().data() + i * k;
    const T mx = *std::max_element(row, row + k);
    T total{0};
    for (std::size_t j = 0; j < k; ++j) total += std::exp(row[j] - mx);
    const T lse = mx + std::log(total);
    loss += lse - row[labels[i]];
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - lse);
  }
  loss /= static_cast<T>(n);
  auto ln = logits.node_ptr();
  return detail::make_result<T>("cross_entropy", {1}, {loss}, {logits},
                                [ln, n, k, labels, probs = std::move(probs)](Node<T>& self) {
                                  auto* g = detail::grad_sink(ln);
                                  if (!g) return;
                                  const T s = self.grad[0] / static_cast<T>(n);
                                  for (std::size_t i = 0; i < n; ++i)
                                    for (std::size_t j = 0; j < k; ++j) {
                                      const T onehot = static_cast<std::size_t>(labels[i]) == j ? T{1} : T{0};
                                      (*g)[i * k + j] += s * (probs[i * k + j] - onehot);
                                    }
                                });
}

/// Affine map over the last axis: x[..., in] * weight[in x out] + bias[out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  detail::require_rank("linear weight", weight.shape(), 2);
  const std::size_t in = weight.dim(0), out = weight.dim(1);
  if (x.shape().back() != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  Shape out_shape = x.shape();
  out_shape.back() = out;
  Tensor<T> flat = x.rank() == 2 ? x : reshape(x, {x.numel() / in, in});
  Tensor<T> y = add(matmul(flat, weight), bias);
  return x.rank() == 2 ? y : reshape(y, std::move(out_shape));
}

}  // namespace ctscan
