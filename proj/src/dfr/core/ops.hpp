#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "dfr/core/graph.hpp"
#include "dfr/core/kernels.hpp"
#include "dfr/core/tensor.hpp"

// Differentiable ops over dense NCHW tensors. Each op computes its forward
// result, hands the graph a backward closure, and returns a fresh tensor.
// Backward closures accumulate (+=) into input gradients and skip inputs that
// cannot reach a gradient leaf.

namespace dfr::ops {

namespace detail {

// Reused scratch buffers; graphs are thread-confined so thread_local is safe.
template <typename T>
std::vector<T>& scratch(int slot) {
  thread_local std::vector<T> bufs[6];
  return bufs[slot];
}

template <typename T>
void transpose(const T* src, int rows, int cols, T* dst) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) dst[static_cast<int64_t>(c) * rows + r] = src[static_cast<int64_t>(r) * cols + c];
}

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
}

// im2col for one image, writing into a column block with leading dimension
// col_ld and column offset col_off (so a batch shares one col matrix).
template <typename T>
void im2col(const T* x, int C, int H, int W, int KH, int KW, int stride, int pad, T* col,
            int64_t col_ld, int64_t col_off) {
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < KH; ++ky) {
      for (int kx = 0; kx < KW; ++kx) {
        const int row = (c * KH + ky) * KW + kx;
        T* dst = col + row * col_ld + col_off;
        for (int oh = 0; oh < OH; ++oh, dst += OW) {
          const int ih = oh * stride - pad + ky;
          if (ih < 0 || ih >= H) {
            std::memset(dst, 0, sizeof(T) * OW);
            continue;
          }
          const T* srow = x + (static_cast<int64_t>(c) * H + ih) * W;
          if (stride == 1) {
            const int lo = std::max(0, pad - kx);
            const int hi = std::min(OW, W + pad - kx);
            if (lo > 0) std::memset(dst, 0, sizeof(T) * lo);
            if (hi > lo) std::memcpy(dst + lo, srow + lo - pad + kx, sizeof(T) * (hi - lo));
            if (hi < OW) std::memset(dst + hi, 0, sizeof(T) * (OW - hi));
          } else {
            for (int ow = 0; ow < OW; ++ow) {
              const int iw = ow * stride - pad + kx;
              dst[ow] = (iw >= 0 && iw < W) ? srow[iw] : T(0);
            }
          }
        }
      }
    }
  }
}

// Scatter-add a column block back to one image.
template <typename T>
void col2im_add(const T* col, int C, int H, int W, int KH, int KW, int stride, int pad, T* dx,
                int64_t col_ld, int64_t col_off) {
  const int OH = (H + 2 * pad - KH) / stride + 1;
  const int OW = (W + 2 * pad - KW) / stride + 1;
  for (int c = 0; c < C; ++c) {
    for (int ky = 0; ky < KH; ++ky) {
      for (int kx = 0; kx < KW; ++kx) {
        const int row = (c * KH + ky) * KW + kx;
        const T* src = col + row * col_ld + col_off;
        for (int oh = 0; oh < OH; ++oh, src += OW) {
          const int ih = oh * stride - pad + ky;
          if (ih < 0 || ih >= H) continue;
          T* drow = dx + (static_cast<int64_t>(c) * H + ih) * W;
          for (int ow = 0; ow < OW; ++ow) {
            const int iw = ow * stride - pad + kx;
            if (iw >= 0 && iw < W) drow[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("add", a, b);
  Tensor<T> y(a.shape());
  kernels::add(a.data(), b.data(), y.data(), y.numel());
  g.finish("add", {a, b}, y, [a, b, y]() mutable {
    const T* gy = y.grad_data();
    if (wants_grad(a)) kernels::axpy(T(1), gy, a.grad(), a.numel());
    if (wants_grad(b)) kernels::axpy(T(1), gy, b.grad(), b.numel());
  });
  return y;
}

template <typename T>
Tensor<T> sub(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("sub", a, b);
  Tensor<T> y(a.shape());
  kernels::sub(a.data(), b.data(), y.data(), y.numel());
  g.finish("sub", {a, b}, y, [a, b, y]() mutable {
    const T* gy = y.grad_data();
    if (wants_grad(a)) kernels::axpy(T(1), gy, a.grad(), a.numel());
    if (wants_grad(b)) kernels::axpy(T(-1), gy, b.grad(), b.numel());
  });
  return y;
}

template <typename T>
Tensor<T> mul(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape("mul", a, b);
  Tensor<T> y(a.shape());
  kernels::mul(a.data(), b.data(), y.data(), y.numel());
  g.finish("mul", {a, b}, y, [a, b, y]() mutable {
    const T* gy = y.grad_data();
    const int64_t n = y.numel();
    if (wants_grad(a)) {
      T* da = a.grad();
      const T* bv = b.data();
      for (int64_t i = 0; i < n; ++i) da[i] += gy[i] * bv[i];
    }
    if (wants_grad(b)) {
      T* db = b.grad();
      const T* av = a.data();
      for (int64_t i = 0; i < n; ++i) db[i] += gy[i] * av[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> scale(Graph<T>& g, const Tensor<T>& x, T alpha) {
  Tensor<T> y(x.shape());
  kernels::scale(x.data(), alpha, y.data(), y.numel());
  g.finish("scale", {x}, y, [x, y, alpha]() mutable {
    if (wants_grad(x)) kernels::axpy(alpha, y.grad_data(), x.grad(), x.numel());
  });
  return y;
}

template <typename T>
Tensor<T> add_scalar(Graph<T>& g, const Tensor<T>& x, T c) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = xv[i] + c;
  g.finish("add_scalar", {x}, y, [x, y]() mutable {
    if (wants_grad(x)) kernels::axpy(T(1), y.grad_data(), x.grad(), x.numel());
  });
  return y;
}

template <typename T>
Tensor<T> relu(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  kernels::relu(x.data(), y.data(), y.numel());
  g.finish("relu", {x}, y, [x, y]() mutable {
    if (wants_grad(x)) kernels::relu_bwd(x.data(), y.grad_data(), x.grad(), x.numel());
  });
  return y;
}

template <typename T>
Tensor<T> tanh_op(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = std::tanh(xv[i]);
  g.finish("tanh", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* yv = y.data();
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] += gy[i] * (T(1) - yv[i] * yv[i]);
  });
  return y;
}

template <typename T>
Tensor<T> sigmoid(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = T(1) / (T(1) + std::exp(-xv[i]));
  g.finish("sigmoid", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* yv = y.data();
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] += gy[i] * yv[i] * (T(1) - yv[i]);
  });
  return y;
}

template <typename T>
Tensor<T> log_op(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = std::log(xv[i]);
  g.finish("log", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* xv = x.data();
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] += gy[i] / xv[i];
  });
  return y;
}

template <typename T>
Tensor<T> abs_op(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = std::abs(xv[i]);
  g.finish("abs", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* xv = x.data();
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i)
      dx[i] += xv[i] > T(0) ? gy[i] : (xv[i] < T(0) ? -gy[i] : T(0));
  });
  return y;
}

// Gradient passes only strictly inside (lo, hi).
template <typename T>
Tensor<T> clamp(Graph<T>& g, const Tensor<T>& x, T lo, T hi) {
  Tensor<T> y(x.shape());
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t i = 0; i < x.numel(); ++i) yv[i] = std::min(hi, std::max(lo, xv[i]));
  g.finish("clamp", {x}, y, [x, y, lo, hi]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* xv = x.data();
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i)
      if (xv[i] > lo && xv[i] < hi) dx[i] += gy[i];
  });
  return y;
}

// Identity forward, -lambda * upstream backward.
template <typename T>
Tensor<T> gradient_reversal(Graph<T>& g, const Tensor<T>& x, T lambda) {
  Tensor<T> y(x.shape());
  std::memcpy(y.data(), x.data(), sizeof(T) * x.numel());
  g.finish("gradient_reversal", {x}, y, [x, y, lambda]() mutable {
    if (wants_grad(x)) kernels::axpy(-lambda, y.grad_data(), x.grad(), x.numel());
  });
  return y;
}

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y({1});
  y.data()[0] = kernels::sum(x.data(), x.numel());
  g.finish("sum_all", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T gy = y.grad_data()[0];
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] += gy;
  });
  return y;
}

template <typename T>
Tensor<T> mean_all(Graph<T>& g, const Tensor<T>& x) {
  Tensor<T> y({1});
  y.data()[0] = kernels::sum(x.data(), x.numel()) / static_cast<T>(x.numel());
  g.finish("mean_all", {x}, y, [x, y]() mutable {
    if (!wants_grad(x)) return;
    const T gy = y.grad_data()[0] / static_cast<T>(x.numel());
    T* dx = x.grad();
    for (int64_t i = 0; i < x.numel(); ++i) dx[i] += gy;
  });
  return y;
}

template <typename T>
Tensor<T> reshape(Graph<T>& g, const Tensor<T>& x, std::vector<int> shape) {
  Tensor<T> y(std::move(shape));
  detail::require(y.numel() == x.numel(), "reshape: element count mismatch " +
                                              shape_string(x.shape()) + " -> " + shape_string(y.shape()));
  std::memcpy(y.data(), x.data(), sizeof(T) * x.numel());
  g.finish("reshape", {x}, y, [x, y]() mutable {
    if (wants_grad(x)) kernels::axpy(T(1), y.grad_data(), x.grad(), x.numel());
  });
  return y;
}

template <typename T>
Tensor<T> concat_channels(Graph<T>& g, const Tensor<T>& a, const Tensor<T>& b) {
  detail::require(a.rank() == 4 && b.rank() == 4, "concat_channels: expected NCHW inputs");
  detail::require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
                  "concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                      shape_string(b.shape()));
  const int n = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
  Tensor<T> y({n, ca + cb, a.dim(2), a.dim(3)});
  for (int i = 0; i < n; ++i) {
    std::memcpy(y.data() + static_cast<int64_t>(i) * (ca + cb) * hw,
                a.data() + static_cast<int64_t>(i) * ca * hw, sizeof(T) * ca * hw);
    std::memcpy(y.data() + (static_cast<int64_t>(i) * (ca + cb) + ca) * hw,
                b.data() + static_cast<int64_t>(i) * cb * hw, sizeof(T) * cb * hw);
  }
  g.finish("concat_channels", {a, b}, y, [a, b, y, n, ca, cb, hw]() mutable {
    const T* gy = y.grad_data();
    for (int i = 0; i < n; ++i) {
      if (wants_grad(a))
        kernels::axpy(T(1), gy + static_cast<int64_t>(i) * (ca + cb) * hw,
                      a.grad() + static_cast<int64_t>(i) * ca * hw, static_cast<int64_t>(ca) * hw);
      if (wants_grad(b))
        kernels::axpy(T(1), gy + (static_cast<int64_t>(i) * (ca + cb) + ca) * hw,
                      b.grad() + static_cast<int64_t>(i) * cb * hw, static_cast<int64_t>(cb) * hw);
    }
  });
  return y;
}

// Gather along dim 0; duplicates in idx accumulate in backward.
template <typename T>
Tensor<T> select_rows(Graph<T>& g, const Tensor<T>& x, std::vector<int> idx) {
  detail::require(x.rank() >= 1, "select_rows: rank-0 input");
  detail::require(!idx.empty(), "select_rows: empty index list");
  const int rows = x.dim(0);
  const int64_t rowlen = x.numel() / rows;
  for (int i : idx)
    detail::require(i >= 0 && i < rows,
                    "select_rows: index " + std::to_string(i) + " out of range [0," + std::to_string(rows) + ")");
  std::vector<int> yshape = x.shape();
  yshape[0] = static_cast<int>(idx.size());
  Tensor<T> y(yshape);
  for (size_t i = 0; i < idx.size(); ++i)
    std::memcpy(y.data() + i * rowlen, x.data() + idx[i] * rowlen, sizeof(T) * rowlen);
  g.finish("select_rows", {x}, y, [x, y, idx = std::move(idx), rowlen]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    for (size_t i = 0; i < idx.size(); ++i)
      kernels::axpy(T(1), gy + i * rowlen, dx + idx[i] * rowlen, rowlen);
  });
  return y;
}

template <typename T>
Tensor<T> slice_cols(Graph<T>& g, const Tensor<T>& x, int lo, int len) {
  detail::require(x.rank() == 2, "slice_cols: expected a matrix, got " + shape_string(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  detail::require(lo >= 0 && len > 0 && lo + len <= cols,
                  "slice_cols: range [" + std::to_string(lo) + "," + std::to_string(lo + len) +
                      ") outside " + shape_string(x.shape()));
  Tensor<T> y({rows, len});
  for (int r = 0; r < rows; ++r)
    std::memcpy(y.data() + static_cast<int64_t>(r) * len,
                x.data() + static_cast<int64_t>(r) * cols + lo, sizeof(T) * len);
  g.finish("slice_cols", {x}, y, [x, y, lo, len, rows, cols]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    for (int r = 0; r < rows; ++r)
      kernels::axpy(T(1), gy + static_cast<int64_t>(r) * len,
                    dx + static_cast<int64_t>(r) * cols + lo, len);
  });
  return y;
}

// y[g] = mean of rows of x with labels[r] == g. Every group must be populated.
template <typename T>
Tensor<T> group_mean_rows(Graph<T>& g, const Tensor<T>& x, const std::vector<int>& labels,
                          int groups) {
  detail::require(x.rank() == 2, "group_mean_rows: expected a matrix");
  detail::require(static_cast<int>(labels.size()) == x.dim(0),
                  "group_mean_rows: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(x.dim(0)) + " rows");
  const int rows = x.dim(0), cols = x.dim(1);
  std::vector<int> count(groups, 0);
  for (int l : labels) {
    detail::require(l >= 0 && l < groups, "group_mean_rows: label " + std::to_string(l) + " out of range");
    ++count[l];
  }
  for (int c = 0; c < groups; ++c)
    detail::require(count[c] > 0, "group_mean_rows: class " + std::to_string(c) + " has no members");
  Tensor<T> y({groups, cols});
  for (int r = 0; r < rows; ++r)
    kernels::axpy(T(1), x.data() + static_cast<int64_t>(r) * cols,
                  y.data() + static_cast<int64_t>(labels[r]) * cols, cols);
  for (int c = 0; c < groups; ++c)
    kernels::scale(y.data() + static_cast<int64_t>(c) * cols, T(1) / static_cast<T>(count[c]),
                   y.data() + static_cast<int64_t>(c) * cols, cols);
  g.finish("group_mean_rows", {x}, y, [x, y, labels, count, rows, cols]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    for (int r = 0; r < rows; ++r)
      kernels::axpy(T(1) / static_cast<T>(count[labels[r]]),
                    gy + static_cast<int64_t>(labels[r]) * cols,
                    dx + static_cast<int64_t>(r) * cols, cols);
  });
  return y;
}

// ---------------------------------------------------------------------------
// Linear and convolution
// ---------------------------------------------------------------------------

// y(B x Out) = x(B x In) * w(Out x In)^T + b
template <typename T>
Tensor<T> linear(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  detail::require(x.rank() == 2 && w.rank() == 2, "linear: expected matrices");
  detail::require(x.dim(1) == w.dim(1), "linear: input width " + shape_string(x.shape()) +
                                            " does not match weight " + shape_string(w.shape()));
  const int rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (b.defined())
    detail::require(b.numel() == out, "linear: bias " + shape_string(b.shape()) + " for " +
                                          std::to_string(out) + " outputs");
  Tensor<T> y({rows, out});
  kernels::gemm_nt(rows, out, in, x.data(), w.data(), y.data(), false);
  if (b.defined()) {
    const T* bv = b.data();
    for (int r = 0; r < rows; ++r) {
      T* yr = y.data() + static_cast<int64_t>(r) * out;
      for (int o = 0; o < out; ++o) yr[o] += bv[o];
    }
  }
  g.finish("linear", {x, w, b}, y, [x, w, b, y, rows, in, out]() mutable {
    const T* gy = y.grad_data();
    if (wants_grad(x)) kernels::gemm_nn(rows, in, out, gy, w.data(), x.grad(), true);
    if (wants_grad(w)) {
      auto& gyt = detail::scratch<T>(0);
      gyt.resize(static_cast<size_t>(rows) * out);
      detail::transpose(gy, rows, out, gyt.data());
      kernels::gemm_nn(out, in, rows, gyt.data(), x.data(), w.grad(), true);
    }
    if (wants_grad(b)) {
      T* db = b.grad();
      for (int r = 0; r < rows; ++r) {
        const T* gr = gy + static_cast<int64_t>(r) * out;
        for (int o = 0; o < out; ++o) db[o] += gr[o];
      }
    }
  });
  return y;
}

// y = conv(x, w) + b, NCHW/OIHW, square stride/pad. Batches share one column
// matrix, chunked to bound scratch memory; backward rebuilds the columns.
template <typename T>
Tensor<T> conv2d(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                 int stride = 1, int pad = 0) {
  detail::require(x.rank() == 4 && w.rank() == 4,
                  "conv2d: expected NCHW input and OIHW weight, got " + shape_string(x.shape()) +
                      " and " + shape_string(w.shape()));
  detail::require(x.dim(1) == w.dim(1), "conv2d: channel mismatch, input " + shape_string(x.shape()) +
                                            " vs weight " + shape_string(w.shape()));
  detail::require(stride >= 1, "conv2d: stride must be >= 1");
  detail::require(pad >= 0, "conv2d: pad must be >= 0");
  const int n = x.dim(0), ci = x.dim(1), h = x.dim(2), wdt = x.dim(3);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wdt + 2 * pad - kw) / stride + 1;
  detail::require(h + 2 * pad >= kh && wdt + 2 * pad >= kw,
                  "conv2d: kernel " + shape_string(w.shape()) + " larger than padded input " +
                      shape_string(x.shape()));
  if (b.defined())
    detail::require(b.numel() == co, "conv2d: bias " + shape_string(b.shape()) + " for " +
                                         std::to_string(co) + " output channels");
  const int k = ci * kh * kw;
  const int64_t ohw = static_cast<int64_t>(oh) * ow;
  // chunk so the column matrix stays under ~48 MB
  const int64_t budget = 48ll << 20;
  int chunk = static_cast<int>(std::max<int64_t>(1, budget / (sizeof(T) * k * ohw)));
  chunk = std::min(chunk, n);

  Tensor<T> y({n, co, oh, ow});
  auto& col = detail::scratch<T>(0);
  auto& ytmp = detail::scratch<T>(1);
  for (int n0 = 0; n0 < n; n0 += chunk) {
    const int bn = std::min(chunk, n - n0);
    const int64_t cols = bn * ohw;
    col.resize(static_cast<size_t>(k) * cols);
    ytmp.resize(static_cast<size_t>(co) * cols);
    for (int i = 0; i < bn; ++i)
      detail::im2col(x.data() + static_cast<int64_t>(n0 + i) * ci * h * wdt, ci, h, wdt, kh, kw,
                     stride, pad, col.data(), cols, i * ohw);
    kernels::gemm_nn(co, static_cast<int>(cols), k, w.data(), col.data(), ytmp.data(), false);
    for (int i = 0; i < bn; ++i)
      for (int o = 0; o < co; ++o)
        std::memcpy(y.data() + ((static_cast<int64_t>(n0 + i) * co) + o) * ohw,
                    ytmp.data() + o * cols + i * ohw, sizeof(T) * ohw);
  }
  if (b.defined()) {
    const T* bv = b.data();
    for (int i = 0; i < n; ++i)
      for (int o = 0; o < co; ++o) {
        T* yo = y.data() + ((static_cast<int64_t>(i) * co) + o) * ohw;
        const T bo = bv[o];
        for (int64_t p = 0; p < ohw; ++p) yo[p] += bo;
      }
  }

  g.finish("conv2d", {x, w, b}, y,
           [x, w, b, y, n, ci, h, wdt, co, kh, kw, oh, ow, stride, pad, k, ohw, chunk]() mutable {
    const T* gy = y.grad_data();
    const bool need_dx = wants_grad(x);
    const bool need_dw = wants_grad(w);
    auto& col = detail::scratch<T>(0);
    auto& gycat = detail::scratch<T>(1);
    auto& dcol = detail::scratch<T>(2);
    auto& wt = detail::scratch<T>(3);
    if (need_dx) {
      wt.resize(static_cast<size_t>(k) * co);
      detail::transpose(w.data(), co, k, wt.data());
    }
    for (int n0 = 0; n0 < n; n0 += chunk) {
      const int bn = std::min(chunk, n - n0);
      const int64_t cols = bn * ohw;
      gycat.resize(static_cast<size_t>(co) * cols);
      for (int i = 0; i < bn; ++i)
        for (int o = 0; o < co; ++o)
          std::memcpy(gycat.data() + o * cols + i * ohw,
                      gy + ((static_cast<int64_t>(n0 + i) * co) + o) * ohw, sizeof(T) * ohw);
      if (need_dw) {
        col.resize(static_cast<size_t>(k) * cols);
        for (int i = 0; i < bn; ++i)
          detail::im2col(x.data() + static_cast<int64_t>(n0 + i) * ci * h * wdt, ci, h, wdt, kh,
                         kw, stride, pad, col.data(), cols, i * ohw);
        kernels::gemm_nt(co, k, static_cast<int>(cols), gycat.data(), col.data(), w.grad(), true);
      }
      if (need_dx) {
        dcol.resize(static_cast<size_t>(k) * cols);
        kernels::gemm_nn(k, static_cast<int>(cols), co, wt.data(), gycat.data(), dcol.data(), false);
        for (int i = 0; i < bn; ++i)
          detail::col2im_add(dcol.data(), ci, h, wdt, kh, kw, stride, pad,
                             x.grad() + static_cast<int64_t>(n0 + i) * ci * h * wdt, cols, i * ohw);
      }
    }
    if (wants_grad(b)) {
      T* db = b.grad();
      for (int i = 0; i < n; ++i)
        for (int o = 0; o < co; ++o)
          db[o] += kernels::sum(gy + ((static_cast<int64_t>(i) * co) + o) * ohw, ohw);
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Pooling and resampling
// ---------------------------------------------------------------------------

namespace detail {
template <typename T>
void require_divisible(const char* op, const Tensor<T>& x, int window) {
  require(window >= 1, std::string(op) + ": window must be >= 1");
  require(x.rank() == 4, std::string(op) + ": expected NCHW input, got " + shape_string(x.shape()));
  require(x.dim(2) % window == 0 && x.dim(3) % window == 0,
          std::string(op) + ": window " + std::to_string(window) + " does not divide spatial dims " +
              shape_string(x.shape()));
}
}  // namespace detail

// Window max; backward routes the full upstream gradient to the argmax cell
// (first maximum in scan order on ties).
template <typename T>
Tensor<T> max_pool2d(Graph<T>& g, const Tensor<T>& x, int window) {
  detail::require_divisible("max_pool2d", x, window);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / window, ow = w / window;
  Tensor<T> y({n, c, oh, ow});
  auto argmax = std::make_shared<std::vector<int32_t>>(y.numel());
  const T* xv = x.data();
  T* yv = y.data();
  int64_t oi = 0;
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const T* plane = xv + nc * h * w;
    for (int py = 0; py < oh; ++py)
      for (int px = 0; px < ow; ++px, ++oi) {
        T best = plane[(py * window) * w + px * window];
        int32_t besti = (py * window) * w + px * window;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx) {
            const int32_t idx = (py * window + dy) * w + px * window + dx;
            if (plane[idx] > best) {
              best = plane[idx];
              besti = idx;
            }
          }
        yv[oi] = best;
        (*argmax)[oi] = besti;
      }
  }
  g.finish("max_pool2d", {x}, y, [x, y, argmax, n, c, h, w]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    const int64_t planes = static_cast<int64_t>(n) * c;
    const int64_t opix = y.numel() / planes;
    for (int64_t nc = 0; nc < planes; ++nc) {
      T* dplane = dx + nc * h * w;
      const T* gplane = gy + nc * opix;
      const int32_t* am = argmax->data() + nc * opix;
      for (int64_t i = 0; i < opix; ++i) dplane[am[i]] += gplane[i];
    }
  });
  return y;
}

template <typename T>
Tensor<T> avg_pool2d(Graph<T>& g, const Tensor<T>& x, int window) {
  detail::require_divisible("avg_pool2d", x, window);
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = h / window, ow = w / window;
  const T norm = T(1) / static_cast<T>(window * window);
  Tensor<T> y({n, c, oh, ow});
  const T* xv = x.data();
  T* yv = y.data();
  int64_t oi = 0;
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const T* plane = xv + nc * h * w;
    for (int py = 0; py < oh; ++py)
      for (int px = 0; px < ow; ++px, ++oi) {
        T acc = 0;
        for (int dy = 0; dy < window; ++dy)
          for (int dx = 0; dx < window; ++dx) acc += plane[(py * window + dy) * w + px * window + dx];
        yv[oi] = acc * norm;
      }
  }
  g.finish("avg_pool2d", {x}, y, [x, y, window, n, c, h, w, norm]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    const int oh = h / window, ow = w / window;
    int64_t oi = 0;
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      T* dplane = dx + nc * h * w;
      for (int py = 0; py < oh; ++py)
        for (int px = 0; px < ow; ++px, ++oi) {
          const T gv = gy[oi] * norm;
          for (int dy = 0; dy < window; ++dy)
            for (int dx2 = 0; dx2 < window; ++dx2)
              dplane[(py * window + dy) * w + px * window + dx2] += gv;
        }
    }
  });
  return y;
}

// Doubles spatial dims by replication.
template <typename T>
Tensor<T> upsample_nearest2(Graph<T>& g, const Tensor<T>& x) {
  detail::require(x.rank() == 4, "upsample_nearest2: expected NCHW input");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<T> y({n, c, 2 * h, 2 * w});
  const T* xv = x.data();
  T* yv = y.data();
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const T* plane = xv + nc * h * w;
    T* oplane = yv + nc * 4 * h * w;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        const T v = plane[i * w + j];
        T* base = oplane + (2 * i) * (2 * w) + 2 * j;
        base[0] = v;
        base[1] = v;
        base[2 * w] = v;
        base[2 * w + 1] = v;
      }
  }
  g.finish("upsample_nearest2", {x}, y, [x, y, n, c, h, w]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      T* dplane = dx + nc * h * w;
      const T* gplane = gy + nc * 4 * h * w;
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const T* base = gplane + (2 * i) * (2 * w) + 2 * j;
          dplane[i * w + j] += base[0] + base[1] + base[2 * w] + base[2 * w + 1];
        }
    }
  });
  return y;
}

// (N,C,H,W) -> (N,C) spatial mean.
template <typename T>
Tensor<T> global_avg_pool(Graph<T>& g, const Tensor<T>& x) {
  detail::require(x.rank() == 4, "global_avg_pool: expected NCHW input");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y({n, c});
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc)
    y.data()[nc] = kernels::sum(x.data() + nc * hw, hw) / static_cast<T>(hw);
  g.finish("global_avg_pool", {x}, y, [x, y, hw]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    T* dx = x.grad();
    for (int64_t nc = 0; nc < y.numel(); ++nc) {
      const T gv = gy[nc] / static_cast<T>(hw);
      T* span = dx + nc * hw;
      for (int64_t i = 0; i < hw; ++i) span[i] += gv;
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// Per-(n,c) standardization over H*W, no affine part.
template <typename T>
Tensor<T> instance_norm(Graph<T>& g, const Tensor<T>& x, T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "instance_norm: expected NCHW input, got " + shape_string(x.shape()));
  const int64_t planes = static_cast<int64_t>(x.dim(0)) * x.dim(1);
  const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y(x.shape());
  auto mean = std::make_shared<std::vector<T>>(planes);
  auto inv = std::make_shared<std::vector<T>>(planes);
  for (int64_t p = 0; p < planes; ++p) {
    const T* xs = x.data() + p * hw;
    const T m = kernels::sum(xs, hw) / static_cast<T>(hw);
    T var = kernels::sumsq(xs, hw) / static_cast<T>(hw) - m * m;
    if (var < T(0)) var = T(0);
    const T iv = T(1) / std::sqrt(var + eps);
    (*mean)[p] = m;
    (*inv)[p] = iv;
    T* ys = y.data() + p * hw;
    for (int64_t i = 0; i < hw; ++i) ys[i] = (xs[i] - m) * iv;
  }
  g.finish("instance_norm", {x}, y, [x, y, mean, inv, planes, hw]() mutable {
    if (!wants_grad(x)) return;
    const T* gy = y.grad_data();
    const T* yv = y.data();
    T* dx = x.grad();
    for (int64_t p = 0; p < planes; ++p) {
      const T* gs = gy + p * hw;
      const T* ys = yv + p * hw;
      T s1 = 0, s2 = 0;
      for (int64_t i = 0; i < hw; ++i) {
        s1 += gs[i];
        s2 += gs[i] * ys[i];
      }
      s1 /= static_cast<T>(hw);
      s2 /= static_cast<T>(hw);
      const T iv = (*inv)[p];
      T* ds = dx + p * hw;
      for (int64_t i = 0; i < hw; ++i) ds[i] += iv * (gs[i] - s1 - ys[i] * s2);
    }
  });
  return y;
}

// y[n,c,:] = x[n,c,:] * s[n,c] + b[n,c] (AdaIN affine applied per sample).
template <typename T>
Tensor<T> scale_shift_channels(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& s,
                               const Tensor<T>& b) {
  detail::require(x.rank() == 4, "scale_shift_channels: expected NCHW input");
  const int n = x.dim(0), c = x.dim(1);
  detail::require(s.rank() == 2 && s.dim(0) == n && s.dim(1) == c,
                  "scale_shift_channels: scale " + shape_string(s.shape()) + " for input " +
                      shape_string(x.shape()));
  detail::require_same_shape("scale_shift_channels", s, b);
  const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  Tensor<T> y(x.shape());
  for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
    const T sv = s.data()[nc], bv = b.data()[nc];
    const T* xs = x.data() + nc * hw;
    T* ys = y.data() + nc * hw;
    for (int64_t i = 0; i < hw; ++i) ys[i] = xs[i] * sv + bv;
  }
  g.finish("scale_shift_channels", {x, s, b}, y, [x, s, b, y, n, c, hw]() mutable {
    const T* gy = y.grad_data();
    for (int64_t nc = 0; nc < static_cast<int64_t>(n) * c; ++nc) {
      const T* gs = gy + nc * hw;
      if (wants_grad(x)) kernels::axpy(s.data()[nc], gs, x.grad() + nc * hw, hw);
      if (wants_grad(s)) {
        const T* xs = x.data() + nc * hw;
        T acc = 0;
        for (int64_t i = 0; i < hw; ++i) acc += gs[i] * xs[i];
        s.grad()[nc] += acc;
      }
      if (wants_grad(b)) b.grad()[nc] += kernels::sum(gs, hw);
    }
  });
  return y;
}

// Batch norm over (N,H,W) per channel. Training mode normalizes with batch
// statistics and updates the running buffers in place (outside the graph);
// eval mode uses the running buffers as constants.
template <typename T>
Tensor<T> batch_norm(Graph<T>& g, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, std::vector<T>& running_mean,
                     std::vector<T>& running_var, bool training, T momentum = T(0.9),
                     T eps = T(1e-5)) {
  detail::require(x.rank() == 4, "batch_norm: expected NCHW input");
  const int n = x.dim(0), c = x.dim(1);
  const int64_t hw = static_cast<int64_t>(x.dim(2)) * x.dim(3);
  detail::require(gamma.numel() == c && beta.numel() == c,
                  "batch_norm: affine params " + shape_string(gamma.shape()) + " for " +
                      std::to_string(c) + " channels");
  detail::require(static_cast<int>(running_mean.size()) == c &&
                      static_cast<int>(running_var.size()) == c,
                  "batch_norm: running stats size mismatch");
  const int64_t m = static_cast<int64_t>(n) * hw;
  Tensor<T> y(x.shape());
  auto mean = std::make_shared<std::vector<T>>(c);
  auto inv = std::make_shared<std::vector<T>>(c);
  if (training) {
    for (int ch = 0; ch < c; ++ch) {
      T s = 0, ss = 0;
      for (int i = 0; i < n; ++i) {
        const T* xs = x.data() + (static_cast<int64_t>(i) * c + ch) * hw;
        s += kernels::sum(xs, hw);
        ss += kernels::sumsq(xs, hw);
      }
      const T mu = s / static_cast<T>(m);
      T var = ss / static_cast<T>(m) - mu * mu;
      if (var < T(0)) var = T(0);
      (*mean)[ch] = mu;
      (*inv)[ch] = T(1) / std::sqrt(var + eps);
      const T unbiased = m > 1 ? var * static_cast<T>(m) / static_cast<T>(m - 1) : var;
      running_mean[ch] = momentum * running_mean[ch] + (T(1) - momentum) * mu;
      running_var[ch] = momentum * running_var[ch] + (T(1) - momentum) * unbiased;
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      (*mean)[ch] = running_mean[ch];
      (*inv)[ch] = T(1) / std::sqrt(running_var[ch] + eps);
    }
  }
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const T mu = (*mean)[ch], iv = (*inv)[ch];
      const T gv = gamma.data()[ch], bv = beta.data()[ch];
      const T* xs = x.data() + (static_cast<int64_t>(i) * c + ch) * hw;
      T* ys = y.data() + (static_cast<int64_t>(i) * c + ch) * hw;
      for (int64_t p = 0; p < hw; ++p) ys[p] = (xs[p] - mu) * iv * gv + bv;
    }
  g.finish("batch_norm", {x, gamma, beta}, y,
           [x, gamma, beta, y, mean, inv, training, n, c, hw, m]() mutable {
    const T* gy = y.grad_data();
    for (int ch = 0; ch < c; ++ch) {
      const T mu = (*mean)[ch], iv = (*inv)[ch], gv = gamma.data()[ch];
      // sums of g and g*xhat over the channel
      T s1 = 0, s2 = 0;
      for (int i = 0; i < n; ++i) {
        const T* gs = gy + (static_cast<int64_t>(i) * c + ch) * hw;
        const T* xs = x.data() + (static_cast<int64_t>(i) * c + ch) * hw;
        for (int64_t p = 0; p < hw; ++p) {
          s1 += gs[p];
          s2 += gs[p] * (xs[p] - mu) * iv;
        }
      }
      if (wants_grad(gamma)) gamma.grad()[ch] += s2;
      if (wants_grad(beta)) beta.grad()[ch] += s1;
      if (wants_grad(x)) {
        for (int i = 0; i < n; ++i) {
          const T* gs = gy + (static_cast<int64_t>(i) * c + ch) * hw;
          const T* xs = x.data() + (static_cast<int64_t>(i) * c + ch) * hw;
          T* ds = x.grad() + (static_cast<int64_t>(i) * c + ch) * hw;
          if (training) {
            const T k1 = s1 / static_cast<T>(m), k2 = s2 / static_cast<T>(m);
            for (int64_t p = 0; p < hw; ++p) {
              const T xhat = (xs[p] - mu) * iv;
              ds[p] += gv * iv * (gs[p] - k1 - xhat * k2);
            }
          } else {
            for (int64_t p = 0; p < hw; ++p) ds[p] += gs[p] * gv * iv;
          }
        }
      }
    }
  });
  return y;
}

// ---------------------------------------------------------------------------
// Metric / loss heads
// ---------------------------------------------------------------------------

// logits[i,c] = -||q_i - p_c||^2
template <typename T>
Tensor<T> neg_sqdist(Graph<T>& g, const Tensor<T>& q, const Tensor<T>& p) {
  detail::require(q.rank() == 2 && p.rank() == 2 && q.dim(1) == p.dim(1),
                  "neg_sqdist: incompatible shapes " + shape_string(q.shape()) + " vs " +
                      shape_string(p.shape()));
  const int nq = q.dim(0), nc = p.dim(0), d = q.dim(1);
  Tensor<T> y({nq, nc});
  for (int i = 0; i < nq; ++i) {
    const T* qi = q.data() + static_cast<int64_t>(i) * d;
    for (int c = 0; c < nc; ++c) {
      const T* pc = p.data() + static_cast<int64_t>(c) * d;
      T acc = 0;
      for (int k = 0; k < d; ++k) {
        const T diff = qi[k] - pc[k];
        acc += diff * diff;
      }
      y.data()[static_cast<int64_t>(i) * nc + c] = -acc;
    }
  }
  g.finish("neg_sqdist", {q, p}, y, [q, p, y, nq, nc, d]() mutable {
    const T* gy = y.grad_data();
    for (int i = 0; i < nq; ++i) {
      const T* qi = q.data() + static_cast<int64_t>(i) * d;
      for (int c = 0; c < nc; ++c) {
        const T gv = gy[static_cast<int64_t>(i) * nc + c];
        if (gv == T(0)) continue;
        const T* pc = p.data() + static_cast<int64_t>(c) * d;
        if (wants_grad(q)) {
          T* dq = q.grad() + static_cast<int64_t>(i) * d;
          for (int k = 0; k < d; ++k) dq[k] += gv * T(-2) * (qi[k] - pc[k]);
        }
        if (wants_grad(p)) {
          T* dp = p.grad() + static_cast<int64_t>(c) * d;
          for (int k = 0; k < d; ++k) dp[k] += gv * T(2) * (qi[k] - pc[k]);
        }
      }
    }
  });
  return y;
}

// Summed cross-entropy over rows: sum_i -log softmax(logits_i)[labels_i]
template <typename T>
Tensor<T> softmax_cross_entropy_sum(Graph<T>& g, const Tensor<T>& logits,
                                    const std::vector<int>& labels) {
  detail::require(logits.rank() == 2, "softmax_cross_entropy_sum: expected a matrix of logits");
  const int rows = logits.dim(0), cols = logits.dim(1);
  detail::require(static_cast<int>(labels.size()) == rows,
                  "softmax_cross_entropy_sum: " + std::to_string(labels.size()) + " labels for " +
                      std::to_string(rows) + " rows");
  for (int l : labels)
    detail::require(l >= 0 && l < cols, "softmax_cross_entropy_sum: label " + std::to_string(l) +
                                            " out of range [0," + std::to_string(cols) + ")");
  Tensor<T> y({1});
  T loss = 0;
  for (int i = 0; i < rows; ++i) {
    const T* row = logits.data() + static_cast<int64_t>(i) * cols;
    T mx = row[0];
    for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
    T lse = 0;
    for (int c = 0; c < cols; ++c) lse += std::exp(row[c] - mx);
    loss += std::log(lse) + mx - row[labels[i]];
  }
  y.data()[0] = loss;
  g.finish("softmax_cross_entropy_sum", {logits}, y, [logits, y, labels, rows, cols]() mutable {
    if (!wants_grad(logits)) return;
    const T gv = y.grad_data()[0];
    T* dl = logits.grad();
    for (int i = 0; i < rows; ++i) {
      const T* row = logits.data() + static_cast<int64_t>(i) * cols;
      T mx = row[0];
      for (int c = 1; c < cols; ++c) mx = std::max(mx, row[c]);
      T lse = 0;
      for (int c = 0; c < cols; ++c) lse += std::exp(row[c] - mx);
      T* drow = dl + static_cast<int64_t>(i) * cols;
      for (int c = 0; c < cols; ++c) {
        const T p = std::exp(row[c] - mx) / lse;
        drow[c] += gv * (p - (c == labels[i] ? T(1) : T(0)));
      }
    }
  });
  return y;
}

// Summed binary cross-entropy over probability scores with clamping; the
// gradient vanishes on clamped entries.
template <typename T>
Tensor<T> binary_cross_entropy_sum(Graph<T>& g, const Tensor<T>& scores,
                                   const std::vector<int>& flags, T eps = T(1e-7)) {
  detail::require(scores.numel() == static_cast<int64_t>(flags.size()),
                  "binary_cross_entropy_sum: " + std::to_string(flags.size()) + " flags for " +
                      std::to_string(scores.numel()) + " scores");
  detail::require(!flags.empty(), "binary_cross_entropy_sum: empty pair batch");
  Tensor<T> y({1});
  const T* sv = scores.data();
  T loss = 0;
  for (size_t i = 0; i < flags.size(); ++i) {
    const T s = std::min(T(1) - eps, std::max(eps, sv[i]));
    loss -= flags[i] ? std::log(s) : std::log(T(1) - s);
  }
  y.data()[0] = loss;
  g.finish("binary_cross_entropy_sum", {scores}, y, [scores, y, flags, eps]() mutable {
    if (!wants_grad(scores)) return;
    const T gv = y.grad_data()[0];
    const T* sv = scores.data();
    T* ds = scores.grad();
    for (size_t i = 0; i < flags.size(); ++i) {
      if (sv[i] <= eps || sv[i] >= T(1) - eps) continue;  // clamped: no gradient
      ds[i] += gv * (flags[i] ? -T(1) / sv[i] : T(1) / (T(1) - sv[i]));
    }
  });
  return y;
}

}  // namespace dfr::ops
