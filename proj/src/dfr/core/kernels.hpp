#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>

#include "dfr/core/simd.hpp"

// Arithmetic inner loops. Every kernel has a scalar reference implementation
// (the templates below, which are also the float64 path used by gradient
// checks) and the hot float32 ones have AVX2 variants selected at runtime.
// Scalar and AVX2 GEMM may differ in accumulation order, so cross-backend
// comparisons are tolerance-based; within one backend results are bit-stable.

namespace dfr::kernels {

// ---------------------------------------------------------------------------
// Scalar reference kernels
// ---------------------------------------------------------------------------

// C(m x n) = A(m x k) * B(k x n), all row-major packed. accumulate adds to C.
template <typename T>
void gemm_nn_ref(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + static_cast<int64_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C(m x n) = A(m x k) * B(n x k)^T: rows of A dotted with rows of B.
template <typename T>
void gemm_nt_ref(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<int64_t>(i) * k;
    T* crow = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<int64_t>(j) * k;
      T acc = 0;
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] = accumulate ? crow[j] + acc : acc;
    }
  }
}

template <typename T>
void add_ref(const T* a, const T* b, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}

template <typename T>
void sub_ref(const T* a, const T* b, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}

template <typename T>
void mul_ref(const T* a, const T* b, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}

// y += alpha * x
template <typename T>
void axpy_ref(T alpha, const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
void scale_ref(const T* x, T alpha, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = alpha * x[i];
}

template <typename T>
void relu_ref(const T* x, T* y, int64_t n) {
  for (int64_t i = 0; i < n; ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
}

// dx += g where x > 0
template <typename T>
void relu_bwd_ref(const T* x, const T* g, T* dx, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (x[i] > T(0)) dx[i] += g[i];
}

template <typename T>
T sum_ref(const T* x, int64_t n) {
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

template <typename T>
T sumsq_ref(const T* x, int64_t n) {
  T acc = 0;
  for (int64_t i = 0; i < n; ++i) acc += x[i] * x[i];
  return acc;
}

template <typename T>
bool has_nonfinite_ref(const T* x, int64_t n) {
  for (int64_t i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Dispatched float32 entry points (scalar or AVX2 behind a runtime switch;
// gemm additionally splits columns across num_threads() workers)
// ---------------------------------------------------------------------------

void sgemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void sgemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void sadd(const float* a, const float* b, float* y, int64_t n);
void ssub(const float* a, const float* b, float* y, int64_t n);
void smul(const float* a, const float* b, float* y, int64_t n);
void saxpy(float alpha, const float* x, float* y, int64_t n);
void sscale(const float* x, float alpha, float* y, int64_t n);
void srelu(const float* x, float* y, int64_t n);
void srelu_bwd(const float* x, const float* g, float* dx, int64_t n);
float ssum(const float* x, int64_t n);
float ssumsq(const float* x, int64_t n);
bool shas_nonfinite(const float* x, int64_t n);

// AVX2 implementations (defined only in the AVX2 translation unit). The NN
// variant takes leading dimensions so the dispatcher can hand it a column
// block of a wider matrix; A rows are always packed (lda = k).
void sgemm_nn_avx2(int m, int n, int k, const float* a, const float* b, int ldb, float* c,
                   int ldc, bool accumulate);
void sgemm_nt_avx2(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate);
void sadd_avx2(const float* a, const float* b, float* y, int64_t n);
void ssub_avx2(const float* a, const float* b, float* y, int64_t n);
void smul_avx2(const float* a, const float* b, float* y, int64_t n);
void saxpy_avx2(float alpha, const float* x, float* y, int64_t n);
void sscale_avx2(const float* x, float alpha, float* y, int64_t n);
void srelu_avx2(const float* x, float* y, int64_t n);
void srelu_bwd_avx2(const float* x, const float* g, float* dx, int64_t n);
float ssum_avx2(const float* x, int64_t n);
float ssumsq_avx2(const float* x, int64_t n);
bool shas_nonfinite_avx2(const float* x, int64_t n);

// ---------------------------------------------------------------------------
// Type-generic wrappers: float routes through the dispatcher, other types use
// the reference path directly.
// ---------------------------------------------------------------------------

template <typename T>
void gemm_nn(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  if constexpr (std::is_same_v<T, float>)
    sgemm_nn(m, n, k, a, b, c, accumulate);
  else
    gemm_nn_ref(m, n, k, a, b, c, accumulate);
}

template <typename T>
void gemm_nt(int m, int n, int k, const T* a, const T* b, T* c, bool accumulate) {
  if constexpr (std::is_same_v<T, float>)
    sgemm_nt(m, n, k, a, b, c, accumulate);
  else
    gemm_nt_ref(m, n, k, a, b, c, accumulate);
}

template <typename T>
void add(const T* a, const T* b, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) sadd(a, b, y, n); else add_ref(a, b, y, n);
}

template <typename T>
void sub(const T* a, const T* b, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) ssub(a, b, y, n); else sub_ref(a, b, y, n);
}

template <typename T>
void mul(const T* a, const T* b, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) smul(a, b, y, n); else mul_ref(a, b, y, n);
}

template <typename T>
void axpy(T alpha, const T* x, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) saxpy(alpha, x, y, n); else axpy_ref(alpha, x, y, n);
}

template <typename T>
void scale(const T* x, T alpha, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) sscale(x, alpha, y, n); else scale_ref(x, alpha, y, n);
}

template <typename T>
void relu(const T* x, T* y, int64_t n) {
  if constexpr (std::is_same_v<T, float>) srelu(x, y, n); else relu_ref(x, y, n);
}

template <typename T>
void relu_bwd(const T* x, const T* g, T* dx, int64_t n) {
  if constexpr (std::is_same_v<T, float>) srelu_bwd(x, g, dx, n); else relu_bwd_ref(x, g, dx, n);
}

template <typename T>
T sum(const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) return ssum(x, n); else return sum_ref(x, n);
}

template <typename T>
T sumsq(const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) return ssumsq(x, n); else return sumsq_ref(x, n);
}

template <typename T>
bool has_nonfinite(const T* x, int64_t n) {
  if constexpr (std::is_same_v<T, float>) return shas_nonfinite(x, n);
  else return has_nonfinite_ref(x, n);
}

}  // namespace dfr::kernels
