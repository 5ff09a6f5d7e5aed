// AVX2/FMA variants of the float32 kernels. Compiled with -mavx2 -mfma in its
// own translation unit; callers reach these only through the runtime dispatch
// in kernels.cpp, so the rest of the library stays baseline-ISA.

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cstring>
#include <vector>

#include "dfr/core/kernels.hpp"

namespace dfr::kernels {

namespace {

constexpr int MR = 6;    // micro rows
constexpr int NR = 16;   // micro cols (two YMM)
constexpr int KC = 256;  // k panel
constexpr int NC = 1024; // n panel

thread_local std::vector<float> tl_apack;
thread_local std::vector<float> tl_bpack;

// Pack a (kc x nc) block of B (leading dim ldb) into NR-wide panels,
// zero-padded to a multiple of NR lanes.
void pack_b(const float* b, int ldb, int kc, int nc, float* bp) {
  const int panels = (nc + NR - 1) / NR;
  for (int j = 0; j < panels; ++j) {
    const int j0 = j * NR;
    const int lanes = nc - j0 < NR ? nc - j0 : NR;
    float* dst = bp + static_cast<int64_t>(j) * kc * NR;
    for (int p = 0; p < kc; ++p) {
      const float* src = b + static_cast<int64_t>(p) * ldb + j0;
      float* row = dst + p * NR;
      int l = 0;
      for (; l < lanes; ++l) row[l] = src[l];
      for (; l < NR; ++l) row[l] = 0.0f;
    }
  }
}

// Pack a (mm x kc) block of A (lda = k) into MR-tall strips, zero-padded.
void pack_a(const float* a, int lda, int mm, int kc, float* ap) {
  const int strips = (mm + MR - 1) / MR;
  for (int s = 0; s < strips; ++s) {
    const int i0 = s * MR;
    const int rows = mm - i0 < MR ? mm - i0 : MR;
    float* dst = ap + static_cast<int64_t>(s) * kc * MR;
    for (int p = 0; p < kc; ++p) {
      float* col = dst + p * MR;
      int r = 0;
      for (; r < rows; ++r) col[r] = a[static_cast<int64_t>(i0 + r) * lda + p];
      for (; r < MR; ++r) col[r] = 0.0f;
    }
  }
}

// C(rows x lanes) (+)= Ap strip * Bp panel over kc. overwrite controls the
// store of the first k-block.
void micro_6x16(const float* ap, const float* bp, int kc, float* c, int ldc, int rows,
                int lanes, bool overwrite) {
  __m256 acc[MR][2];
  for (int r = 0; r < MR; ++r) {
    acc[r][0] = _mm256_setzero_ps();
    acc[r][1] = _mm256_setzero_ps();
  }
  for (int p = 0; p < kc; ++p) {
    const __m256 b0 = _mm256_loadu_ps(bp + p * NR);
    const __m256 b1 = _mm256_loadu_ps(bp + p * NR + 8);
    const float* acol = ap + p * MR;
    for (int r = 0; r < MR; ++r) {
      const __m256 av = _mm256_set1_ps(acol[r]);
      acc[r][0] = _mm256_fmadd_ps(av, b0, acc[r][0]);
      acc[r][1] = _mm256_fmadd_ps(av, b1, acc[r][1]);
    }
  }
  if (lanes == NR) {
    for (int r = 0; r < rows; ++r) {
      float* crow = c + static_cast<int64_t>(r) * ldc;
      if (overwrite) {
        _mm256_storeu_ps(crow, acc[r][0]);
        _mm256_storeu_ps(crow + 8, acc[r][1]);
      } else {
        _mm256_storeu_ps(crow, _mm256_add_ps(_mm256_loadu_ps(crow), acc[r][0]));
        _mm256_storeu_ps(crow + 8, _mm256_add_ps(_mm256_loadu_ps(crow + 8), acc[r][1]));
      }
    }
  } else {
    alignas(32) float tmp[NR];
    for (int r = 0; r < rows; ++r) {
      _mm256_store_ps(tmp, acc[r][0]);
      _mm256_store_ps(tmp + 8, acc[r][1]);
      float* crow = c + static_cast<int64_t>(r) * ldc;
      for (int l = 0; l < lanes; ++l)
        crow[l] = overwrite ? tmp[l] : crow[l] + tmp[l];
    }
  }
}

}  // namespace

void sgemm_nn_avx2(int m, int n, int k, const float* a, const float* b, int ldb, float* c,
                   int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate)
      for (int i = 0; i < m; ++i)
        std::memset(c + static_cast<int64_t>(i) * ldc, 0, sizeof(float) * n);
    return;
  }
  const int astrips = (m + MR - 1) / MR;
  tl_apack.resize(static_cast<size_t>(astrips) * MR * KC);
  tl_bpack.resize(static_cast<size_t>((NC + NR - 1) / NR) * NR * KC);

  for (int kb = 0; kb < k; kb += KC) {
    const int kc = k - kb < KC ? k - kb : KC;
    const bool overwrite = !accumulate && kb == 0;
    pack_a(a + kb, k, m, kc, tl_apack.data());
    for (int jc = 0; jc < n; jc += NC) {
      const int nc = n - jc < NC ? n - jc : NC;
      pack_b(b + static_cast<int64_t>(kb) * ldb + jc, ldb, kc, nc, tl_bpack.data());
      for (int s = 0; s < astrips; ++s) {
        const int i0 = s * MR;
        const int rows = m - i0 < MR ? m - i0 : MR;
        const float* ap = tl_apack.data() + static_cast<int64_t>(s) * KC * MR;
        for (int j0 = 0; j0 < nc; j0 += NR) {
          const int lanes = nc - j0 < NR ? nc - j0 : NR;
          const float* bp = tl_bpack.data() + static_cast<int64_t>(j0 / NR) * kc * NR;
          micro_6x16(ap, bp, kc, c + static_cast<int64_t>(i0) * ldc + jc + j0, ldc, rows,
                     lanes, overwrite);
        }
      }
    }
  }
}

namespace {

inline float hsum8(__m256 v) {
  __m128 lo = _mm256_castps256_ps128(v);
  __m128 hi = _mm256_extractf128_ps(v, 1);
  lo = _mm_add_ps(lo, hi);
  lo = _mm_add_ps(lo, _mm_movehl_ps(lo, lo));
  lo = _mm_add_ss(lo, _mm_shuffle_ps(lo, lo, 1));
  return _mm_cvtss_f32(lo);
}

inline float dot_avx2(const float* a, const float* b, int k) {
  __m256 acc0 = _mm256_setzero_ps();
  __m256 acc1 = _mm256_setzero_ps();
  int p = 0;
  for (; p + 16 <= k; p += 16) {
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), acc0);
    acc1 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p + 8), _mm256_loadu_ps(b + p + 8), acc1);
  }
  for (; p + 8 <= k; p += 8)
    acc0 = _mm256_fmadd_ps(_mm256_loadu_ps(a + p), _mm256_loadu_ps(b + p), acc0);
  float acc = hsum8(_mm256_add_ps(acc0, acc1));
  for (; p < k; ++p) acc += a[p] * b[p];
  return acc;
}

}  // namespace

void sgemm_nt_avx2(int m, int n, int k, const float* a, const float* b, float* c,
                   bool accumulate) {
  // 2x2 blocks share vector loads; remainder rows/cols fall back to plain dots
  int i = 0;
  for (; i + 2 <= m; i += 2) {
    const float* a0 = a + static_cast<int64_t>(i) * k;
    const float* a1 = a0 + k;
    float* c0 = c + static_cast<int64_t>(i) * n;
    float* c1 = c0 + n;
    int j = 0;
    for (; j + 2 <= n; j += 2) {
      const float* b0 = b + static_cast<int64_t>(j) * k;
      const float* b1 = b0 + k;
      __m256 s00 = _mm256_setzero_ps(), s01 = _mm256_setzero_ps();
      __m256 s10 = _mm256_setzero_ps(), s11 = _mm256_setzero_ps();
      int p = 0;
      for (; p + 8 <= k; p += 8) {
        const __m256 va0 = _mm256_loadu_ps(a0 + p);
        const __m256 va1 = _mm256_loadu_ps(a1 + p);
        const __m256 vb0 = _mm256_loadu_ps(b0 + p);
        const __m256 vb1 = _mm256_loadu_ps(b1 + p);
        s00 = _mm256_fmadd_ps(va0, vb0, s00);
        s01 = _mm256_fmadd_ps(va0, vb1, s01);
        s10 = _mm256_fmadd_ps(va1, vb0, s10);
        s11 = _mm256_fmadd_ps(va1, vb1, s11);
      }
      float r00 = hsum8(s00), r01 = hsum8(s01), r10 = hsum8(s10), r11 = hsum8(s11);
      for (; p < k; ++p) {
        r00 += a0[p] * b0[p];
        r01 += a0[p] * b1[p];
        r10 += a1[p] * b0[p];
        r11 += a1[p] * b1[p];
      }
      if (accumulate) {
        c0[j] += r00; c0[j + 1] += r01;
        c1[j] += r10; c1[j + 1] += r11;
      } else {
        c0[j] = r00; c0[j + 1] = r01;
        c1[j] = r10; c1[j + 1] = r11;
      }
    }
    for (; j < n; ++j) {
      const float* bj = b + static_cast<int64_t>(j) * k;
      const float r0 = dot_avx2(a0, bj, k);
      const float r1 = dot_avx2(a1, bj, k);
      if (accumulate) { c0[j] += r0; c1[j] += r1; }
      else { c0[j] = r0; c1[j] = r1; }
    }
  }
  for (; i < m; ++i) {
    const float* ai = a + static_cast<int64_t>(i) * k;
    float* ci = c + static_cast<int64_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const float r = dot_avx2(ai, b + static_cast<int64_t>(j) * k, k);
      ci[j] = accumulate ? ci[j] + r : r;
    }
  }
}

void sadd_avx2(const float* a, const float* b, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}

void ssub_avx2(const float* a, const float* b, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}

void smul_avx2(const float* a, const float* b, float* y, int64_t n) {
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}

void saxpy_avx2(float alpha, const float* x, float* y, int64_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(va, _mm256_loadu_ps(x + i), _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] = std::fma(alpha, x[i], y[i]);
}

void sscale_avx2(const float* x, float alpha, float* y, int64_t n) {
  const __m256 va = _mm256_set1_ps(alpha);
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(va, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = alpha * x[i];
}

void srelu_avx2(const float* x, float* y, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void srelu_bwd_avx2(const float* x, const float* g, float* dx, int64_t n) {
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 gm = _mm256_and_ps(mask, _mm256_loadu_ps(g + i));
    _mm256_storeu_ps(dx + i, _mm256_add_ps(_mm256_loadu_ps(dx + i), gm));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) dx[i] += g[i];
}

float ssum_avx2(const float* x, int64_t n) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float s = hsum8(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

float ssumsq_avx2(const float* x, int64_t n) {
  __m256 acc = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 v = _mm256_loadu_ps(x + i);
    acc = _mm256_fmadd_ps(v, v, acc);
  }
  float s = hsum8(acc);
  for (; i < n; ++i) s = std::fma(x[i], x[i], s);
  return s;
}

bool shas_nonfinite_avx2(const float* x, int64_t n) {
  // x*0 == 0 exactly when x is finite (NaN and +-inf both give NaN)
  const __m256 zero = _mm256_setzero_ps();
  int64_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 t = _mm256_mul_ps(_mm256_loadu_ps(x + i), zero);
    const __m256 ok = _mm256_cmp_ps(t, zero, _CMP_EQ_OQ);
    if (_mm256_movemask_ps(ok) != 0xFF) return true;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return true;
  return false;
}

}  // namespace dfr::kernels

#endif  // x86-64
