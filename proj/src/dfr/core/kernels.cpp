#include "dfr/core/kernels.hpp"

#include <thread>
#include <vector>

namespace dfr::kernels {

namespace {

bool use_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return active_backend() == Backend::kAvx2;
#else
  return false;
#endif
}

// Split [0, n) into roughly equal column chunks and run fn(j0, j1) on worker
// threads. Chunk boundaries do not affect results: each output column is
// produced by exactly one worker with the same inner accumulation order.
template <typename Fn>
void parallel_columns(int n, int64_t flops, Fn&& fn) {
  int workers = num_threads();
  constexpr int64_t kMinFlopsPerThread = 8'000'000;
  if (workers > 1) {
    int by_work = static_cast<int>(flops / kMinFlopsPerThread);
    workers = std::min(workers, by_work < 1 ? 1 : by_work);
  }
  workers = std::min(workers, n);
  if (workers <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  int chunk = (n + workers - 1) / workers;
  for (int w = 1; w < workers; ++w) {
    int j0 = w * chunk;
    int j1 = std::min(n, j0 + chunk);
    if (j0 >= j1) break;
    pool.emplace_back([&fn, j0, j1] { fn(j0, j1); });
  }
  fn(0, std::min(n, chunk));
  for (auto& t : pool) t.join();
}

}  // namespace

void sgemm_nn(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  const int64_t flops = 2ll * m * n * k;
  const bool avx2 = use_avx2();
  parallel_columns(n, flops, [&](int j0, int j1) {
    const int nn = j1 - j0;
    if (nn <= 0) return;
    if (avx2)
      sgemm_nn_avx2(m, nn, k, a, b + j0, n, c + j0, n, accumulate);
    else
      // strided column block: fall back to per-row loops honouring ld = n
      for (int i = 0; i < m; ++i) {
        const float* arow = a + static_cast<int64_t>(i) * k;
        float* crow = c + static_cast<int64_t>(i) * n + j0;
        if (!accumulate) std::memset(crow, 0, sizeof(float) * nn);
        for (int p = 0; p < k; ++p) {
          const float av = arow[p];
          if (av == 0.0f) continue;
          const float* brow = b + static_cast<int64_t>(p) * n + j0;
          for (int j = 0; j < nn; ++j) crow[j] += av * brow[j];
        }
      }
  });
}

void sgemm_nt(int m, int n, int k, const float* a, const float* b, float* c, bool accumulate) {
  const int64_t flops = 2ll * m * n * k;
  const bool avx2 = use_avx2();
  // split over rows of C (rows of A); each worker owns full rows
  parallel_columns(m, flops, [&](int i0, int i1) {
    const int mm = i1 - i0;
    if (mm <= 0) return;
    const float* ablock = a + static_cast<int64_t>(i0) * k;
    float* cblock = c + static_cast<int64_t>(i0) * n;
    if (avx2)
      sgemm_nt_avx2(mm, n, k, ablock, b, cblock, accumulate);
    else
      gemm_nt_ref(mm, n, k, ablock, b, cblock, accumulate);
  });
}

// The strided-block scalar fallback above duplicates gemm_nn_ref's arithmetic
// order; single-chunk calls take the reference path exactly.

void sadd(const float* a, const float* b, float* y, int64_t n) {
  if (use_avx2()) sadd_avx2(a, b, y, n); else add_ref(a, b, y, n);
}

void ssub(const float* a, const float* b, float* y, int64_t n) {
  if (use_avx2()) ssub_avx2(a, b, y, n); else sub_ref(a, b, y, n);
}

void smul(const float* a, const float* b, float* y, int64_t n) {
  if (use_avx2()) smul_avx2(a, b, y, n); else mul_ref(a, b, y, n);
}

void saxpy(float alpha, const float* x, float* y, int64_t n) {
  if (use_avx2()) saxpy_avx2(alpha, x, y, n); else axpy_ref(alpha, x, y, n);
}

void sscale(const float* x, float alpha, float* y, int64_t n) {
  if (use_avx2()) sscale_avx2(x, alpha, y, n); else scale_ref(x, alpha, y, n);
}

void srelu(const float* x, float* y, int64_t n) {
  if (use_avx2()) srelu_avx2(x, y, n); else relu_ref(x, y, n);
}

void srelu_bwd(const float* x, const float* g, float* dx, int64_t n) {
  if (use_avx2()) srelu_bwd_avx2(x, g, dx, n); else relu_bwd_ref(x, g, dx, n);
}

float ssum(const float* x, int64_t n) {
  return use_avx2() ? ssum_avx2(x, n) : sum_ref(x, n);
}

float ssumsq(const float* x, int64_t n) {
  return use_avx2() ? ssumsq_avx2(x, n) : sumsq_ref(x, n);
}

bool shas_nonfinite(const float* x, int64_t n) {
  return use_avx2() ? shas_nonfinite_avx2(x, n) : has_nonfinite_ref(x, n);
}

#if !(defined(__x86_64__) || defined(_M_X64))
// Non-x86 builds have no AVX2 TU; keep the linker happy.
void sgemm_nn_avx2(int, int, int, const float*, const float*, int, float*, int, bool) {}
void sgemm_nt_avx2(int, int, int, const float*, const float*, float*, bool) {}
void sadd_avx2(const float*, const float*, float*, int64_t) {}
void ssub_avx2(const float*, const float*, float*, int64_t) {}
void smul_avx2(const float*, const float*, float*, int64_t) {}
void saxpy_avx2(float, const float*, float*, int64_t) {}
void sscale_avx2(const float*, float, float*, int64_t) {}
void srelu_avx2(const float*, float*, int64_t) {}
void srelu_bwd_avx2(const float*, const float*, float*, int64_t) {}
float ssum_avx2(const float*, int64_t) { return 0.0f; }
float ssumsq_avx2(const float*, int64_t) { return 0.0f; }
bool shas_nonfinite_avx2(const float*, int64_t) { return false; }
#endif

}  // namespace dfr::kernels
