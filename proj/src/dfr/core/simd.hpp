#pragma once

#include <string>

namespace dfr::kernels {

// Kernel backend. kAvx2 is only selectable on x86-64 hosts with AVX2+FMA;
// everything else falls back to the scalar reference path.
enum class Backend { kScalar, kAvx2 };

bool avx2_available();

// Active backend, resolved once from DFR_SIMD (auto|scalar|avx2) and CPU
// capabilities. force_backend overrides it (tests use this to compare paths).
Backend active_backend();
void force_backend(Backend b);

std::string backend_name(Backend b);

// Worker count for the column-split GEMM path. Resolved from DFR_NUM_THREADS,
// default min(2, hardware_concurrency). Results are bitwise independent of
// this value: every output element is accumulated by exactly one thread in a
// fixed k-order.
int num_threads();
void set_num_threads(int n);

// Scoped per-thread cap (evaluation workers run GEMMs single-threaded).
class ScopedInnerThreads {
 public:
  explicit ScopedInnerThreads(int n);
  ~ScopedInnerThreads();
 private:
  int saved_;
};

}  // namespace dfr::kernels
