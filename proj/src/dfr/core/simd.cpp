#include "dfr/core/simd.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <stdexcept>
#include <thread>

namespace dfr::kernels {

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

Backend resolve_from_env() {
  const char* env = std::getenv("DFR_SIMD");
  std::string v = env ? env : "auto";
  if (v == "scalar") return Backend::kScalar;
  if (v == "avx2") {
    if (!avx2_available()) throw std::runtime_error("DFR_SIMD=avx2 but CPU lacks AVX2/FMA");
    return Backend::kAvx2;
  }
  return avx2_available() ? Backend::kAvx2 : Backend::kScalar;
}

std::atomic<Backend>& backend_slot() {
  static std::atomic<Backend> slot{resolve_from_env()};
  return slot;
}

std::atomic<int>& thread_slot() {
  static std::atomic<int> slot{[] {
    if (const char* env = std::getenv("DFR_NUM_THREADS")) {
      int n = std::atoi(env);
      if (n >= 1) return n;
    }
    unsigned hw = std::thread::hardware_concurrency();
    return static_cast<int>(std::min(2u, hw == 0 ? 1u : hw));
  }()};
  return slot;
}

thread_local int tl_thread_cap = 0;  // 0 = no per-thread override

}  // namespace

Backend active_backend() { return backend_slot().load(std::memory_order_relaxed); }

void force_backend(Backend b) {
  if (b == Backend::kAvx2 && !avx2_available())
    throw std::runtime_error("force_backend: AVX2 not available on this CPU");
  backend_slot().store(b, std::memory_order_relaxed);
}

std::string backend_name(Backend b) {
  return b == Backend::kAvx2 ? "avx2" : "scalar";
}

int num_threads() {
  if (tl_thread_cap > 0) return tl_thread_cap;
  return thread_slot().load(std::memory_order_relaxed);
}

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("set_num_threads: n must be >= 1");
  thread_slot().store(n, std::memory_order_relaxed);
}

ScopedInnerThreads::ScopedInnerThreads(int n) : saved_(tl_thread_cap) {
  tl_thread_cap = n < 1 ? 1 : n;
}

ScopedInnerThreads::~ScopedInnerThreads() { tl_thread_cap = saved_; }

}  // namespace dfr::kernels
